"""Losses, hard-negative mining and the three training stages.

Stage ``backbone`` fits the feature extractor with a triplet loss on global
descriptors.  Stage ``dhe`` freezes the backbone and fits the homography
network with the re-projection error of the N best matches, where N is the
RANSAC inlier count for the pair.  Stage ``joint`` optimises the sum of both
losses through the unfrozen backbone layers and the homography network.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .backbone import BackboneParams, describe, extract_features, gem_pool
from .diffcore import Tensor
from .dhenet import DHEParams, dhe_homography_t
from .geometry import Homography, PatchGrid, match_points, reprojection_errors, reprojection_errors_t
from .matching import FeatureMap, MatchSet, mutual_nn, similarity_map
from .ransac import RansacConfig, RansacError, ransac_homography, pair_seed
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

STAGES = ("backbone", "dhe", "joint")
STAGE_ITERATIONS = {"backbone": 2000, "dhe": 5000, "joint": 2000}
STAGE_LR = {"backbone": 1e-5, "dhe": 1e-4, "joint": 1e-5}
MIN_PAIR_MATCHES = 4


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    lambda_: float = 100.0
    theta_factor: float = 1.5  # theta_train = theta_factor * patch size

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")

    def theta_train(self, grid: PatchGrid) -> float:
        return self.theta_factor * grid.patch_size


@dataclass
class TripletSample:
    query: str
    positive: str
    negatives: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("a triplet needs at least one negative")


@dataclass
class LossCounters:
    """Non-fatal events raised by :func:`rei_loss`."""

    skipped: int = 0
    clamped: int = 0


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def descriptor_distance(a, b):
    """L2 distance between two global descriptors (Tensor in, Tensor out)."""
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return dc.norm(dc.as_tensor(a) - dc.as_tensor(b), axis=-1)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def triplet_loss(dq_pos, dq_negs: Sequence, m: float):
    """Sum over negatives of ``max(d_pos + m - d_neg, 0)``."""
    if m <= 0:
        raise ValueError("margin must be positive")
    if any(isinstance(d, Tensor) for d in [dq_pos, *dq_negs]):
        terms = [dc.relu(dc.as_tensor(dq_pos) + m - dc.as_tensor(d)) for d in dq_negs]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total
    if dq_pos < 0 or any(d < 0 for d in dq_negs):
        raise ValueError("distances must be non-negative")
    return float(sum(max(dq_pos + m - d, 0.0) for d in dq_negs))


def rei_loss(H, matches, n_ransac: int, grid: PatchGrid, counters: LossCounters | None = None):
    """Mean re-projection error of the ``n_ransac`` best matches under ``H``.

    The choice of the N smallest errors is an index selection outside the
    graph; gradients flow through the selected errors only.  Returns ``None``
    (and counts a skip) when there is nothing to average.  When fewer matches
    than ``n_ransac`` exist, N is clamped and the event counted.
    """
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    n = int(n_ransac)
    if len(pairs) == 0 or n <= 0:
        if counters is not None:
            counters.skipped += 1
        return None
    if n > len(pairs):
        n = len(pairs)
        if counters is not None:
            counters.clamped += 1
    pq, pc = match_points(pairs, grid)
    if isinstance(H, Tensor):
        errs = reprojection_errors_t(H, pq, pc)
        idx = np.argsort(errs.data, kind="stable")[:n]
        return dc.mean(errs[idx])
    errs = reprojection_errors(np.asarray(H, dtype=np.float64), pq, pc)
    return float(np.sort(errs)[:n].mean())


def joint_loss(lg, lr, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lr is None or lam == 0:
        return lg
    return lg + lr * lam


def mine_hard_negatives(query_desc, negative_pool, k: int) -> list[str]:
    """The ``k`` pool members nearest to ``query_desc``; ties go to the lowest id.

    ``negative_pool`` maps id -> descriptor (or is a sequence of such pairs)
    and must already exclude every positive of the query.
    """
    items = list(negative_pool.items()) if isinstance(negative_pool, dict) else list(negative_pool)
    if k <= 0:
        return []
    if len(items) < k:
        warnings.warn(f"negative pool has {len(items)} members, fewer than k={k}", RuntimeWarning)
    q = np.asarray(query_desc, dtype=np.float64)
    scored = sorted((float(np.linalg.norm(np.asarray(d) - q)), rid) for rid, d in items)
    return [rid for _, rid in scored[:k]]


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Images keyed by view id plus the place each view belongs to."""

    images: dict[str, np.ndarray]
    place_of: dict[str, str]

    def __post_init__(self):
        if set(self.images) != set(self.place_of):
            raise ValueError("images and place labels cover different ids")

    @classmethod
    def from_synth(cls, ds, places: Sequence[str] | None = None) -> "TrainingSet":
        keep = None if places is None else set(places)
        views = [v for v in ds.views if keep is None or v.place_id in keep]
        return cls({v.id: v.image for v in views}, {v.id: v.place_id for v in views})

    @property
    def ids(self) -> list[str]:
        return sorted(self.images)

    def positives(self, view_id: str) -> list[str]:
        place = self.place_of[view_id]
        return [i for i in self.ids if i != view_id and self.place_of[i] == place]

    def positive_pairs(self) -> list[tuple[str, str]]:
        return [(a, b) for a in self.ids for b in self.positives(a)]


@dataclass
class TrainConfig:
    iterations: int | None = None  # None -> stage default
    lr: float | None = None  # None -> stage default
    batch_size: int = 4
    negatives: int = 2
    lr_decay: float = 0.8  # DHE stage only
    decay_every_epochs: int = 5
    mine_every: int = 50  # iterations between descriptor cache refreshes
    ransac_iterations: int = 500
    seed: int = 0
    start_iter: int = 0  # resume offset for logging and the lr schedule

    def resolved(self, stage: str) -> "TrainConfig":
        out = TrainConfig(**asdict(self))
        if out.iterations is None:
            out.iterations = STAGE_ITERATIONS[stage]
        if out.lr is None:
            out.lr = STAGE_LR[stage]
        return out


@dataclass
class TrainResult:
    backbone: BackboneParams
    dhe: DHEParams | None
    metrics: list[dict]


def _grid_of(data: TrainingSet, backbone: BackboneParams) -> PatchGrid:
    img = data.images[data.ids[0]]
    h, w = img.shape[:2]
    ps = backbone.cfg.patch_size
    return PatchGrid(w // ps, h // ps, w, h)


def ransac_supervision(
    fq: FeatureMap, fc: FeatureMap, matches: MatchSet, grid: PatchGrid, loss_cfg: LossConfig, iterations: int, seed: int
) -> int:
    """RANSAC inlier count at the training threshold; 0 if RANSAC cannot run."""
    if len(matches) < MIN_PAIR_MATCHES:
        return 0
    cfg = RansacConfig(iterations=iterations, theta=loss_cfg.theta_train(grid), seed=pair_seed(seed, fq.id, fc.id))
    try:
        return ransac_homography(matches, grid, cfg)[1].count
    except RansacError:
        return 0


def _set_trainable(tensors: Sequence[Tensor], flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag
        t.grad = None


class _Batches:
    """Deterministic epoch-shuffled batches over a list of items."""

    def __init__(self, items: list, batch_size: int, rng: np.random.Generator):
        if not items:
            raise ValueError("no training items")
        self.items, self.batch_size, self.rng = items, batch_size, rng
        self.order: list[int] = []
        self.epoch = -1

    def next(self) -> list:
        out = []
        while len(out) < self.batch_size:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
                self.epoch += 1
            out.append(self.items[self.order.pop(0)])
        return out


def _descriptor_cache(data: TrainingSet, backbone: BackboneParams) -> dict[str, np.ndarray]:
    return {i: describe(data.images[i], backbone, i)[1] for i in data.ids}


def _check_finite(value: float, stage: str, it: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"stage {stage}: non-finite loss at iteration {it}")


def train_stage(
    stage: str,
    data: TrainingSet,
    backbone: BackboneParams,
    dhe: DHEParams | None = None,
    cfg: TrainConfig | None = None,
    loss_cfg: LossConfig | None = None,
    log_path=None,
) -> TrainResult:
    """Run one stage in place on ``backbone`` / ``dhe`` and return per-iteration metrics.

    Frozen tensors are never written.  When ``log_path`` is given every
    metrics record is appended to it as one JSON line.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage in ("dhe", "joint") and dhe is None:
        raise ValueError(f"stage {stage} needs DHE parameters")
    cfg = (cfg or TrainConfig()).resolved(stage)
    loss_cfg = loss_cfg or LossConfig()
    grid = _grid_of(data, backbone)
    if dhe is not None and dhe.cfg.m_tokens != grid.num_patches:
        raise ValueError(f"DHE expects {dhe.cfg.m_tokens} tokens, images give {grid.num_patches}")

    bb_train = backbone.trainable() if stage in ("backbone", "joint") else []
    dhe_train = dhe.parameters() if stage in ("dhe", "joint") else []
    params = bb_train + dhe_train
    if not params:
        raise ValueError(f"stage {stage} has nothing to train")
    _set_trainable(backbone.parameters(), False)
    if dhe is not None:
        _set_trainable(dhe.parameters(), False)
    _set_trainable(params, True)
    opt = dc.Adam(params, lr=cfg.lr)

    # backbone and joint share a sampling stream so joint with lambda 0 reduces to backbone
    stream = "dhe" if stage == "dhe" else "triplet"
    rng = make_rng(derive_seed(cfg.seed, "train", stream, cfg.start_iter))
    sink = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    metrics: list[dict] = []
    try:
        if stage == "dhe":
            step = _dhe_stage_step(data, backbone, dhe, cfg, loss_cfg, grid, rng)
        else:
            step = _triplet_stage_step(stage, data, backbone, dhe, cfg, loss_cfg, grid, rng)
        for k in range(cfg.iterations):
            it = cfg.start_iter + k
            opt.zero_grad()
            record, loss, epoch = step(it)
            _check_finite(record["loss"], stage, it)
            if loss is not None and loss.requires_grad:
                loss.backward()
                opt.step()
            if stage == "dhe":
                opt.lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every_epochs)
            metrics.append(record)
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if sink is not None:
            sink.close()
        _set_trainable(params, False)
    return TrainResult(backbone, dhe, metrics)


def _dhe_stage_step(data, backbone, dhe, cfg, loss_cfg, grid, rng):
    # Backbone is frozen, so features and RANSAC supervision are fixed for the
    # whole stage and computed once per view / pair.
    feats = {i: describe(data.images[i], backbone, i)[0] for i in data.ids}
    pairs = data.positive_pairs()
    sims, matches, supervision = {}, {}, {}
    for q, c in pairs:
        s = similarity_map(feats[q], feats[c])
        m = mutual_nn(s)
        sims[q, c], matches[q, c] = s, m
        supervision[q, c] = ransac_supervision(
            feats[q], feats[c], m, grid, loss_cfg, cfg.ransac_iterations, cfg.seed
        )
    batches = _Batches(pairs, cfg.batch_size, rng)

    def step(it: int):
        counters = LossCounters()
        losses = []
        for key in batches.next():
            if len(matches[key]) < MIN_PAIR_MATCHES:
                counters.skipped += 1
                continue
            H = dhe_homography_t(sims[key], dhe, grid)
            lr_ = rei_loss(H, matches[key], supervision[key], grid, counters)
            if lr_ is not None:
                losses.append(lr_)
        loss = _mean(losses)
        value = float(loss.data) if loss is not None else 0.0
        record = _record("dhe", it, None, value, value, counters.skipped)
        return record, loss, batches.epoch

    return step


def _triplet_stage_step(stage, data, backbone, dhe, cfg, loss_cfg, grid, rng):
    anchors = [i for i in data.ids if data.positives(i)]
    if not anchors:
        raise ValueError("no view has a positive")
    batches = _Batches(anchors, cfg.batch_size, rng)
    cache: dict[str, np.ndarray] = {}
    joint = stage == "joint"

    def step(it: int):
        nonlocal cache
        if (it - cfg.start_iter) % cfg.mine_every == 0:
            cache = _descriptor_cache(data, backbone)
        counters = LossCounters()
        g_terms, r_terms = [], []
        for q in batches.next():
            pos = data.positives(q)
            p = pos[int(rng.integers(len(pos)))]
            pool = {i: cache[i] for i in data.ids if data.place_of[i] != data.place_of[q]}
            negs = mine_hard_negatives(cache[q], pool, cfg.negatives)
            fq = extract_features(data.images[q], backbone, q)
            fp = extract_features(data.images[p], backbone, p)
            dq = gem_pool(fq, backbone.cfg.gem_p)
            d_pos = descriptor_distance(dq, gem_pool(fp, backbone.cfg.gem_p))
            d_negs = []
            for n in negs:
                fn = extract_features(data.images[n], backbone, n)
                d_negs.append(descriptor_distance(dq, gem_pool(fn, backbone.cfg.gem_p)))
            g_terms.append(triplet_loss(d_pos, d_negs, loss_cfg.margin))
            if joint and loss_cfg.lambda_ > 0:
                s = similarity_map(fq, fp)
                m = mutual_nn(s)
                if len(m) < MIN_PAIR_MATCHES:
                    counters.skipped += 1
                    continue
                n_sup = ransac_supervision(
                    fq.detach(), fp.detach(), m, grid, loss_cfg, cfg.ransac_iterations, cfg.seed
                )
                H = dhe_homography_t(s, dhe, grid)
                r = rei_loss(H, m, n_sup, grid, counters)
                if r is not None:
                    r_terms.append(r)
        lg, lr_ = _mean(g_terms), _mean(r_terms)
        loss = joint_loss(lg, lr_, loss_cfg.lambda_) if joint else lg
        g_val = float(lg.data)
        r_val = float(lr_.data) if lr_ is not None else None
        record = _record(stage, it, g_val, r_val, float(loss.data), counters.skipped)
        return record, loss, batches.epoch

    return step


def _mean(terms: list):
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return dc.scale(total, 1.0 / len(terms))


def _record(stage: str, it: int, loss_g, loss_r, loss: float, skipped: int) -> dict:
    return {
        "stage": stage,
        "iter": it,
        "loss_g": loss_g,
        "loss_r": loss_r,
        "loss": loss,
        "skipped_pairs": skipped,
    }


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def mean_rei(
    data: TrainingSet,
    backbone: BackboneParams,
    dhe: DHEParams,
    loss_cfg: LossConfig | None = None,
    ransac_iterations: int = 500,
    seed: int = 0,
) -> float:
    """Mean REI loss over all positive pairs (skipped pairs excluded)."""
    from .dhenet import homography_from_similarity

    loss_cfg = loss_cfg or LossConfig()
    grid = _grid_of(data, backbone)
    feats = {i: describe(data.images[i], backbone, i)[0] for i in data.ids}
    vals = []
    for q, c in data.positive_pairs():
        s = similarity_map(feats[q], feats[c])
        m = mutual_nn(s)
        n = ransac_supervision(feats[q], feats[c], m, grid, loss_cfg, ransac_iterations, seed)
        try:
            H: Homography = homography_from_similarity(s, dhe, grid, ridge=0.0)
        except dc.SingularSystemError:
            continue
        v = rei_loss(H, m, n, grid)
        if v is not None:
            vals.append(v)
    return float(np.mean(vals)) if vals else float("nan")


def save_metrics(path, metrics: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in metrics))
