"""Two-stage retrieval: global nearest neighbours, then geometric re-ranking.

Stage one ranks references by L2 distance between GeM descriptors.  Stage two
re-orders the top-k by the number of mutual-NN matches that agree with a
homography estimated by either the DHE network or RANSAC.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .backbone import BackboneParams, describe, gem_pool, load_feature_map
from .dhenet import DHEParams, homography_from_similarity
from .formats import FormatError, read_jsonl, read_raster, write_jsonl
from .geometry import PatchGrid, classify_inliers
from .matching import FeatureMap, mutual_nn, similarity_map
from .ransac import RansacConfig, RansacError, pair_seed, ransac_homography

log = logging.getLogger(__name__)

VERIFIERS = ("dhe", "ransac", "none")
DEFAULT_TOPK = 32
DHE_THETA_FACTOR = 3.0
RANSAC_THETA_FACTOR = 1.5
FMAP_SUFFIXES = (".fmap",)


class DataError(ValueError):
    """Bad or unresolvable input data (manifest, files, ids)."""


# ---------------------------------------------------------------------------
# manifests and ground truth
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    id: str
    split: str
    path: str
    easting: float | None = None
    northing: float | None = None
    heading_deg: float | None = None
    frame_index: int | None = None
    place_id: str | None = None

    @classmethod
    def from_json(cls, rec: dict) -> "ManifestRecord":
        try:
            out = cls(**{k: rec.get(k) for k in cls.__dataclass_fields__ if k in rec})
        except TypeError as exc:
            raise DataError(f"bad manifest record {rec!r}: {exc}") from exc
        if not out.id or out.split not in ("query", "reference") or not out.path:
            raise DataError(f"manifest record needs id, split (query|reference) and path: {rec!r}")
        return out


def load_manifest(path) -> tuple[list[ManifestRecord], Path]:
    """Records plus the directory their relative paths resolve against."""
    path = Path(path)
    try:
        raw = read_jsonl(path)
    except (OSError, json.JSONDecodeError, FormatError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records = [ManifestRecord.from_json(r) for r in raw]
    seen: set[str] = set()
    for r in records:
        if r.id in seen:
            raise DataError(f"duplicate id {r.id!r} in {path}")
        seen.add(r.id)
    return records, path.parent


@dataclass(frozen=True)
class GroundTruthRule:
    """When a reference counts as a correct match for a query.

    ``geo`` compares planar coordinates, ``frame`` compares frame indices and
    ``place`` compares place labels.
    """

    mode: str = "geo"
    distance_threshold: float = 25.0
    frame_tolerance: int = 2
    heading_threshold: float | None = None

    def __post_init__(self):
        if self.mode not in ("geo", "frame", "place"):
            raise ValueError(f"unknown ground-truth mode {self.mode!r}")
        if self.distance_threshold <= 0 or self.frame_tolerance < 0:
            raise ValueError("thresholds must be positive")
        if self.heading_threshold is not None and self.heading_threshold <= 0:
            raise ValueError("heading threshold must be positive")

    def _require(self, rec: ManifestRecord, *names: str) -> None:
        for n in names:
            if getattr(rec, n) is None:
                raise DataError(f"{rec.id}: mode {self.mode} requires field {n!r}")

    def is_positive(self, q: ManifestRecord, r: ManifestRecord) -> bool:
        if self.mode == "geo":
            self._require(q, "easting", "northing")
            self._require(r, "easting", "northing")
            ok = math.hypot(q.easting - r.easting, q.northing - r.northing) <= self.distance_threshold
        elif self.mode == "frame":
            self._require(q, "frame_index")
            self._require(r, "frame_index")
            ok = abs(q.frame_index - r.frame_index) <= self.frame_tolerance
        else:
            self._require(q, "place_id")
            self._require(r, "place_id")
            ok = q.place_id == r.place_id
        if ok and self.heading_threshold is not None:
            self._require(q, "heading_deg")
            self._require(r, "heading_deg")
            diff = abs((q.heading_deg - r.heading_deg + 180.0) % 360.0 - 180.0)
            ok = diff <= self.heading_threshold
        return ok


# ---------------------------------------------------------------------------
# features and the global index
# ---------------------------------------------------------------------------


def load_view(rec: ManifestRecord, base: Path, backbone: BackboneParams | None) -> tuple[FeatureMap, np.ndarray]:
    """Feature map and global descriptor for one manifest entry.

    FMAP files are used as-is; rasters go through ``backbone``.
    """
    path = Path(rec.path)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise DataError(f"{rec.id}: file not found: {path}")
    try:
        if path.suffix.lower() in FMAP_SUFFIXES:
            fmap = load_feature_map(path, rec.id)
            gem_p = backbone.cfg.gem_p if backbone is not None else 3.0
            return fmap, gem_pool(fmap.values, gem_p)
        if backbone is None:
            raise DataError(f"{rec.id}: raster input needs backbone weights")
        return describe(read_raster(path), backbone, rec.id)
    except FormatError as exc:
        raise DataError(f"{rec.id}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{rec.id}: {exc}") from exc


@dataclass
class GlobalIndex:
    descriptors: np.ndarray  # (num_refs, C), unit rows
    ids: list[str]
    records: dict[str, ManifestRecord] = field(default_factory=dict)
    feature_maps: dict[str, FeatureMap] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids are not unique")
        desc = np.asarray(self.descriptors, dtype=np.float64)
        self.descriptors = desc.reshape(len(self.ids), -1) if self.ids else desc.reshape(0, 0)

    def __len__(self) -> int:
        return len(self.ids)

    def save(self, path) -> None:
        np.savez(path, descriptors=self.descriptors, ids=np.array(self.ids, dtype=str))

    @classmethod
    def load(cls, path) -> "GlobalIndex":
        with np.load(path) as z:
            return cls(z["descriptors"], [str(i) for i in z["ids"]])


def build_index(
    records: Sequence[ManifestRecord],
    backbone: BackboneParams | None,
    base: Path | str = ".",
    views: dict[str, tuple[FeatureMap, np.ndarray]] | None = None,
) -> GlobalIndex:
    """Index every reference record.  ``views`` may supply precomputed features."""
    refs = [r for r in records if r.split == "reference"]
    ids = [r.id for r in refs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate reference id(s): {dup}")
    fmaps, descs = {}, []
    for r in refs:
        fmap, desc = views[r.id] if views is not None and r.id in views else load_view(r, Path(base), backbone)
        fmaps[r.id] = fmap
        descs.append(desc)
    mat = np.stack(descs) if descs else np.zeros((0, 0))
    return GlobalIndex(mat, ids, {r.id: r for r in refs}, fmaps)


@dataclass
class Candidate:
    ref_id: str
    stage1_dist: float


def retrieve_topk(index: GlobalIndex, query_descriptor, k: int = DEFAULT_TOPK) -> list[Candidate]:
    """The ``k`` nearest references by L2 distance; ties go to the lowest id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    q = np.asarray(query_descriptor, dtype=np.float64).ravel()
    dist = np.sqrt(((index.descriptors - q) ** 2).sum(axis=1))
    order = sorted(range(len(index)), key=lambda i: (dist[i], index.ids[i]))
    return [Candidate(index.ids[i], float(dist[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# re-ranking
# ---------------------------------------------------------------------------


@dataclass
class RankedCandidate:
    ref_id: str
    stage1_dist: float
    inliers: int | None
    rank: int


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list[RankedCandidate]
    verifier: str

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranked": [
                {"ref_id": c.ref_id, "stage1_dist": c.stage1_dist, "inliers": c.inliers, "rank": c.rank}
                for c in self.ranked
            ],
            "verifier": self.verifier,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "RetrievalResult":
        ranked = [RankedCandidate(c["ref_id"], c["stage1_dist"], c["inliers"], c["rank"]) for c in rec["ranked"]]
        return cls(rec["query_id"], ranked, rec["verifier"])

    @property
    def ids(self) -> list[str]:
        return [c.ref_id for c in self.ranked]


@dataclass(frozen=True)
class VerifierConfig:
    verifier: str = "dhe"
    theta_infer: float | None = None  # None -> 3x patch (dhe) or 1.5x patch (ransac)
    ransac_iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.verifier not in VERIFIERS:
            raise ValueError(f"unknown verifier {self.verifier!r}; expected one of {VERIFIERS}")

    def theta(self, grid: PatchGrid) -> float:
        if self.theta_infer is not None:
            return self.theta_infer
        factor = DHE_THETA_FACTOR if self.verifier == "dhe" else RANSAC_THETA_FACTOR
        return factor * grid.patch_size


def verify_pair(fq: FeatureMap, fc: FeatureMap, cfg: VerifierConfig, dhe: DHEParams | None = None) -> int:
    """Inlier count for one query/candidate pair; 0 when verification fails."""
    s = similarity_map(fq, fc)
    matches = mutual_nn(s)
    theta = cfg.theta(fq.grid)
    try:
        if cfg.verifier == "dhe":
            if dhe is None:
                raise ValueError("verifier dhe needs DHE parameters")
            H = homography_from_similarity(s, dhe, fq.grid)
            return classify_inliers(H, matches, fq.grid, theta).count
        rcfg = RansacConfig(iterations=cfg.ransac_iterations, theta=theta, seed=pair_seed(cfg.seed, fq.id, fc.id))
        return ransac_homography(matches, fq.grid, rcfg)[1].count
    except (dc.SingularSystemError, RansacError) as exc:
        log.info("verification failed for %s/%s: %s", fq.id, fc.id, exc)
        return 0


def rerank(
    query_fmap: FeatureMap,
    candidates: Sequence[Candidate],
    cand_fmaps: dict[str, FeatureMap],
    cfg: VerifierConfig,
    dhe: DHEParams | None = None,
    workers: int = 1,
) -> RetrievalResult:
    """Order candidates by inlier count (desc), then stage-1 distance, then id."""
    cands = list(candidates)
    if cfg.verifier == "none":
        counts: list[int | None] = [None] * len(cands)
    else:
        jobs = [(query_fmap, cand_fmaps[c.ref_id]) for c in cands]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                counts = list(pool.map(lambda j: verify_pair(j[0], j[1], cfg, dhe), jobs))
        else:
            counts = [verify_pair(fq, fc, cfg, dhe) for fq, fc in jobs]
    order = sorted(
        range(len(cands)),
        key=lambda i: (-(counts[i] or 0), cands[i].stage1_dist, cands[i].ref_id),
    )
    ranked = [
        RankedCandidate(cands[i].ref_id, cands[i].stage1_dist, counts[i], rank)
        for rank, i in enumerate(order, start=1)
    ]
    return RetrievalResult(query_fmap.id, ranked, cfg.verifier)


def run_queries(
    queries: Sequence[tuple[FeatureMap, np.ndarray]],
    index: GlobalIndex,
    cfg: VerifierConfig,
    dhe: DHEParams | None = None,
    k: int = DEFAULT_TOPK,
    workers: int = 1,
) -> list[RetrievalResult]:
    """Retrieve and re-rank each ``(feature map, descriptor)`` query in order."""
    return [
        rerank(fmap, retrieve_topk(index, desc, k), index.feature_maps, cfg, dhe, workers) for fmap, desc in queries
    ]


def write_results(path, results: Iterable[RetrievalResult]) -> None:
    write_jsonl(path, [r.to_json() for r in results])


def read_results(path) -> list[RetrievalResult]:
    return [RetrievalResult.from_json(r) for r in read_jsonl(path)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class RecallReport:
    recall: dict[int, float]  # percentage per N
    evaluated: int
    excluded: int

    def lines(self) -> list[str]:
        return [f"R@{n}={v:.1f}" for n, v in sorted(self.recall.items())]


def recall_at_n(
    results: Sequence[RetrievalResult],
    rule: GroundTruthRule,
    ns: Sequence[int],
    records: dict[str, ManifestRecord],
) -> RecallReport:
    """Percentage of queries with a correct reference in the top N.

    Queries without any valid positive among the references in ``records``
    are left out and reported in ``excluded``.
    """
    if any(n < 1 for n in ns):
        raise ValueError("N must be >= 1")
    refs = [r for r in records.values() if r.split == "reference"]
    hits = {n: 0 for n in ns}
    evaluated = excluded = 0
    for res in results:
        q = records.get(res.query_id)
        if q is None:
            raise DataError(f"query {res.query_id!r} missing from manifest")
        if not any(rule.is_positive(q, r) for r in refs):
            excluded += 1
            continue
        evaluated += 1
        correct = [rule.is_positive(q, records[rid]) for rid in res.ids]
        for n in ns:
            if any(correct[:n]):
                hits[n] += 1
    recall = {n: (100.0 * hits[n] / evaluated if evaluated else 0.0) for n in ns}
    return RecallReport(recall, evaluated, excluded)
