"""Deep homography estimation network.

Similarity matching (parameter-free inner products) followed by homography
regression: the rows of ``s + E_pos`` are projected to ``model_dim`` tokens,
passed through a stack of pre-norm encoder layers with one long shortcut,
mean-pooled, and mapped to 16 numbers.  Those are read as tanh-bounded offsets
(at most a quarter of the image extent) from the four image corners on each
side, and a 4-point DLT turns the correspondence into a homography.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .formats import DimensionError, FormatError, read_weights, write_weights
from .geometry import Homography, PatchGrid, dlt_solve
from .layers import affine, affine_params, encoder_layer, encoder_params, layer_norm, norm_params
from .matching import FeatureMap, SimilarityMap, similarity_map
from .rng import make_rng

OFFSET_FRACTION = 0.25
TRAIN_RIDGE = 1e-6


@dataclass(frozen=True)
class DHEConfig:
    m_tokens: int
    model_dim: int = 64
    num_layers: int = 6
    num_heads: int = 4
    ffn_dim: int | None = None
    shortcut_from: int = 3
    shortcut_to: int = 6

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.model_dim)
        if not self.num_layers >= self.shortcut_to > self.shortcut_from >= 1:
            raise ValueError("need num_layers >= shortcut_to > shortcut_from >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.m_tokens < 1:
            raise ValueError("m_tokens must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DHEParams:
    cfg: DHEConfig
    tensors: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> "DHEParams":
        return DHEParams(self.cfg, {k: Tensor(t.data, dtype=dtype) for k, t in self.tensors.items()})

    def copy(self) -> "DHEParams":
        return DHEParams(self.cfg, {k: Tensor(t.data.copy()) for k, t in self.tensors.items()})


@dataclass
class FourPointCorrespondence:
    pq: Tensor  # (4, 2) on the query image
    pc: Tensor  # (4, 2) on the candidate image


def init_params(cfg: DHEConfig, seed: int = 0) -> DHEParams:
    rng = make_rng(seed)
    p: dict[str, Tensor] = {"pos_embedding": Tensor(np.zeros((cfg.m_tokens, cfg.m_tokens)))}
    affine_params(p, "input_projection", cfg.m_tokens, cfg.model_dim, rng)
    for i in range(1, cfg.num_layers + 1):
        encoder_params(p, f"layer{i}", cfg.model_dim, cfg.ffn_dim, rng)
    norm_params(p, "final_norm", cfg.model_dim)
    affine_params(p, "head", cfg.model_dim, 16, rng, zero=True)
    return DHEParams(cfg, p)


def _offsets_to_points(o: Tensor, grid: PatchGrid) -> FourPointCorrespondence:
    corners = grid.corners()
    extent = OFFSET_FRACTION * np.array([grid.image_w, grid.image_h], dtype=np.float64)
    bounded = dc.tanh(o).reshape(2, 4, 2) * Tensor(extent)
    pq = Tensor(corners) + bounded[0]
    pc = Tensor(corners) + bounded[1]
    return FourPointCorrespondence(pq, pc)


def regress_4pt(s, params: DHEParams, grid: PatchGrid) -> FourPointCorrespondence:
    cfg = params.cfg
    s_t = dc.as_tensor(s.s if isinstance(s, SimilarityMap) else s)
    if s_t.shape != (cfg.m_tokens, cfg.m_tokens):
        raise dc.ShapeError(f"similarity map {s_t.shape} != ({cfg.m_tokens}, {cfg.m_tokens})")
    if grid.num_patches != cfg.m_tokens:
        raise dc.ShapeError(f"grid has {grid.num_patches} patches, network expects {cfg.m_tokens}")
    t = params.tensors
    x = affine(s_t + t["pos_embedding"], t, "input_projection")
    saved = None
    for i in range(1, cfg.num_layers + 1):
        x = encoder_layer(x, t, f"layer{i}", cfg.num_heads)
        if i == cfg.shortcut_from:
            saved = x
        if i == cfg.shortcut_to:
            x = x + saved
    pooled = dc.mean(layer_norm(x, t, "final_norm"), axis=0, keepdims=True)
    o = affine(pooled, t, "head").reshape(16)
    return _offsets_to_points(o, grid)


def dhe_homography_t(s, params: DHEParams, grid: PatchGrid, ridge: float = TRAIN_RIDGE) -> Tensor:
    """Differentiable homography (3x3 tensor, h33 = 1) from a similarity map."""
    four = regress_4pt(s, params, grid)
    return dlt_solve(four.pq, four.pc, ridge=ridge)


def dhe_forward(fq: FeatureMap, fc: FeatureMap, params: DHEParams, ridge: float = 0.0) -> Homography:
    """Inference-mode homography for a query/candidate pair.

    Raises ``SingularSystemError`` when the regressed correspondence cannot be
    solved; callers score such pairs as zero inliers.
    """
    with dc.no_grad():
        s = similarity_map(fq.detach(), fc.detach())
        return homography_from_similarity(s, params, fq.grid, ridge)


def homography_from_similarity(s, params: DHEParams, grid: PatchGrid, ridge: float = 0.0) -> Homography:
    with dc.no_grad():
        four = regress_4pt(s, params, grid)
        pq, pc = four.pq.data.astype(np.float64), four.pc.data.astype(np.float64)
    return dlt_solve(pq, pc, ridge=ridge)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def expected_shapes(cfg: DHEConfig) -> dict[str, tuple[int, ...]]:
    return {k: t.shape for k, t in init_params(cfg, 0).tensors.items()}


def save_params(params: DHEParams, path) -> None:
    """Write a DHEW file plus ``<path>.json`` holding the config.

    Values are stored as 32-bit reals, so the round trip is exact for
    float32-representable parameters.
    """
    write_weights(path, params.arrays(), {"kind": "dhe", **params.cfg.to_dict()})


def load_params(path) -> DHEParams:
    tensors, cfg_dict = read_weights(path)
    if cfg_dict is None:
        raise FormatError(f"missing config sidecar for {path}")
    cfg_dict = {k: v for k, v in cfg_dict.items() if k != "kind"}
    cfg = DHEConfig(**cfg_dict)
    want = expected_shapes(cfg)
    if set(want) != set(tensors):
        missing = sorted(set(want) - set(tensors))
        extra = sorted(set(tensors) - set(want))
        raise DimensionError(f"tensor names disagree with config (missing {missing}, extra {extra})")
    for name, shape in want.items():
        if tensors[name].shape != shape:
            raise DimensionError(f"{name}: shape {tensors[name].shape} != declared {shape}")
    return DHEParams(cfg, {k: Tensor(tensors[k]) for k in want})
