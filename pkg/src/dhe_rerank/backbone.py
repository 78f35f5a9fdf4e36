"""Toy trainable feature extractor and GeM global descriptors.

The image is divided into a grid of square patches.  Each patch token is
embedded from a context window centred on the patch: the Gaussian-blurred image
sampled on a small lattice that extends beyond the patch borders.  The wider,
smoothed support keeps tokens stable under sub-patch misalignment, which raw
patch pixels are not.  Encoder blocks refine the tokens.  There is no
positional embedding.  Local features are the L2-normalised output rows; the
global descriptor is GeM over the un-normalised rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .diffcore import Tensor
from .formats import DimensionError, FormatError, read_fmap, read_weights, write_fmap, write_weights
from .geometry import PatchGrid
from .layers import affine, affine_params, encoder_layer, encoder_params
from .matching import FeatureMap
from .rng import make_rng

GEM_FLOOR = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    in_channels: int = 1
    channels: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int | None = None
    freeze_below: int = 2
    gem_p: float = 3.0
    context_window: float = 32.0
    context_samples: int = 8
    blur_sigma: float = 3.0
    residual_gain: float = 0.1

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 2 * self.channels)
        if not 0 <= self.freeze_below <= self.num_layers:
            raise ValueError("freeze_below must lie in [0, num_layers]")
        if self.channels % self.num_heads:
            raise ValueError("channels must be divisible by num_heads")
        if self.gem_p < 1:
            raise ValueError("GeM exponent must be >= 1")
        if self.context_samples < 1 or self.context_window <= 0 or self.blur_sigma < 0:
            raise ValueError("context window, sample count and blur must be positive")

    @property
    def token_inputs(self) -> int:
        return self.context_samples * self.context_samples * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    tensors: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def trainable_names(self) -> list[str]:
        """Names of parameters in encoder layers at index >= ``freeze_below``."""
        keep = []
        for name in self.tensors:
            if name.startswith("layer"):
                idx = int(name.split(".", 1)[0][len("layer") :])
                if idx >= self.cfg.freeze_below:
                    keep.append(name)
        return keep

    def trainable(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.trainable_names()]

    def frozen_names(self) -> list[str]:
        live = set(self.trainable_names())
        return [n for n in self.tensors if n not in live]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.cfg, {k: Tensor(t.data.copy()) for k, t in self.tensors.items()})


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> BackboneParams:
    rng = make_rng(seed)
    p: dict[str, Tensor] = {}
    affine_params(p, "patch_embed", cfg.token_inputs, cfg.channels, rng)
    for i in range(cfg.num_layers):
        encoder_params(p, f"layer{i}", cfg.channels, cfg.ffn_dim, rng, cfg.residual_gain)
    return BackboneParams(cfg, p)


def image_grid(image: np.ndarray, patch_size: int) -> PatchGrid:
    h, w = image.shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {w}x{h} not divisible by patch size {patch_size}")
    return PatchGrid(w // patch_size, h // patch_size, w, h)


def patch_inputs(image: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(M, samples^2 * channels) context-window samples in row-major patch order.

    Values are centred on 0.5; borders are handled by reflection.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    grid = image_grid(img, cfg.patch_size)
    centers = grid.centers() - 0.5  # pixel-centre convention -> array index
    k = cfg.context_samples
    offs = (np.arange(k) + 0.5) / k * cfg.context_window - 0.5 * cfg.context_window
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    ys = (centers[:, 1:2] + oy.ravel()[None, :]).ravel()
    xs = (centers[:, 0:1] + ox.ravel()[None, :]).ravel()
    cols = []
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        if cfg.blur_sigma > 0:
            plane = ndimage.gaussian_filter(plane, cfg.blur_sigma, mode="reflect")
        cols.append(ndimage.map_coordinates(plane, [ys, xs], order=1, mode="reflect").reshape(len(centers), k * k))
    return np.stack(cols, axis=2).reshape(len(centers), -1) - 0.5


def backbone_activations(image: np.ndarray, params: BackboneParams) -> Tensor:
    """Un-normalised (M, C) token outputs."""
    cfg = params.cfg
    img = np.asarray(image, dtype=np.float64)
    channels = 1 if img.ndim == 2 else img.shape[2]
    if channels != cfg.in_channels:
        raise ValueError(f"image has {channels} channels, backbone expects {cfg.in_channels}")
    x = affine(Tensor(patch_inputs(img, cfg)), params.tensors, "patch_embed")
    for i in range(cfg.num_layers):
        x = encoder_layer(x, params.tensors, f"layer{i}", cfg.num_heads)
    return x


def extract_features(image: np.ndarray, params: BackboneParams, id: str = "") -> FeatureMap:
    """Differentiable local features; ``activations`` keeps the GeM input."""
    act = backbone_activations(image, params)
    return FeatureMap(image_grid(image, params.cfg.patch_size), dc.l2_normalize(act), id, act)


def gem_pool(f, p: float = 3.0):
    """GeM over patches, then L2 normalisation.

    ``f`` is a FeatureMap (its un-normalised ``activations`` are used when
    present), a Tensor or an array of shape (M, C).  Activations are floored at
    1e-6 before the power.
    """
    if p < 1:
        raise ValueError("GeM exponent must be >= 1")
    x = getattr(f, "activations", None)
    if x is None:
        x = f.features if isinstance(f, FeatureMap) else f
    if isinstance(x, Tensor):
        pooled = dc.power(dc.mean(dc.power(dc.clamp_min(x, GEM_FLOOR), p), axis=0), 1.0 / p)
        return dc.l2_normalize(pooled)
    x = np.asarray(x, dtype=np.float64)
    pooled = np.mean(np.maximum(x, GEM_FLOOR) ** p, axis=0) ** (1.0 / p)
    return pooled / np.linalg.norm(pooled)


def describe(image: np.ndarray, params: BackboneParams, id: str = "") -> tuple[FeatureMap, np.ndarray]:
    """Inference: detached FeatureMap (with activations) and global descriptor."""
    with dc.no_grad():
        act = backbone_activations(image, params).data
    grid = image_grid(image, params.cfg.patch_size)
    fmap = FeatureMap.normalized(grid, act, id)
    fmap.activations = act
    return fmap, gem_pool(act, params.cfg.gem_p)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_feature_map(fmap: FeatureMap, path) -> None:
    g = fmap.grid
    write_fmap(path, g.grid_w, g.grid_h, g.image_w, g.image_h, fmap.values)


def load_feature_map(path, id: str | None = None) -> FeatureMap:
    raw = read_fmap(path)
    grid = PatchGrid(raw.grid_w, raw.grid_h, raw.image_w, raw.image_h)
    norms = np.sqrt((raw.features**2).sum(axis=1))
    if np.any(norms == 0.0):
        raise FormatError(f"{path}: feature map has an all-zero row")
    return FeatureMap.normalized(grid, raw.features, id if id is not None else str(path))


def save_backbone(params: BackboneParams, path) -> None:
    write_weights(path, params.arrays(), {"kind": "backbone", **params.cfg.to_dict()})


def load_backbone(path) -> BackboneParams:
    tensors, cfg_dict = read_weights(path)
    if cfg_dict is None or cfg_dict.get("kind") != "backbone":
        raise FormatError(f"{path}: missing or wrong config sidecar for a backbone")
    cfg = BackboneConfig(**{k: v for k, v in cfg_dict.items() if k != "kind"})
    want = {k: t.shape for k, t in init_backbone(cfg, 0).tensors.items()}
    if set(want) != set(tensors):
        raise DimensionError(f"{path}: tensor names disagree with backbone config")
    for name, shape in want.items():
        if tensors[name].shape != shape:
            raise DimensionError(f"{path}: {name} shape {tensors[name].shape} != {shape}")
    return BackboneParams(cfg, {k: Tensor(tensors[k]) for k in want})
