"""Similarity maps between dense local features and mutual nearest neighbours."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import PatchGrid

NORM_TOL = 1e-5


@dataclass
class FeatureMap:
    """``grid.num_patches`` x C local features, one unit-norm row per patch.

    ``features`` is a numpy array for inference or a ``Tensor`` when the map
    is part of a differentiable graph.
    """

    grid: PatchGrid
    features: np.ndarray | Tensor
    id: str = ""
    activations: np.ndarray | Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        vals = self.values
        if vals.ndim != 2 or vals.shape[0] != self.grid.num_patches:
            raise ValueError(
                f"feature map {self.id!r}: expected ({self.grid.num_patches}, C), got {vals.shape}"
            )
        norms = np.sqrt((vals * vals).sum(axis=1))
        if not np.all(np.abs(norms - 1.0) <= NORM_TOL):
            raise ValueError(f"feature map {self.id!r}: rows are not L2-normalised")

    @classmethod
    def normalized(cls, grid: PatchGrid, raw, id: str = "") -> "FeatureMap":
        raw = np.asarray(raw, dtype=np.float64)
        norms = np.maximum(np.sqrt((raw * raw).sum(axis=1, keepdims=True)), 1e-12)
        return cls(grid, raw / norms, id)

    @property
    def values(self) -> np.ndarray:
        return self.features.data if isinstance(self.features, Tensor) else np.asarray(self.features)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def detach(self) -> "FeatureMap":
        act = self.activations
        if isinstance(act, Tensor):
            act = act.data
        return FeatureMap(self.grid, np.array(self.values), self.id, act)


@dataclass
class SimilarityMap:
    s: np.ndarray | Tensor
    query_id: str = ""
    cand_id: str = ""

    @property
    def values(self) -> np.ndarray:
        return self.s.data if isinstance(self.s, Tensor) else self.s


@dataclass
class MatchSet:
    """Mutual-NN pairs ``(query patch, candidate patch)``, sorted by query index."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(self.pairs[:, 0])) != len(self.pairs) or len(
            np.unique(self.pairs[:, 1])
        ) != len(self.pairs):
            raise ValueError("match set is not one-to-one")

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(x), int(y)) for x, y in self.pairs}


def similarity_map(fq: FeatureMap, fc: FeatureMap, tolerant: bool = False) -> SimilarityMap:
    """Inner products between every query and candidate local feature.

    Grids must match unless ``tolerant`` is set.  Differentiable when either
    feature map holds tensors.
    """
    if fq.channels != fc.channels:
        raise ValueError(f"channel mismatch: {fq.channels} vs {fc.channels}")
    if not tolerant and fq.grid != fc.grid:
        raise ValueError(f"grid mismatch: {fq.grid} vs {fc.grid}")
    if isinstance(fq.features, Tensor) or isinstance(fc.features, Tensor):
        s = dc.matmul(dc.as_tensor(fq.features), dc.transpose(dc.as_tensor(fc.features)))
    else:
        s = np.asarray(fq.features) @ np.asarray(fc.features).T
    return SimilarityMap(s, fq.id, fc.id)


def mutual_nn(s) -> MatchSet:
    """Pairs (x, y) with x the best query for y and y the best candidate for x.

    Ties resolve to the smallest index.
    """
    vals = s.values if isinstance(s, SimilarityMap) else np.asarray(s)
    if vals.size == 0:
        return MatchSet()
    best_c = np.argmax(vals, axis=1)
    best_q = np.argmax(vals, axis=0)
    x = np.nonzero(best_q[best_c] == np.arange(vals.shape[0]))[0]
    return MatchSet(np.stack([x, best_c[x]], axis=1))
