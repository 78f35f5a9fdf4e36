"""Homogeneous-coordinate algebra, 4-point DLT, re-projection error, inliers.

Image coordinates: origin at the top-left corner, ``u`` to the right, ``v``
downwards, in pixels.  Patches of a W x H feature grid are indexed row-major
and represented by their centre point.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import SingularSystemError, Tensor

H33_EPS = 1e-9
DEGENERATE_AREA_FRACTION = 1e-6
SQRT2 = float(np.sqrt(2.0))


class PointAtInfinity(ArithmeticError):
    """The homogeneous point has (numerically) zero last coordinate."""


class DegenerateConfigurationError(SingularSystemError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    grid_w: int
    grid_h: int
    image_w: int
    image_h: int

    def __post_init__(self):
        if min(self.grid_w, self.grid_h, self.image_w, self.image_h) <= 0:
            raise ValueError(f"grid and image sizes must be positive: {self}")

    @property
    def num_patches(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def patch_w(self) -> float:
        return self.image_w / self.grid_w

    @property
    def patch_h(self) -> float:
        return self.image_h / self.grid_h

    @property
    def patch_size(self) -> float:
        """Unit for inlier thresholds (the larger patch side)."""
        return max(self.patch_w, self.patch_h)

    def centers(self) -> np.ndarray:
        """(M, 2) array of patch centres in row-major order."""
        idx = np.arange(self.num_patches)
        cols, rows = idx % self.grid_w, idx // self.grid_w
        return np.stack([(cols + 0.5) * self.patch_w, (rows + 0.5) * self.patch_h], axis=1)

    def corners(self) -> np.ndarray:
        """Canonical image corners (0,0), (W,0), (0,H), (W,H)."""
        w, h = float(self.image_w), float(self.image_h)
        return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])


def patch_center(index: int, grid: PatchGrid) -> tuple[float, float]:
    if not 0 <= index < grid.num_patches:
        raise IndexError(f"patch index {index} outside [0, {grid.num_patches})")
    col, row = index % grid.grid_w, index // grid.grid_w
    return ((col + 0.5) * grid.patch_w, (row + 0.5) * grid.patch_h)


def from_homogeneous(p: Sequence[float]) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if abs(z) <= H33_EPS:
        raise PointAtInfinity(f"homogeneous point ({x}, {y}, {z}) lies at infinity")
    return (x / z, y / z)


@dataclass
class Homography:
    """3x3 projective map, stored with h33 = 1 unless ``at_infinity_form``."""

    h: np.ndarray
    at_infinity_form: bool = False

    @classmethod
    def from_raw(cls, raw) -> "Homography":
        raw = np.asarray(raw, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(raw)):
            raise SingularSystemError("homography has non-finite entries")
        if abs(raw[2, 2]) > H33_EPS:
            return cls(raw / raw[2, 2])
        fro = np.linalg.norm(raw)
        if fro == 0.0:
            raise SingularSystemError("zero matrix is not a homography")
        return cls(raw / fro, at_infinity_form=True)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, du: float, dv: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, du], [0.0, 1.0, dv], [0.0, 0.0, 1.0]]))

    def __array__(self, dtype=None, copy=None):
        return self.h if dtype is None else self.h.astype(dtype)


def _matrix(H) -> np.ndarray:
    if isinstance(H, Homography):
        return H.h
    if isinstance(H, Tensor):
        return H.data
    return np.asarray(H, dtype=np.float64)


def apply_homography(H, p: Sequence[float]) -> tuple[float, float]:
    m = _matrix(H)
    u, v = float(p[0]), float(p[1])
    return from_homogeneous(m @ np.array([u, v, 1.0]))


def project_points(H, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map (n, 2) points; returns (projected (n, 2), finite mask (n,))."""
    m = _matrix(H)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ m[:, :2].T + m[:, 2]
    ok = np.abs(hom[:, 2]) > H33_EPS
    z = np.where(ok, hom[:, 2], 1.0)
    return hom[:, :2] / z[:, None], ok


def reprojection_error(H, pq: Sequence[float], pc: Sequence[float]) -> float:
    try:
        u, v = apply_homography(H, pq)
    except PointAtInfinity:
        return float("inf")
    return float(np.hypot(float(pc[0]) - u, float(pc[1]) - v))


def reprojection_errors(H, pq: np.ndarray, pc: np.ndarray) -> np.ndarray:
    """Vectorised re-projection error; +inf where the projection is at infinity."""
    proj, ok = project_points(H, pq)
    err = np.sqrt(((np.asarray(pc, dtype=np.float64).reshape(-1, 2) - proj) ** 2).sum(axis=1))
    return np.where(ok, err, np.inf)


def reprojection_errors_t(H: Tensor, pq: np.ndarray, pc: np.ndarray) -> Tensor:
    """Differentiable re-projection errors w.r.t. a 3x3 homography tensor."""
    pq = np.asarray(pq, dtype=np.float64).reshape(-1, 2)
    pts = dc.Tensor(np.concatenate([pq, np.ones((len(pq), 1))], axis=1))
    hom = pts @ dc.transpose(H)
    proj = hom[:, :2] / hom[:, 2:3]
    return dc.norm(proj - dc.Tensor(np.asarray(pc, dtype=np.float64).reshape(-1, 2)), axis=-1)


def is_degenerate_sample(points, grid: PatchGrid | None = None) -> bool:
    """True iff some 3 of the 4 points span a triangle of near-zero area.

    The area floor is ``1e-6 * patch_w * patch_h`` (1 px^2 units without a grid).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] != 4:
        raise ValueError(f"expected 4 points, got {pts.shape[0]}")
    unit = grid.patch_w * grid.patch_h if grid is not None else 1.0
    floor = DEGENERATE_AREA_FRACTION * unit
    for a, b, c in itertools.combinations(range(4), 3):
        d1, d2 = pts[b] - pts[a], pts[c] - pts[a]
        if 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0]) < floor:
            return True
    return False


# ---------------------------------------------------------------------------
# 4-point DLT (h33 = 1 parametrisation, Hartley-normalised)
# ---------------------------------------------------------------------------


def _hartley_np(pts: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    c = pts.mean(axis=0)
    d = pts - c
    md = np.sqrt((d * d).sum(axis=1)).mean()
    if md <= 0.0:
        raise DegenerateConfigurationError("all points coincide")
    s = SQRT2 / md
    return d * s, s, c


def _system_np(q: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, y = q[:, 0], q[:, 1]
    xp, yp = c[:, 0], c[:, 1]
    one, zero = np.ones(4), np.zeros(4)
    r1 = np.stack([x, y, one, zero, zero, zero, -x * xp, -y * xp], axis=1)
    r2 = np.stack([zero, zero, zero, x, y, one, -x * yp, -y * yp], axis=1)
    A = np.stack([r1, r2], axis=1).reshape(8, 8)
    b = np.stack([xp, yp], axis=1).reshape(8)
    return A, b


def _compose(hn: np.ndarray, sq: float, cq: np.ndarray, sc: float, cc: np.ndarray) -> np.ndarray:
    tq = np.array([[sq, 0.0, -sq * cq[0]], [0.0, sq, -sq * cq[1]], [0.0, 0.0, 1.0]])
    tc_inv = np.array([[1.0 / sc, 0.0, cc[0]], [0.0, 1.0 / sc, cc[1]], [0.0, 0.0, 1.0]])
    return tc_inv @ hn @ tq


def _dlt_numpy(pq: np.ndarray, pc: np.ndarray, ridge: float) -> Homography:
    qn, sq, cq = _hartley_np(pq)
    cn, sc, cc = _hartley_np(pc)
    A, b = _system_np(qn, cn)
    if ridge:
        A = A + ridge * np.eye(8)
    h = dc.solve(A, b).data
    return Homography.from_raw(_compose(np.append(h, 1.0).reshape(3, 3), sq, cq, sc, cc))


def _hartley_t(pts: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    c = dc.mean(pts, axis=0)
    d = pts - c
    md = dc.mean(dc.norm(d, axis=-1))
    s = SQRT2 / md
    return d * s, s, c


def _dlt_tensor(pq: Tensor, pc: Tensor, ridge: float) -> Tensor:
    qn, sq, cq = _hartley_t(pq)
    cn, sc, cc = _hartley_t(pc)
    x, y, xp, yp = qn[:, 0], qn[:, 1], cn[:, 0], cn[:, 1]
    one, zero = dc.Tensor(np.ones(4)), dc.Tensor(np.zeros(4))
    r1 = dc.stack([x, y, one, zero, zero, zero, -(x * xp), -(y * xp)], axis=1)
    r2 = dc.stack([zero, zero, zero, x, y, one, -(x * yp), -(y * yp)], axis=1)
    A = dc.stack([r1, r2], axis=1).reshape(8, 8)
    b = dc.stack([xp, yp], axis=1).reshape(8)
    if ridge:
        A = A + dc.Tensor(ridge * np.eye(8))
    h = dc.solve(A, b)
    hn = dc.concat([h, dc.Tensor(np.ones(1))]).reshape(3, 3)

    zero1, one1 = dc.Tensor(0.0), dc.Tensor(1.0)
    tq = dc.stack(
        [sq, zero1, -(sq * cq[0]), zero1, sq, -(sq * cq[1]), zero1, zero1, one1]
    ).reshape(3, 3)
    inv_sc = 1.0 / sc
    tc_inv = dc.stack(
        [inv_sc, zero1, cc[0], zero1, inv_sc, cc[1], zero1, zero1, one1]
    ).reshape(3, 3)
    raw = tc_inv @ hn @ tq
    if abs(raw.data[2, 2]) <= H33_EPS:
        raise SingularSystemError("regressed homography maps the image origin to infinity")
    return raw / raw[2, 2]


def dlt_solve(pq, pc, ridge: float = 0.0):
    """Homography mapping the 4 points ``pq`` onto the 4 points ``pc``.

    With numpy/sequence inputs returns a :class:`Homography`; with tensor
    inputs returns a differentiable 3x3 tensor with h33 = 1.  Raises
    ``SingularSystemError`` (or its subclass ``DegenerateConfigurationError``)
    when the configuration cannot be solved.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if isinstance(pq, Tensor) or isinstance(pc, Tensor):
        pq_t, pc_t = dc.as_tensor(pq), dc.as_tensor(pc)
        if pq_t.shape != (4, 2) or pc_t.shape != (4, 2):
            raise dc.ShapeError(f"dlt_solve needs (4, 2) inputs, got {pq_t.shape}, {pc_t.shape}")
        if ridge == 0.0 and (is_degenerate_sample(pq_t.data) or is_degenerate_sample(pc_t.data)):
            raise DegenerateConfigurationError("three of the four points are collinear")
        return _dlt_tensor(pq_t, pc_t, ridge)
    pq_a = np.asarray(pq, dtype=np.float64).reshape(-1, 2)
    pc_a = np.asarray(pc, dtype=np.float64).reshape(-1, 2)
    if pq_a.shape != (4, 2) or pc_a.shape != (4, 2):
        raise ValueError(f"dlt_solve needs 4 correspondences, got {pq_a.shape}, {pc_a.shape}")
    if ridge == 0.0 and (is_degenerate_sample(pq_a) or is_degenerate_sample(pc_a)):
        raise DegenerateConfigurationError("three of the four points are collinear")
    return _dlt_numpy(pq_a, pc_a, ridge)


# ---------------------------------------------------------------------------
# inlier classification
# ---------------------------------------------------------------------------


@dataclass
class InlierResult:
    count: int
    inlier_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.inlier_pairs = np.asarray(self.inlier_pairs, dtype=np.int64).reshape(-1, 2)
        if self.count != len(self.inlier_pairs):
            raise ValueError("inlier count disagrees with inlier pair list")


def match_points(pairs: np.ndarray, grid: PatchGrid, cand_grid: PatchGrid | None = None):
    """Patch-centre coordinates for the query and candidate sides of ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    cand_grid = cand_grid or grid
    if len(pairs) and (
        pairs[:, 0].min() < 0
        or pairs[:, 0].max() >= grid.num_patches
        or pairs[:, 1].min() < 0
        or pairs[:, 1].max() >= cand_grid.num_patches
    ):
        raise IndexError("match indices outside the patch grid")
    return grid.centers()[pairs[:, 0]], cand_grid.centers()[pairs[:, 1]]


def classify_inliers(H, matches, grid: PatchGrid, theta: float) -> InlierResult:
    """Inliers are matches whose re-projection error is at most ``theta`` px."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return InlierResult(0)
    pq, pc = match_points(pairs, grid)
    err = reprojection_errors(H, pq, pc)
    mask = err <= theta
    return InlierResult(int(mask.sum()), pairs[mask], err)
