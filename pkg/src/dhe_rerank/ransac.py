"""Seeded RANSAC homography fitting over mutual matches.

Used for two things only: counting inliers (the baseline re-ranking score and
the size N of the inlier set supervising the REI loss).  The winning minimal
hypothesis is returned as-is; there is no least-squares refit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import SingularSystemError
from .geometry import (
    Homography,
    InlierResult,
    PatchGrid,
    _dlt_numpy,
    is_degenerate_sample,
    match_points,
    reprojection_errors,
)
from .rng import IndexSampler, derive_seed

MAX_REDRAWS = 10


class RansacError(RuntimeError):
    pass


class InsufficientMatchesError(RansacError):
    pass


class NoHypothesisError(RansacError):
    """Every trial hit a degenerate or unsolvable sample."""


@dataclass
class RansacConfig:
    iterations: int = 500
    theta: float | None = None  # pixels; None -> theta_factor * patch size
    seed: int = 0
    min_matches: int = 4
    theta_factor: float = 1.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.theta is not None and self.theta <= 0:
            raise ValueError("theta must be positive")

    def resolve_theta(self, grid: PatchGrid) -> float:
        return self.theta if self.theta is not None else self.theta_factor * grid.patch_size


def pair_seed(global_seed: int, query_id: str, cand_id: str) -> int:
    return derive_seed(global_seed, query_id, cand_id)


def ransac_homography(matches, grid: PatchGrid, cfg: RansacConfig) -> tuple[Homography, InlierResult]:
    pairs = np.asarray(getattr(matches, "pairs", matches), dtype=np.int64).reshape(-1, 2)
    n = len(pairs)
    if n < max(4, cfg.min_matches):
        raise InsufficientMatchesError(f"{n} matches, need at least {max(4, cfg.min_matches)}")
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    pq, pc = match_points(pairs, grid)
    theta = cfg.resolve_theta(grid)
    sampler = IndexSampler(cfg.seed)

    best: tuple[int, float, int] | None = None
    best_h: Homography | None = None
    best_err: np.ndarray | None = None
    for trial in range(cfg.iterations):
        for _ in range(MAX_REDRAWS):
            idx = sampler.distinct(n, 4)
            if not (is_degenerate_sample(pq[idx], grid) or is_degenerate_sample(pc[idx], grid)):
                break
        else:
            continue
        try:
            H = _dlt_numpy(pq[idx], pc[idx], 0.0)
        except SingularSystemError:
            continue
        err = reprojection_errors(H, pq, pc)
        mask = err <= theta
        count = int(mask.sum())
        mean_err = float(err[mask].mean()) if count else float("inf")
        key = (-count, mean_err, trial)
        if best is None or key < best:
            best, best_h, best_err = key, H, err

    if best_h is None:
        raise NoHypothesisError(f"no solvable sample in {cfg.iterations} trials")
    mask = best_err <= theta
    return best_h, InlierResult(int(mask.sum()), pairs[mask], best_err)
