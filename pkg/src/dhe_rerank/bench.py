"""Per-query latency of DHE versus RANSAC verification.

Both verifiers see identical mutual-NN match sets.  Timing uses a monotonic
clock, and each measured loop is preceded by untimed warm-up calls.
"""

from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import BackboneConfig, describe, init_backbone
from .dhenet import DHEConfig, DHEParams, homography_from_similarity, init_params
from .geometry import classify_inliers
from .matching import mutual_nn, similarity_map
from .pipeline import DHE_THETA_FACTOR, RANSAC_THETA_FACTOR
from .ransac import RansacConfig, RansacError, pair_seed, ransac_homography
from .synth import SynthConfig, synth_dataset
from .diffcore import SingularSystemError

REFERENCE_EXTRACTION_S = 0.006
REFERENCE_MATCHING_S = 0.098
TIMING_KEYS = ("extraction_s", "matching_s", "total_s", "machine")


@dataclass(frozen=True)
class BenchConfig:
    workloads: int = 100
    warmup: int = 10
    ransac_iterations: int = 500
    patch_size: int = 8
    grids: tuple[int, ...] = (24, 12)  # grid side; 24 -> M = 576
    seed: int = 0


@dataclass
class MethodTiming:
    method: str
    grid: int
    extraction_s: float
    matching_s: float
    total_s: float
    inlier_counts: list[int] = field(default_factory=list)


@dataclass
class BenchReport:
    machine: str
    workloads: int
    rows: list[MethodTiming]

    def to_json(self) -> dict:
        return {"machine": self.machine, "workloads": self.workloads, "rows": [asdict(r) for r in self.rows]}

    def table(self) -> str:
        head = f"{'Method':<10}{'M':>6}{'Extraction (s)':>17}{'Matching (s)':>15}{'Total (s)':>12}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.method:<10}{r.grid * r.grid:>6}{r.extraction_s:>17.4f}{r.matching_s:>15.4f}{r.total_s:>12.4f}"
            )
        lines.append("-" * len(head))
        lines.append(f"machine: {self.machine}")
        lines.append(
            f"reference (non-binding): published DHE pipeline {REFERENCE_EXTRACTION_S:.3f} s extraction, "
            f"{REFERENCE_MATCHING_S:.3f} s matching per query on a GPU"
        )
        return "\n".join(lines)


def machine_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} / python {platform.python_version()} / numpy {np.__version__}"


def _workloads(grid: int, cfg: BenchConfig):
    size = grid * cfg.patch_size
    n_places = cfg.workloads + cfg.warmup
    ds = synth_dataset(SynthConfig(num_places=n_places, views_per_place=2, image_size=size, seed=cfg.seed))
    by_place: dict[str, list] = {}
    for v in ds.views:
        by_place.setdefault(v.place_id, []).append(v)
    return [tuple(by_place[p]) for p in sorted(by_place)]


def _timed(fn, items, warmup: int):
    for it in items[:warmup]:
        fn(it)
    out = []
    t0 = time.monotonic()
    for it in items[warmup:]:
        out.append(fn(it))
    return out, (time.monotonic() - t0) / max(1, len(items) - warmup)


def bench_verifiers(cfg: BenchConfig = BenchConfig(), dhe_by_grid: dict[int, DHEParams] | None = None) -> BenchReport:
    """Time extraction and verification for both methods at every grid size.

    Untrained DHE weights are used for grids without supplied parameters; the
    cost of a forward pass does not depend on the weight values.
    """
    rows: list[MethodTiming] = []
    backbone = init_backbone(BackboneConfig(patch_size=cfg.patch_size), cfg.seed)
    for grid in cfg.grids:
        pairs = _workloads(grid, cfg)
        dhe = (dhe_by_grid or {}).get(grid) or init_params(DHEConfig(m_tokens=grid * grid), cfg.seed)

        def extract(pair):
            return describe(pair[0].image, backbone, pair[0].id)[0], describe(pair[1].image, backbone, pair[1].id)[0]

        feats, t_extract = _timed(extract, pairs, cfg.warmup)
        feats = [extract(p) for p in pairs[: cfg.warmup]] + feats
        t_extract /= 2.0  # two images per workload; report per image

        def run_dhe(fp):
            fq, fc = fp
            s = similarity_map(fq, fc)
            m = mutual_nn(s)
            try:
                H = homography_from_similarity(s, dhe, fq.grid)
            except SingularSystemError:
                return 0
            return classify_inliers(H, m, fq.grid, DHE_THETA_FACTOR * fq.grid.patch_size).count

        def run_ransac(fp):
            fq, fc = fp
            m = mutual_nn(similarity_map(fq, fc))
            rcfg = RansacConfig(
                iterations=cfg.ransac_iterations,
                theta=RANSAC_THETA_FACTOR * fq.grid.patch_size,
                seed=pair_seed(cfg.seed, fq.id, fc.id),
            )
            try:
                return ransac_homography(m, fq.grid, rcfg)[1].count
            except RansacError:
                return 0

        for name, fn in (("DHE", run_dhe), ("RANSAC", run_ransac)):
            counts, t_match = _timed(fn, feats, cfg.warmup)
            rows.append(MethodTiming(name, grid, t_extract, t_match, t_extract + t_match, [int(c) for c in counts]))
    return BenchReport(machine_descriptor(), cfg.workloads, rows)


def strip_timing(report: dict) -> dict:
    """Report content with every timing and machine field removed."""
    out = {k: v for k, v in report.items() if k not in TIMING_KEYS}
    out["rows"] = [{k: v for k, v in r.items() if k not in TIMING_KEYS} for r in report.get("rows", [])]
    return out


def write_report(report: BenchReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
