"""Command-line entry point: ``dhe-rerank <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.  Every
run writes its resolved configuration (defaults merged with ``--config`` and
flags) to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .backbone import BackboneConfig, init_backbone, load_backbone, save_backbone, save_feature_map
from .bench import BenchConfig, bench_verifiers, write_report
from .dhenet import DHEConfig, init_params, load_params, save_params
from .formats import FormatError, write_jsonl
from .pipeline import (
    DEFAULT_TOPK,
    DataError,
    GroundTruthRule,
    VERIFIERS,
    VerifierConfig,
    build_index,
    load_manifest,
    load_view,
    read_results,
    recall_at_n,
    run_queries,
    write_results,
)
from .synth import SynthConfig, synth_dataset, write_dataset
from .training import STAGES, LossConfig, TrainConfig, TrainingSet, train_stage

log = logging.getLogger("dhe_rerank")

SUBCOMMANDS = ("synth", "extract", "index", "retrieve", "rerank", "train", "eval", "bench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _recall_list(text: str) -> list[int]:
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad recall list {text!r}") from exc
    if not ns or any(n < 1 for n in ns):
        raise argparse.ArgumentTypeError("recall values must be positive integers")
    return ns


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dhe-rerank", description="Two-stage place recognition with learned homography re-ranking.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys override defaults")
        sp.add_argument("--seed", type=int, help="global seed (u64)")
        sp.add_argument("--out", help="output path")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data(sp, needs_manifest=True):
        sp.add_argument("--manifest", required=needs_manifest, help="JSONL manifest")
        sp.add_argument("--backbone", help="backbone weights (DHEW); random init when omitted")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp)

    sp = sub.add_parser("extract", help="write FMAP feature maps for every manifest entry")
    common(sp)
    data(sp)

    sp = sub.add_parser("index", help="build the global descriptor index")
    common(sp)
    data(sp)

    for name in ("retrieve", "rerank"):
        sp = sub.add_parser(name, help=f"{name} candidates for every query")
        common(sp)
        data(sp)
        sp.add_argument("--topk", type=int, default=None, help=f"candidates per query (default {DEFAULT_TOPK})")
        sp.add_argument("--workers", type=int, default=None)
        if name == "rerank":
            sp.add_argument("--verifier", choices=VERIFIERS, default=None)
            sp.add_argument("--dhe", help="DHE weights (DHEW); identity init when omitted")

    sp = sub.add_parser("train", help="run one training stage")
    common(sp)
    data(sp)
    sp.add_argument("--stage", choices=STAGES, required=True)
    sp.add_argument("--dhe", help="DHE weights to resume from")

    sp = sub.add_parser("eval", help="Recall@N of a results file")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--results", required=True)
    sp.add_argument("--recall", type=_recall_list, default=None, help="comma list, e.g. 1,5,10")
    sp.add_argument("--gt-mode", choices=("geo", "frame", "place"), default=None)

    sp = sub.add_parser("bench", help="DHE vs RANSAC verification latency")
    common(sp)
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

DEFAULTS = {
    "synth": {"synth": asdict(SynthConfig()), "out": "synth_data"},
    "extract": {"backbone": None, "out": "features"},
    "index": {"backbone": None, "out": "index.npz"},
    "retrieve": {"backbone": None, "topk": DEFAULT_TOPK, "workers": 1, "out": "retrieve.jsonl"},
    "rerank": {
        "backbone": None,
        "dhe": None,
        "topk": DEFAULT_TOPK,
        "verifier": "dhe",
        "workers": 1,
        "theta_infer": None,
        "ransac_iterations": 500,
        "out": "rerank.jsonl",
    },
    "train": {
        "backbone": None,
        "dhe": None,
        "train": asdict(TrainConfig()),
        "loss": asdict(LossConfig()),
        "backbone_config": asdict(BackboneConfig()),
        "dhe_model_dim": 64,
        "out": "train_out",
    },
    "eval": {"recall": [1, 5, 10], "gt_mode": "geo", "out": None},
    "bench": {"bench": asdict(BenchConfig()), "out": "bench.json"},
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    cfg["seed"] = 0
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise DataError("config file must hold a JSON object")
        cfg = _merge(cfg, loaded)
    for key in ("seed", "out", "manifest", "backbone", "dhe", "topk", "workers", "verifier", "recall", "stage", "results"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "gt_mode", None) is not None:
        cfg["gt_mode"] = args.gt_mode
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    if "topk" in cfg and cfg["topk"] < 1:
        raise UsageError("--topk must be >= 1")
    return cfg


def _dataclass_from(cls, values: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{**values, **extra})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _backbone(cfg: dict):
    if cfg.get("backbone"):
        return load_backbone(cfg["backbone"])
    return init_backbone(_dataclass_from(BackboneConfig, cfg.get("backbone_config", {})), cfg["seed"])


def _views(records, base, backbone):
    return {r.id: load_view(r, base, backbone) for r in records}


def cmd_synth(cfg: dict) -> int:
    scfg = _dataclass_from(SynthConfig, {**cfg["synth"], "seed": cfg["seed"]})
    manifest = write_dataset(synth_dataset(scfg), cfg["out"])
    print(manifest)
    return 0


def cmd_extract(cfg: dict) -> int:
    records, base = load_manifest(cfg["manifest"])
    backbone = _backbone(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in records:
        fmap, _ = load_view(r, base, backbone)
        save_feature_map(fmap, out / f"{r.id}.fmap")
        rows.append({**{k: v for k, v in asdict(r).items() if v is not None}, "path": f"{r.id}.fmap"})
    write_jsonl(out / "manifest.jsonl", rows)
    print(out / "manifest.jsonl")
    return 0


def cmd_index(cfg: dict) -> int:
    records, base = load_manifest(cfg["manifest"])
    index = build_index(records, _backbone(cfg), base)
    index.save(cfg["out"])
    print(f"indexed {len(index)} references -> {cfg['out']}")
    return 0


def _run(cfg: dict, verifier: str) -> int:
    records, base = load_manifest(cfg["manifest"])
    backbone = _backbone(cfg)
    views = _views(records, base, backbone)
    index = build_index(records, backbone, base, views)
    dhe = None
    if verifier == "dhe":
        if cfg.get("dhe"):
            dhe = load_params(cfg["dhe"])
        else:
            grid = next(iter(views.values()))[0].grid
            log.warning("no --dhe weights given; using identity-initialised parameters")
            dhe = init_params(DHEConfig(m_tokens=grid.num_patches), cfg["seed"])
    vcfg = VerifierConfig(verifier, cfg.get("theta_infer"), cfg.get("ransac_iterations", 500), cfg["seed"])
    queries = [views[r.id] for r in records if r.split == "query"]
    results = run_queries(queries, index, vcfg, dhe, cfg["topk"], cfg["workers"])
    write_results(cfg["out"], results)
    print(f"{len(results)} queries -> {cfg['out']}")
    return 0


def cmd_retrieve(cfg: dict) -> int:
    return _run(cfg, "none")


def cmd_rerank(cfg: dict) -> int:
    return _run(cfg, cfg["verifier"])


def cmd_train(cfg: dict) -> int:
    records, base = load_manifest(cfg["manifest"])
    from .formats import read_raster

    images, place_of = {}, {}
    for r in records:
        if r.place_id is None:
            raise DataError(f"{r.id}: training needs place_id labels")
        path = Path(r.path) if Path(r.path).is_absolute() else base / r.path
        try:
            images[r.id] = read_raster(path)
        except (OSError, FormatError) as exc:
            raise DataError(f"{r.id}: {exc}") from exc
        place_of[r.id] = r.place_id
    data = TrainingSet(images, place_of)
    backbone = _backbone(cfg)
    stage = cfg["stage"]
    dhe = None
    if cfg.get("dhe"):
        dhe = load_params(cfg["dhe"])
    elif stage in ("dhe", "joint"):
        h, w = next(iter(images.values())).shape[:2]
        m = (h // backbone.cfg.patch_size) * (w // backbone.cfg.patch_size)
        dhe = init_params(DHEConfig(m_tokens=m, model_dim=cfg["dhe_model_dim"]), cfg["seed"])
    tcfg = _dataclass_from(TrainConfig, {**cfg["train"], "seed": cfg["seed"]})
    lcfg = _dataclass_from(LossConfig, cfg["loss"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = train_stage(stage, data, backbone, dhe, tcfg, lcfg, log_path=out / "metrics.jsonl")
    save_backbone(result.backbone, out / "backbone.dhew")
    if result.dhe is not None:
        save_params(result.dhe, out / "dhe.dhew")
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps(last, sort_keys=True))
    return 0


def cmd_eval(cfg: dict) -> int:
    records, _ = load_manifest(cfg["manifest"])
    try:
        results = read_results(cfg["results"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read results {cfg['results']}: {exc}") from exc
    rule = GroundTruthRule(mode=cfg["gt_mode"])
    report = recall_at_n(results, rule, cfg["recall"], {r.id: r for r in records})
    for line in report.lines():
        print(line)
    if report.excluded:
        print(f"excluded queries (no valid positive): {report.excluded}")
    if cfg.get("out"):
        Path(cfg["out"]).write_text(
            json.dumps({"recall": report.recall, "evaluated": report.evaluated, "excluded": report.excluded})
        )
    return 0


def cmd_bench(cfg: dict) -> int:
    bcfg_dict = {**cfg["bench"], "seed": cfg["seed"]}
    bcfg_dict["grids"] = tuple(bcfg_dict["grids"])
    report = bench_verifiers(_dataclass_from(BenchConfig, bcfg_dict))
    write_report(report, cfg["out"])
    print(report.table())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "rerank": cmd_rerank,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        cfg = resolve_config(args)
        print("config: " + json.dumps({"command": args.command, **cfg}, sort_keys=True), file=sys.stderr)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
