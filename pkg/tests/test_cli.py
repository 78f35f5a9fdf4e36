"""Command-line behaviour: exit codes, config echo and end-to-end subcommands."""

from __future__ import annotations

import json

import pytest

from dhe_rerank.bench import BenchConfig, bench_verifiers, strip_timing
from dhe_rerank.cli import main

SMALL = {
    "synth": {"num_places": 3, "image_size": 32, "views_per_place": 2},
    "backbone_config": {"channels": 8, "num_layers": 2, "num_heads": 2, "freeze_below": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data"), "--seed", "1"]) == 0
    return root, cfg


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["nope"]) == 1
    assert main(["eval", "--manifest", "m.jsonl"]) == 1  # missing --results
    assert main(["retrieve", "--manifest", "m", "--topk", "0"]) == 1
    assert main(["eval", "--manifest", "m", "--results", "r", "--recall", "0,x"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors_exit_two(tmp_path, capsys):
    assert main(["index", "--manifest", str(tmp_path / "missing.jsonl")]) == 2
    (tmp_path / "m.jsonl").write_text('{"id": "a", "split": "reference", "path": "gone.pgm"}\n')
    assert main(["index", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "i.npz")]) == 2
    (tmp_path / "bad.fmap").write_bytes(b"XXXX" + bytes(40))
    (tmp_path / "m.jsonl").write_text('{"id": "a", "split": "reference", "path": "bad.fmap"}\n')
    assert main(["index", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "i.npz")]) == 2
    assert "data error" in capsys.readouterr().err


def test_config_is_echoed_with_overrides(workspace, capsys):
    root, cfg = workspace
    main(["index", "--config", str(cfg), "--manifest", str(root / "data" / "manifest.jsonl"),
          "--out", str(root / "i.npz"), "--seed", "7"])
    err = capsys.readouterr().err
    line = next(l for l in err.splitlines() if l.startswith("config: "))
    echoed = json.loads(line[len("config: "):])
    assert echoed["seed"] == 7 and echoed["command"] == "index"
    assert echoed["backbone_config"]["channels"] == 8


def test_rerank_none_equals_retrieve(workspace):
    root, cfg = workspace
    m = str(root / "data" / "manifest.jsonl")
    assert main(["retrieve", "--config", str(cfg), "--manifest", m, "--out", str(root / "a.jsonl")]) == 0
    assert main(["rerank", "--config", str(cfg), "--manifest", m, "--verifier", "none",
                 "--out", str(root / "b.jsonl")]) == 0
    a = [json.loads(l) for l in (root / "a.jsonl").read_text().splitlines()]
    b = [json.loads(l) for l in (root / "b.jsonl").read_text().splitlines()]
    assert [r["ranked"] for r in a] == [r["ranked"] for r in b]


def test_rerank_workers_do_not_change_output(workspace):
    root, cfg = workspace
    m = str(root / "data" / "manifest.jsonl")
    for w in ("1", "3"):
        assert main(["rerank", "--config", str(cfg), "--manifest", m, "--verifier", "ransac",
                     "--workers", w, "--out", str(root / f"w{w}.jsonl")]) == 0
    assert (root / "w1.jsonl").read_bytes() == (root / "w3.jsonl").read_bytes()


def test_eval_prints_recall(workspace, tmp_path, capsys):
    root, _ = workspace
    results = [{"query_id": "p0000_v0", "ranked": [{"ref_id": "p0000_v1", "stage1_dist": 0.1, "inliers": None, "rank": 1}],
                "verifier": "none"}]
    (tmp_path / "r.jsonl").write_text(json.dumps(results[0]) + "\n")
    code = main(["eval", "--manifest", str(root / "data" / "manifest.jsonl"), "--results", str(tmp_path / "r.jsonl"),
                 "--recall", "1,5", "--gt-mode", "place"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[:2] == ["R@1=100.0", "R@5=100.0"]


def test_extract_writes_fmaps_usable_without_backbone(workspace):
    root, cfg = workspace
    out = root / "feats"
    assert main(["extract", "--config", str(cfg), "--manifest", str(root / "data" / "manifest.jsonl"),
                 "--out", str(out)]) == 0
    assert len(list(out.glob("*.fmap"))) == 6
    assert main(["index", "--manifest", str(out / "manifest.jsonl"), "--out", str(root / "f.npz")]) == 0


def test_train_stage_writes_weights_and_metrics(workspace):
    root, cfg = workspace
    conf = {**SMALL, "train": {"iterations": 2, "ransac_iterations": 20}, "dhe_model_dim": 8}
    (root / "train.json").write_text(json.dumps(conf))
    out = root / "train_out"
    assert main(["train", "--config", str(root / "train.json"), "--manifest", str(root / "data" / "manifest.jsonl"),
                 "--stage", "dhe", "--out", str(out)]) == 0
    assert (out / "dhe.dhew").exists() and (out / "backbone.dhew").exists()
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
    m = str(root / "data" / "manifest.jsonl")
    assert main(["rerank", "--config", str(cfg), "--manifest", m, "--dhe", str(out / "dhe.dhew"),
                 "--out", str(root / "d.jsonl")]) == 0


def test_bench_is_deterministic_apart_from_timing(tmp_path, capsys):
    cfg = BenchConfig(workloads=3, warmup=1, ransac_iterations=20, grids=(4,))
    a = strip_timing(bench_verifiers(cfg).to_json())
    b = strip_timing(bench_verifiers(cfg).to_json())
    assert a == b
    assert [r["method"] for r in a["rows"]] == ["DHE", "RANSAC"]
    assert all(len(r["inlier_counts"]) == 3 for r in a["rows"])
    (tmp_path / "b.json").write_text(json.dumps({"bench": {"workloads": 2, "warmup": 1, "ransac_iterations": 10,
                                                          "grids": [4]}}))
    assert main(["bench", "--config", str(tmp_path / "b.json"), "--out", str(tmp_path / "r.json")]) == 0
    assert "non-binding" in capsys.readouterr().out
