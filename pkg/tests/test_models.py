"""DHE network, toy backbone and GeM pooling."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dhe_rerank import diffcore as dc
from dhe_rerank.backbone import (
    BackboneConfig,
    describe,
    extract_features,
    gem_pool,
    init_backbone,
    load_backbone,
    load_feature_map,
    patch_inputs,
    save_backbone,
    save_feature_map,
)
from dhe_rerank.diffcore import Tensor
from dhe_rerank.dhenet import (
    DHEConfig,
    dhe_forward,
    dhe_homography_t,
    homography_from_similarity,
    init_params,
    load_params,
    regress_4pt,
    save_params,
)
from dhe_rerank.formats import DimensionError, TruncatedError, VersionError, encode_weights
from dhe_rerank.geometry import PatchGrid
from dhe_rerank.matching import FeatureMap

GRID4 = PatchGrid(4, 4, 32, 32)
SMALL_DHE = DHEConfig(m_tokens=16, model_dim=8, num_heads=2)


def rand_fmap(rng, grid=GRID4, c=6, id=""):
    return FeatureMap.normalized(grid, rng.normal(size=(grid.num_patches, c)), id)


# ---------------------------------------------------------------------------
# DHE
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_zero_init_gives_identity(seed):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL_DHE, seed)
    H = dhe_forward(rand_fmap(rng), rand_fmap(rng), params)
    np.testing.assert_allclose(H.h, np.eye(3), atol=1e-12)
    four = regress_4pt(rng.uniform(-1, 1, (16, 16)), params, GRID4)
    np.testing.assert_array_equal(four.pq.data, GRID4.corners())
    np.testing.assert_array_equal(four.pc.data, GRID4.corners())


def test_init_is_seed_deterministic():
    a = encode_weights(init_params(SMALL_DHE, 3).arrays())
    assert a == encode_weights(init_params(SMALL_DHE, 3).arrays())
    assert a != encode_weights(init_params(SMALL_DHE, 4).arrays())


def test_default_config_has_six_layers_with_shortcut():
    cfg = DHEConfig(m_tokens=144)
    assert (cfg.num_layers, cfg.shortcut_from, cfg.shortcut_to, cfg.ffn_dim) == (6, 3, 6, 256)
    names = init_params(cfg).tensors
    assert "layer6.attn.q.weight" in names and "layer7.attn.q.weight" not in names
    assert names["pos_embedding"].shape == (144, 144)
    with pytest.raises(ValueError):
        DHEConfig(m_tokens=4, num_layers=2)


def test_regress_4pt_shape_errors():
    params = init_params(SMALL_DHE)
    with pytest.raises(dc.ShapeError):
        regress_4pt(np.zeros((9, 9)), params, GRID4)
    with pytest.raises(dc.ShapeError):
        regress_4pt(np.zeros((16, 16)), params, PatchGrid(2, 2, 16, 16))


def _perturbed(params, seed=0):
    rng = np.random.default_rng(seed)
    for name, t in params.tensors.items():
        t.data = t.data + rng.normal(0, 0.05, t.shape)
    return params


def test_output_depends_on_similarity_after_training_step():
    rng = np.random.default_rng(4)
    params = init_params(SMALL_DHE, 0)
    s = rng.uniform(-1, 1, (16, 16))
    for p in params.parameters():
        p.requires_grad = True
    w = Tensor(rng.normal(size=(3, 3)))
    opt = dc.Adam(params.parameters(), lr=1e-2)
    # the head moves first; position embeddings need a non-zero head to get gradient
    for _ in range(3):
        opt.zero_grad()
        dc.tsum(dhe_homography_t(s, params, GRID4) * w).backward()
        opt.step()
    a = regress_4pt(s, params, GRID4).pc.data
    b = regress_4pt(s, params, GRID4).pc.data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, GRID4.corners())
    assert not np.allclose(a, regress_4pt(s[:, ::-1], params, GRID4).pc.data)
    assert not np.allclose(a, regress_4pt(s[::-1], params, GRID4).pc.data)


def test_regress_4pt_gradient_wrt_attention_weights():
    rng = np.random.default_rng(6)
    params = _perturbed(init_params(SMALL_DHE, 0))
    s = rng.uniform(-1, 1, (16, 16))
    names = ["layer2.attn.q.weight", "layer5.attn.v.weight", "head.weight"]
    w = rng.normal(size=(4, 2))

    def f(*ts):
        for n, t in zip(names, ts):
            params.tensors[n] = t
        return dc.tsum(regress_4pt(s, params, GRID4).pc * Tensor(w))

    assert dc.grad_check(f, [params.tensors[n] for n in names]) < 1e-4


def test_homography_is_normalised_or_flagged():
    rng = np.random.default_rng(8)
    params = _perturbed(init_params(SMALL_DHE, 1), seed=2)
    for _ in range(5):
        try:
            H = homography_from_similarity(rng.uniform(-1, 1, (16, 16)), params, GRID4)
        except dc.SingularSystemError:
            continue
        assert H.h[2, 2] == 1.0 and np.all(np.isfinite(H.h))


def test_params_round_trip(tmp_path):
    params = init_params(SMALL_DHE, 5).astype(np.float32)
    save_params(params, tmp_path / "d.dhew")
    loaded = load_params(tmp_path / "d.dhew")
    assert loaded.cfg == params.cfg
    for k, t in params.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[k].data, t.data)
    save_params(loaded, tmp_path / "e.dhew")
    assert (tmp_path / "d.dhew").read_bytes() == (tmp_path / "e.dhew").read_bytes()


def test_params_load_errors(tmp_path):
    save_params(init_params(SMALL_DHE, 5), tmp_path / "d.dhew")
    raw = (tmp_path / "d.dhew").read_bytes()
    (tmp_path / "t.dhew").write_bytes(raw[:100])
    (tmp_path / "t.dhew.json").write_text((tmp_path / "d.dhew.json").read_text())
    with pytest.raises(TruncatedError):
        load_params(tmp_path / "t.dhew")
    (tmp_path / "v.dhew").write_bytes(raw[:4] + b"\x02\0\0\0" + raw[8:])
    with pytest.raises(VersionError):
        load_params(tmp_path / "v.dhew")
    (tmp_path / "d.dhew.json").write_text((tmp_path / "d.dhew.json").read_text().replace('"model_dim": 8', '"model_dim": 4'))
    with pytest.raises(DimensionError):
        load_params(tmp_path / "d.dhew")


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

SMALL_BB = BackboneConfig(patch_size=8, channels=8, num_layers=2, num_heads=2, freeze_below=1, context_samples=3)


def test_extract_features_unit_rows_on_grid():
    img = np.random.default_rng(0).uniform(0, 1, (32, 24))
    fmap = extract_features(img, init_backbone(SMALL_BB, 0), "x")
    assert fmap.grid == PatchGrid(3, 4, 24, 32)
    np.testing.assert_allclose(np.linalg.norm(fmap.values, axis=1), 1.0, atol=1e-12)
    assert fmap.activations.shape == (12, 8)


def test_extract_rejects_bad_images():
    params = init_backbone(SMALL_BB, 0)
    with pytest.raises(ValueError):
        extract_features(np.zeros((30, 32)), params)
    with pytest.raises(ValueError):
        extract_features(np.zeros((32, 32, 3)), params)


def test_patch_inputs_layout():
    cfg = BackboneConfig(patch_size=4, context_window=4.0, context_samples=4, blur_sigma=0.0)
    img = np.arange(64, dtype=float).reshape(8, 8) / 64.0
    rows = patch_inputs(img, cfg)
    # window equal to the patch with one sample per pixel reproduces the raw patch
    np.testing.assert_allclose(rows[1] + 0.5, img[0:4, 4:8].ravel(), atol=1e-12)
    assert rows.shape == (4, 16)


def test_freeze_split():
    params = init_backbone(SMALL_BB, 0)
    train = set(params.trainable_names())
    assert train and all(n.startswith("layer1.") for n in train)
    assert "patch_embed.weight" in params.frozen_names()
    assert set(params.frozen_names()) | train == set(params.tensors)


def test_backbone_gradient_reaches_trainable_layer():
    img = np.random.default_rng(1).uniform(0, 1, (16, 16))
    params = init_backbone(SMALL_BB, 0)
    names = ["layer1.ffn.fc2.weight", "layer1.attn.o.weight"]
    w = np.random.default_rng(2).normal(size=8)

    def f(*ts):
        for n, t in zip(names, ts):
            params.tensors[n] = t
        fm = extract_features(img, params)
        return dc.tsum(gem_pool(fm) * Tensor(w)) + dc.tsum(fm.features[0])

    assert dc.grad_check(f, [params.tensors[n] for n in names]) < 1e-4


def test_describe_matches_differentiable_path():
    img = np.random.default_rng(3).uniform(0, 1, (16, 16))
    params = init_backbone(SMALL_BB, 0)
    fmap, desc = describe(img, params, "a")
    live = extract_features(img, params)
    np.testing.assert_allclose(fmap.values, live.values, atol=1e-12)
    np.testing.assert_allclose(desc, gem_pool(live).data, atol=1e-12)


def test_gem_known_values():
    x = np.array([[1.0, 2.0], [3.0, 2.0]])
    g = gem_pool(x, p=1.0)
    np.testing.assert_allclose(g, np.array([2.0, 2.0]) / np.sqrt(8.0))
    g3 = gem_pool(x, p=3.0)
    raw = np.array([((1 + 27) / 2) ** (1 / 3), 2.0])
    np.testing.assert_allclose(g3, raw / np.linalg.norm(raw))
    with pytest.raises(ValueError):
        gem_pool(x, p=0.5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(0.01, 10.0)), st.floats(1.0, 8.0))
def test_gem_between_mean_and_max(x, p):
    raw = np.mean(x**p, axis=0) ** (1.0 / p)
    assert np.all(raw >= x.mean(axis=0) - 1e-9) and np.all(raw <= x.max(axis=0) + 1e-9)
    np.testing.assert_allclose(np.linalg.norm(gem_pool(x, p)), 1.0)
    np.testing.assert_allclose(gem_pool(Tensor(x), p).data, gem_pool(x, p), atol=1e-12)


def test_feature_map_file_round_trip(tmp_path):
    fmap = rand_fmap(np.random.default_rng(2), id="q")
    save_feature_map(fmap, tmp_path / "q.fmap")
    back = load_feature_map(tmp_path / "q.fmap", "q")
    assert back.grid == fmap.grid and back.id == "q"
    np.testing.assert_allclose(back.values, fmap.values, atol=1e-6)


def test_backbone_file_round_trip(tmp_path):
    params = init_backbone(SMALL_BB, 4)
    save_backbone(params, tmp_path / "b.dhew")
    back = load_backbone(tmp_path / "b.dhew")
    assert back.cfg == SMALL_BB
    for k, t in params.tensors.items():
        np.testing.assert_allclose(back.tensors[k].data, t.data, atol=1e-7)


def test_constant_image_gives_identical_rows_and_repeat_is_stable():
    params = init_backbone(SMALL_BB, 0)
    fmap = extract_features(np.full((24, 32), 0.3), params)
    np.testing.assert_allclose(fmap.values, np.broadcast_to(fmap.values[0], fmap.values.shape), atol=1e-12)
    img = np.random.default_rng(9).uniform(0, 1, (24, 32))
    assert extract_features(img, params).values.tobytes() == extract_features(img, params).values.tobytes()
