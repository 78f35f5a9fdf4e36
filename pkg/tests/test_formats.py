"""FMAP, DHEW, raster and JSONL containers."""

from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dhe_rerank.formats import (
    BadMagicError,
    DimensionError,
    FormatError,
    TruncatedError,
    VersionError,
    decode_fmap,
    decode_weights,
    encode_fmap,
    encode_weights,
    read_jsonl,
    read_raster,
    read_weights,
    write_jsonl,
    write_raster,
    write_weights,
)

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


def test_fmap_header_layout():
    buf = encode_fmap(2, 3, 16, 24, np.zeros((6, 4)))
    assert buf[:4] == b"FMAP"
    assert struct.unpack("<6I", buf[4:28]) == (1, 2, 3, 4, 16, 24)
    assert len(buf) == 28 + 6 * 4 * 4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.data())
def test_fmap_round_trip_property(w, h, c, data):
    feats = data.draw(arrays(np.float32, (w * h, c), elements=f32))
    raw = decode_fmap(encode_fmap(w, h, 8 * w, 8 * h, feats))
    assert (raw.grid_w, raw.grid_h, raw.image_w, raw.image_h) == (w, h, 8 * w, 8 * h)
    np.testing.assert_array_equal(raw.features, feats.astype(np.float64))


def test_fmap_rejects_bad_magic():
    buf = bytearray(encode_fmap(1, 1, 8, 8, np.ones((1, 2))))
    buf[:4] = b"PAMF"
    with pytest.raises(BadMagicError):
        decode_fmap(bytes(buf))


def test_fmap_rejects_version():
    buf = bytearray(encode_fmap(1, 1, 8, 8, np.ones((1, 2))))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        decode_fmap(bytes(buf))


def test_fmap_rejects_truncated_header_and_payload():
    buf = encode_fmap(2, 2, 8, 8, np.ones((4, 2)))
    with pytest.raises(TruncatedError):
        decode_fmap(buf[:10])
    with pytest.raises(DimensionError):
        decode_fmap(buf[:-4])


def test_fmap_rejects_dimension_mismatch_and_trailing_bytes():
    buf = bytearray(encode_fmap(2, 2, 8, 8, np.ones((4, 2))))
    buf[16:20] = struct.pack("<I", 3)  # C = 3 no longer matches payload
    with pytest.raises(DimensionError):
        decode_fmap(bytes(buf))
    with pytest.raises(DimensionError):
        decode_fmap(encode_fmap(2, 2, 8, 8, np.ones((4, 2))) + b"\0")


def test_fmap_rejects_nan_payload():
    with pytest.raises(FormatError):
        decode_fmap(encode_fmap(1, 1, 8, 8, np.array([[np.nan, 1.0]])))


def test_errors_report_offset():
    buf = encode_fmap(1, 1, 8, 8, np.ones((1, 1)))
    with pytest.raises(TruncatedError) as info:
        decode_fmap(buf[:6])
    assert info.value.offset == 4


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.integers(1, 3), max_size=3), max_size=4), st.data())
def test_weights_round_trip_property(shapes, data):
    tensors = {k: data.draw(arrays(np.float32, tuple(s), elements=f32)) for k, s in shapes.items()}
    out = decode_weights(encode_weights(tensors))
    assert list(out) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(out[k], tensors[k].astype(np.float64))


def test_weights_corruptions():
    good = encode_weights({"a": np.ones((2, 3)), "b": np.zeros(4)})
    with pytest.raises(BadMagicError):
        decode_weights(b"XXXX" + good[4:])
    with pytest.raises(VersionError):
        decode_weights(good[:4] + struct.pack("<I", 7) + good[8:])
    for cut in (3, 11, 20, len(good) - 1):
        with pytest.raises(TruncatedError):
            decode_weights(good[:cut])
    with pytest.raises(DimensionError):
        decode_weights(good + b"\0\0\0\0")


def test_weights_rejects_duplicate_names_and_bad_rank():
    one = encode_weights({"a": np.ones(1)})
    body = one[12:]
    dup = one[:8] + struct.pack("<I", 2) + body + body
    with pytest.raises(FormatError):
        decode_weights(dup)
    bad_rank = one[:12] + struct.pack("<I", 1) + b"a" + struct.pack("<I", 99)
    with pytest.raises(DimensionError):
        decode_weights(bad_rank)


def test_weights_sidecar(tmp_path):
    p = tmp_path / "w.dhew"
    write_weights(p, {"x": np.ones(2)}, {"kind": "test", "n": 3})
    tensors, cfg = read_weights(p)
    assert cfg == {"kind": "test", "n": 3}
    np.testing.assert_array_equal(tensors["x"], np.ones(2))


def test_raster_round_trip_gray_and_rgb(tmp_path):
    rng = np.random.default_rng(0)
    gray = np.round(rng.uniform(0, 1, (5, 7)) * 255) / 255
    write_raster(tmp_path / "g.pgm", gray)
    np.testing.assert_allclose(read_raster(tmp_path / "g.pgm"), gray, atol=1e-12)
    rgb = np.round(rng.uniform(0, 1, (4, 3, 3)) * 255) / 255
    write_raster(tmp_path / "c.ppm", rgb)
    np.testing.assert_allclose(read_raster(tmp_path / "c.ppm"), rgb, atol=1e-12)


def test_raster_sixteen_bit_and_comments(tmp_path):
    data = np.array([[0, 1000], [65535, 2]], dtype=">u2")
    (tmp_path / "a.pgm").write_bytes(b"P5\n# note\n2 2\n65535\n" + data.tobytes())
    np.testing.assert_allclose(read_raster(tmp_path / "a.pgm"), data.astype(float) / 65535)


def test_raster_rejects_bad_input(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(BadMagicError):
        read_raster(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n2 2\n255\n\0\0")
    with pytest.raises(DimensionError):
        read_raster(tmp_path / "b.pgm")


def test_jsonl_round_trip_and_error(tmp_path):
    write_jsonl(tmp_path / "a.jsonl", [{"id": "x", "v": 1}, {"id": "y"}])
    assert read_jsonl(tmp_path / "a.jsonl") == [{"id": "x", "v": 1}, {"id": "y"}]
    (tmp_path / "b.jsonl").write_text('{"id": 1}\n{oops\n')
    with pytest.raises(FormatError):
        read_jsonl(tmp_path / "b.jsonl")
