"""On-disk formats: FMAP feature maps, DHEW weight files, PGM/PPM rasters, JSONL.

Binary layouts (all integers little-endian u32, all reals little-endian f32):

FMAP  ``b"FMAP" version W H C image_w image_h`` then W*H*C reals, patches in
      row-major order with the channel index varying fastest.
DHEW  ``b"DHEW" version count`` then per tensor: name length, UTF-8 name,
      rank, dims, reals.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FMAP_MAGIC = b"FMAP"
DHEW_MAGIC = b"DHEW"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, path=None):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"truncated while reading {what} (need {n} bytes, {len(self.buf) - self.pos} left)",
                self.pos,
                self.path,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise BadMagicError(f"bad magic {got!r}, expected {expected!r}", 0, self.path)

    def version(self) -> None:
        at = self.pos
        v = self.u32("version")
        if v != FORMAT_VERSION:
            raise VersionError(f"unsupported version {v}, expected {FORMAT_VERSION}", at, self.path)

    def reals(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise DimensionError(
                f"{len(self.buf) - self.pos} trailing bytes after declared payload", self.pos, self.path
            )


# ---------------------------------------------------------------------------
# FMAP
# ---------------------------------------------------------------------------


@dataclass
class RawFeatureMap:
    grid_w: int
    grid_h: int
    image_w: int
    image_h: int
    features: np.ndarray  # (W*H, C)


def encode_fmap(grid_w: int, grid_h: int, image_w: int, image_h: int, features: np.ndarray) -> bytes:
    feats = np.asarray(features, dtype="<f4")
    if feats.ndim != 2 or feats.shape[0] != grid_w * grid_h:
        raise ValueError(f"features shape {feats.shape} does not match a {grid_w}x{grid_h} grid")
    header = FMAP_MAGIC + struct.pack(
        "<6I", FORMAT_VERSION, grid_w, grid_h, feats.shape[1], image_w, image_h
    )
    return header + feats.tobytes(order="C")


def decode_fmap(buf: bytes, path=None) -> RawFeatureMap:
    r = _Reader(buf, path)
    r.magic(FMAP_MAGIC)
    r.version()
    w, h, c = r.u32("W"), r.u32("H"), r.u32("C")
    image_w, image_h = r.u32("image_w"), r.u32("image_h")
    if min(w, h, c, image_w, image_h) == 0:
        raise DimensionError("zero dimension in header", 8, path)
    expected = w * h * c * 4
    remaining = len(buf) - r.pos
    if remaining != expected:
        raise DimensionError(
            f"payload is {remaining} bytes but header declares {w}x{h}x{c} reals ({expected} bytes)",
            r.pos,
            path,
        )
    feats = r.reals(w * h * c, "features").reshape(w * h, c)
    if not np.all(np.isfinite(feats)):
        raise FormatError("non-finite feature values", 28, path)
    return RawFeatureMap(w, h, image_w, image_h, feats)


def write_fmap(path, grid_w, grid_h, image_w, image_h, features) -> None:
    Path(path).write_bytes(encode_fmap(grid_w, grid_h, image_w, image_h, features))


def read_fmap(path) -> RawFeatureMap:
    return decode_fmap(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# DHEW
# ---------------------------------------------------------------------------


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [DHEW_MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_weights(buf: bytes, path=None) -> dict[str, np.ndarray]:
    r = _Reader(buf, path)
    r.magic(DHEW_MAGIC)
    r.version()
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        at = r.pos
        name_len = r.u32(f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8", at + 4, path) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", at, path)
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise DimensionError(f"implausible rank {rank} for {name}", r.pos - 4, path)
        dims = tuple(r.u32(f"dim {k} of {name}") for k in range(rank))
        n = int(np.prod(dims)) if dims else 1
        out[name] = r.reals(n, f"data of {name}").reshape(dims)
    r.finish()
    return out


def write_weights(path, tensors: Mapping[str, np.ndarray], config: Mapping | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_weights(tensors))
    if config is not None:
        config_path(path).write_text(json.dumps(dict(config), indent=2, sort_keys=True))


def read_weights(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    tensors = decode_weights(path.read_bytes(), path)
    cfg_file = config_path(path)
    cfg = json.loads(cfg_file.read_text()) if cfg_file.exists() else None
    return tensors, cfg


def config_path(weights_path) -> Path:
    p = Path(weights_path)
    return p.with_name(p.name + ".json")


# ---------------------------------------------------------------------------
# PGM / PPM (binary P5 / P6)
# ---------------------------------------------------------------------------


def _netpbm_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        if pos >= len(buf):
            raise TruncatedError("truncated netpbm header", pos, path)
        ch = buf[pos : pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos : pos + 1].isspace():
                pos += 1
            try:
                tokens.append(int(buf[start:pos]))
            except ValueError:
                raise FormatError(f"bad header token {buf[start:pos]!r}", start, path) from None
    return tokens, pos + 1  # single whitespace byte before raster


def read_raster(path) -> np.ndarray:
    """Read a binary PGM/PPM as float64 in [0, 1]: (H, W) or (H, W, 3)."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"unsupported raster magic {magic!r} (only P5/P6)", 0, path)
    (width, height, maxval), pos = _netpbm_tokens(buf, 3, path)
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise DimensionError("invalid raster header values", 2, path)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    if len(buf) - pos != expected:
        raise DimensionError(
            f"raster payload is {len(buf) - pos} bytes, header implies {expected}", pos, path
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=pos).astype(np.float64) / maxval
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def write_raster(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: {exc.msg}", None, path) from None
    return out


def write_jsonl(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
