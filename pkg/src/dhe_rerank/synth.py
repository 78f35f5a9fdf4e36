"""Procedural place dataset with planted homographies.

Every place owns a continuous texture ``f(u, v)`` (random plane waves plus
Gaussian blobs).  A view is the texture seen through a planted homography
``H_view`` (base -> view) obtained by jittering the four image corners, so
the true query -> reference map is ``H_ref @ inv(H_query)`` with no resampling
error.  An aliased place reuses another place's texture with its patch-sized
tiles permuted: same local appearance, different layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .formats import read_jsonl, read_raster, write_jsonl, write_raster
from .geometry import _dlt_numpy
from .rng import derive_seed, make_rng

PLACE_SPACING_M = 100.0


@dataclass(frozen=True)
class SynthConfig:
    num_places: int = 50
    views_per_place: int = 3
    image_size: int = 96
    tile_size: int = 32
    corner_jitter: float = 0.15
    noise_sigma: float = 0.02
    aliasing_pairs: int = 0
    num_waves: int = 6
    num_blobs: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corner_jitter < 0.5:
            raise ValueError("corner_jitter must lie in [0, 0.5)")
        if self.views_per_place < 2:
            raise ValueError("need at least 2 views per place (query + reference)")
        if 2 * self.aliasing_pairs > self.num_places:
            raise ValueError("aliasing_pairs cannot exceed num_places / 2")
        if self.image_size % self.tile_size:
            raise ValueError("image_size must be a multiple of tile_size")


@dataclass
class Texture:
    freqs: np.ndarray  # (K, 2) cycles per pixel
    phases: np.ndarray  # (K,)
    amps: np.ndarray  # (K,)
    blob_xy: np.ndarray  # (B, 2)
    blob_sigma: np.ndarray  # (B,)
    blob_amp: np.ndarray  # (B,)
    tile_perm: np.ndarray | None = None  # permutation of tiles, None = identity
    tile_size: int = 32
    tiles_per_side: int = 12

    def __call__(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.tile_perm is not None:
            u, v = self._permute(u, v)
        phase = np.multiply.outer(u, self.freqs[:, 0]) + np.multiply.outer(v, self.freqs[:, 1])
        val = (self.amps * np.sin(2.0 * np.pi * phase + self.phases)).sum(axis=-1)
        du = np.subtract.outer(u, self.blob_xy[:, 0])
        dv = np.subtract.outer(v, self.blob_xy[:, 1])
        val += (self.blob_amp * np.exp(-(du * du + dv * dv) / (2.0 * self.blob_sigma**2))).sum(axis=-1)
        return 0.5 + val

    def _permute(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n, t = self.tiles_per_side, float(self.tile_size)
        col, row = np.floor(u / t), np.floor(v / t)
        cm, rm = np.mod(col, n).astype(np.int64), np.mod(row, n).astype(np.int64)
        src = self.tile_perm[rm * n + cm]
        su, sv = src % n, src // n
        return u + (su - cm) * t, v + (sv - rm) * t


def random_texture(rng: np.random.Generator, cfg: SynthConfig) -> Texture:
    k, b = cfg.num_waves, cfg.num_blobs
    wavelength = rng.uniform(10.0, 40.0, k)
    angle = rng.uniform(0.0, np.pi, k)
    freqs = np.stack([np.cos(angle), np.sin(angle)], axis=1) / wavelength[:, None]
    amps = rng.uniform(0.5, 1.0, k)
    amps *= 0.25 / amps.sum() * np.sqrt(k)
    size = float(cfg.image_size)
    return Texture(
        freqs=freqs,
        phases=rng.uniform(0.0, 2.0 * np.pi, k),
        amps=amps,
        blob_xy=rng.uniform(-0.25 * size, 1.25 * size, (b, 2)),
        blob_sigma=rng.uniform(3.0, 9.0, b),
        blob_amp=rng.uniform(-0.35, 0.35, b),
        tile_size=cfg.tile_size,
        tiles_per_side=cfg.image_size // cfg.tile_size,
    )


def aliased_texture(rng: np.random.Generator, base: Texture) -> Texture:
    n = base.tiles_per_side
    return replace(base, tile_perm=rng.permutation(n * n))


def jitter_homography(rng: np.random.Generator, size: int, jitter: float) -> np.ndarray:
    """Base -> view map moving each image corner by up to ``jitter * size``."""
    s = float(size)
    corners = np.array([[0.0, 0.0], [s, 0.0], [0.0, s], [s, s]])
    if jitter == 0.0:
        return np.eye(3)
    moved = corners + rng.uniform(-jitter * s, jitter * s, (4, 2))
    return _dlt_numpy(corners, moved, 0.0).h


def render_view(texture: Texture, H_view: np.ndarray, size: int, noise: float, rng) -> np.ndarray:
    centers = np.arange(size) + 0.5
    uu, vv = np.meshgrid(centers, centers)
    pts = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)])
    base = np.linalg.inv(H_view) @ pts
    img = texture(base[0] / base[2], base[1] / base[2]).reshape(size, size)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class SynthView:
    id: str
    place_id: str
    split: str
    H_view: np.ndarray
    image: np.ndarray
    aliased_with: str | None = None


@dataclass
class SynthDataset:
    cfg: SynthConfig
    views: list[SynthView] = field(default_factory=list)

    @property
    def queries(self) -> list[SynthView]:
        return [v for v in self.views if v.split == "query"]

    @property
    def references(self) -> list[SynthView]:
        return [v for v in self.views if v.split == "reference"]

    def by_id(self) -> dict[str, SynthView]:
        return {v.id: v for v in self.views}

    def planted(self, query_id: str, ref_id: str) -> np.ndarray:
        """Query -> reference homography (only meaningful within a place)."""
        views = self.by_id()
        H = views[ref_id].H_view @ np.linalg.inv(views[query_id].H_view)
        return H / H[2, 2]

    def positive_pairs(self, split_filter: str | None = None) -> list[tuple[str, str]]:
        """All ordered same-place view pairs (a, b) with a != b."""
        groups: dict[str, list[SynthView]] = {}
        for v in self.views:
            groups.setdefault(v.place_id, []).append(v)
        out = []
        for members in groups.values():
            for a in members:
                for b in members:
                    if a.id != b.id and (split_filter is None or a.split == split_filter):
                        out.append((a.id, b.id))
        return out


def synth_dataset(cfg: SynthConfig) -> SynthDataset:
    textures: list[Texture] = []
    alias_of: dict[int, int] = {}
    n_plain = cfg.num_places - cfg.aliasing_pairs
    for p in range(n_plain):
        textures.append(random_texture(make_rng(derive_seed(cfg.seed, "texture", p)), cfg))
    for a in range(cfg.aliasing_pairs):
        src = a  # the first `aliasing_pairs` plain places get an aliased twin
        textures.append(aliased_texture(make_rng(derive_seed(cfg.seed, "alias", a)), textures[src]))
        alias_of[n_plain + a] = src

    ds = SynthDataset(cfg)
    for p, tex in enumerate(textures):
        twin = alias_of.get(p)
        if twin is None:
            twin = next((k for k, v in alias_of.items() if v == p), None)
        for k in range(cfg.views_per_place):
            vrng = make_rng(derive_seed(cfg.seed, "view", p, k))
            H = jitter_homography(vrng, cfg.image_size, cfg.corner_jitter)
            img = render_view(tex, H, cfg.image_size, cfg.noise_sigma, vrng)
            ds.views.append(
                SynthView(
                    id=f"p{p:04d}_v{k}",
                    place_id=f"p{p:04d}",
                    split="query" if k == 0 else "reference",
                    H_view=H,
                    image=img,
                    aliased_with=None if twin is None else f"p{twin:04d}",
                )
            )
    return ds


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    """Write PGM rasters, ``manifest.jsonl``, ``pairs.jsonl`` and ``synth.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for v in ds.views:
        rel = f"images/{v.id}.pgm"
        write_raster(out / rel, v.image)
        place_idx = int(v.place_id[1:])
        records.append(
            {
                "id": v.id,
                "split": v.split,
                "path": rel,
                "place_id": v.place_id,
                "easting": place_idx * PLACE_SPACING_M,
                "northing": 0.0,
                "homography": [float(x) for x in v.H_view.ravel()],
            }
        )
    write_jsonl(out / "manifest.jsonl", records)
    pairs = [
        {"query_id": q, "ref_id": r, "H": [float(x) for x in ds.planted(q, r).ravel()]}
        for q, r in ds.positive_pairs("query")
    ]
    write_jsonl(out / "pairs.jsonl", pairs)
    (out / "synth.json").write_text(json.dumps(asdict(ds.cfg), indent=2, sort_keys=True))
    return out / "manifest.jsonl"


def load_dataset(out_dir) -> SynthDataset:
    """Re-read a dataset written by :func:`write_dataset` (images are 8-bit)."""
    out = Path(out_dir)
    cfg = SynthConfig(**json.loads((out / "synth.json").read_text()))
    ds = SynthDataset(cfg)
    for rec in read_jsonl(out / "manifest.jsonl"):
        ds.views.append(
            SynthView(
                id=rec["id"],
                place_id=rec["place_id"],
                split=rec["split"],
                H_view=np.asarray(rec["homography"]).reshape(3, 3),
                image=read_raster(out / rec["path"]),
            )
        )
    return ds
