"""Seeded random streams.

All randomness in the package comes from numpy's Philox4x64 counter-based
bit generator.  Hot paths that must be reproducible bit-for-bit across numpy
versions (RANSAC sampling, weight init) draw raw 64-bit words and convert them
with the fixed rules below instead of going through ``Generator`` methods.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (e.g. seed, query, cand)."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def uniform(rng: np.random.Generator, low: float, high: float, shape) -> np.ndarray:
    """Uniform reals from the top 53 bits of raw Philox words."""
    n = int(np.prod(shape))
    raw = rng.bit_generator.random_raw(n)
    unit = (np.asarray(raw, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (low + (high - low) * unit).reshape(shape)


class IndexSampler:
    """Draws distinct indices with rejection-sampled bounded integers."""

    def __init__(self, seed: int):
        self._bits = np.random.Philox(int(seed) & _MASK64)

    def bounded(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        limit = ((1 << 64) // n) * n
        while True:
            r = int(self._bits.random_raw())
            if r < limit:
                return r % n

    def distinct(self, n: int, k: int) -> list[int]:
        """Partial Fisher-Yates: ``k`` distinct indices from ``range(n)``."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.bounded(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
