"""Pre-norm transformer encoder blocks on top of ``diffcore``.

Parameters live in flat ``{name: Tensor}`` dicts so that they serialise
directly into weight files and can be frozen by name prefix.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .rng import uniform


def affine_params(
    params: dict, prefix: str, fan_in: int, fan_out: int, rng, zero: bool = False, gain: float = 1.0
) -> None:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = gain / np.sqrt(fan_in)
        w = uniform(rng, -bound, bound, (fan_in, fan_out))
    params[f"{prefix}.weight"] = Tensor(w)
    params[f"{prefix}.bias"] = Tensor(np.zeros(fan_out))


def norm_params(params: dict, prefix: str, dim: int) -> None:
    params[f"{prefix}.gamma"] = Tensor(np.ones(dim))
    params[f"{prefix}.beta"] = Tensor(np.zeros(dim))


def encoder_params(params: dict, prefix: str, dim: int, ffn_dim: int, rng, residual_gain: float = 1.0) -> None:
    """``residual_gain`` scales the init of the two projections feeding the residual stream."""
    norm_params(params, f"{prefix}.ln1", dim)
    for name in ("q", "k", "v", "o"):
        gain = residual_gain if name == "o" else 1.0
        affine_params(params, f"{prefix}.attn.{name}", dim, dim, rng, gain=gain)
    norm_params(params, f"{prefix}.ln2", dim)
    affine_params(params, f"{prefix}.ffn.fc1", dim, ffn_dim, rng)
    affine_params(params, f"{prefix}.ffn.fc2", ffn_dim, dim, rng, gain=residual_gain)


def affine(x: Tensor, params: dict, prefix: str) -> Tensor:
    return dc.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def layer_norm(x: Tensor, params: dict, prefix: str) -> Tensor:
    return dc.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def self_attention(x: Tensor, params: dict, prefix: str, num_heads: int) -> Tensor:
    tokens, dim = x.shape
    if dim % num_heads:
        raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
    head_dim = dim // num_heads

    def split(t: Tensor) -> Tensor:
        return dc.transpose(t.reshape(tokens, num_heads, head_dim), (1, 0, 2))

    q = split(dc.scale(affine(x, params, f"{prefix}.q"), 1.0 / np.sqrt(head_dim)))
    k = split(affine(x, params, f"{prefix}.k"))
    v = split(affine(x, params, f"{prefix}.v"))
    ctx = dc.attention(q, k, v)
    merged = dc.transpose(ctx, (1, 0, 2)).reshape(tokens, dim)
    return affine(merged, params, f"{prefix}.o")


def encoder_layer(x: Tensor, params: dict, prefix: str, num_heads: int) -> Tensor:
    x = x + self_attention(layer_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn", num_heads)
    h = dc.gelu(affine(layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn.fc1"))
    return x + affine(h, params, f"{prefix}.ffn.fc2")
