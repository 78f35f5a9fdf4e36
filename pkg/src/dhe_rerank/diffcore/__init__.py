"""Minimal dense-tensor engine with reverse-mode autodiff and Adam."""

from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import (
    PRIMITIVES,
    NonFiniteError,
    ShapeError,
    SingularSystemError,
    Tensor,
    absolute,
    add,
    attention,
    as_tensor,
    clamp_min,
    concat,
    div,
    exp,
    finite_checks,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    norm,
    power,
    relu,
    reshape,
    scale,
    softmax,
    solve,
    sqrt,
    stack,
    sub,
    swap_last,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
