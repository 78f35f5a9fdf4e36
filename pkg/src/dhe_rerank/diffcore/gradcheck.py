"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, finite_checks


def grad_check(
    function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``function`` must map ``inputs`` to a scalar tensor.  The relative error of
    one coordinate is ``|analytic - numeric| / max(1, |analytic|)`` where the
    numeric value is the central difference with step ``eps``.  Any NaN/inf
    produced along the way raises ``NonFiniteError`` naming the primitive.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with finite_checks():
        out = function(*inputs)
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        worst = 0.0
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                f_plus = function(*inputs).item()
                flat[k] = orig - eps
                f_minus = function(*inputs).item()
                flat[k] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                if not np.isfinite(numeric):
                    raise NonFiniteError("central_difference")
                err = abs(ana_flat[k] - numeric) / max(1.0, abs(ana_flat[k]))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
