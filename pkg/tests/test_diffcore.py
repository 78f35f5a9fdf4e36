"""Autodiff primitives, gradient checking and Adam."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dhe_rerank import diffcore as dc
from dhe_rerank.diffcore import Tensor

RNG = np.random.default_rng(1234)


def _t(*shape, low=-1.0, high=1.0):
    return Tensor(RNG.uniform(low, high, shape))


def _weighted(out: Tensor, seed: int = 0) -> Tensor:
    # random projection to a scalar so that every output coordinate matters
    w = np.random.default_rng(seed).uniform(-1.0, 1.0, out.shape)
    return dc.tsum(out * Tensor(w))


UNARY = {
    "exp": (lambda a: dc.exp(a), (3, 4), (-1, 1)),
    "log": (lambda a: dc.log(a), (3, 4), (0.5, 2.0)),
    "sqrt": (lambda a: dc.sqrt(a), (3, 4), (0.5, 2.0)),
    "power": (lambda a: dc.power(a, 2.5), (3, 4), (0.5, 2.0)),
    "abs": (lambda a: dc.absolute(a), (3, 4), (0.2, 1.0)),
    "clamp_min": (lambda a: dc.clamp_min(a, 0.0), (3, 4), (0.1, 1.0)),
    "relu": (lambda a: dc.relu(a), (3, 4), (0.1, 1.0)),
    "tanh": (lambda a: dc.tanh(a), (3, 4), (-2, 2)),
    "gelu": (lambda a: dc.gelu(a), (3, 4), (-2, 2)),
    "scale": (lambda a: dc.scale(a, -1.7), (3, 4), (-1, 1)),
    "sum_axis": (lambda a: dc.tsum(a, axis=1), (3, 4), (-1, 1)),
    "mean_axis": (lambda a: dc.mean(a, axis=0, keepdims=True), (3, 4), (-1, 1)),
    "reshape": (lambda a: dc.reshape(a, (4, 3)), (3, 4), (-1, 1)),
    "transpose": (lambda a: dc.transpose(a, (2, 0, 1)), (2, 3, 4), (-1, 1)),
    "swap_last": (lambda a: dc.swap_last(a), (2, 3, 4), (-1, 1)),
    "getitem_slice": (lambda a: a[1:, ::2], (3, 4), (-1, 1)),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 0])], (3, 4), (-1, 1)),
    "softmax": (lambda a: dc.softmax(a, axis=-1), (3, 4), (-2, 2)),
    "norm": (lambda a: dc.norm(a, axis=-1), (3, 4), (-1, 1)),
    "l2_normalize": (lambda a: dc.l2_normalize(a), (3, 4), (-1, 1)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    fn, shape, (lo, hi) = UNARY[name]
    x = _t(*shape, low=lo, high=hi)
    assert dc.grad_check(lambda a: _weighted(fn(a)), [x]) < 1e-6


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("add_broadcast", dc.add, [(3, 4), (4,)]),
        ("sub_broadcast", dc.sub, [(3, 1), (1, 4)]),
        ("mul_broadcast", dc.mul, [(2, 3, 4), (3, 4)]),
        ("div", dc.div, [(3, 4), (3, 4)]),
        ("matmul", dc.matmul, [(3, 5), (5, 2)]),
        ("matmul_batched", dc.matmul, [(2, 3, 5), (2, 5, 4)]),
        ("concat", lambda a, b: dc.concat([a, b], axis=1), [(3, 2), (3, 4)]),
        ("stack", lambda a, b: dc.stack([a, b], axis=0), [(3, 4), (3, 4)]),
    ],
)
def test_binary_primitive_gradients(name, fn, shapes):
    xs = [_t(*s, low=0.5, high=1.5) if name == "div" else _t(*s) for s in shapes]
    assert dc.grad_check(lambda *a: _weighted(fn(*a)), xs) < 1e-6


def test_linear_gradient():
    x, w, b = _t(4, 3), _t(3, 5), _t(5)
    assert dc.grad_check(lambda x, w, b: _weighted(dc.linear(x, w, b)), [x, w, b]) < 1e-6


def test_layer_norm_gradient():
    x, g, b = _t(4, 6), _t(6, low=0.5, high=1.5), _t(6)
    assert dc.grad_check(lambda x, g, b: _weighted(dc.layer_norm(x, g, b)), [x, g, b]) < 1e-6


def test_attention_gradient():
    q, k, v = _t(2, 5, 3), _t(2, 5, 3), _t(2, 5, 3)
    assert dc.grad_check(lambda q, k, v: _weighted(dc.attention(q, k, v)), [q, k, v]) < 1e-6


def test_attention_matches_unfused_softmax():
    q, k, v = _t(2, 5, 3), _t(2, 5, 3), _t(2, 5, 3)
    ref = dc.matmul(dc.softmax(dc.matmul(q, dc.swap_last(k)), axis=-1), v)
    np.testing.assert_allclose(dc.attention(q, k, v).data, ref.data, atol=1e-12)


def test_solve_gradient_both_operands():
    A = Tensor(np.eye(4) * 3.0 + RNG.uniform(-0.5, 0.5, (4, 4)))
    b = _t(4, 2)
    assert dc.grad_check(lambda A, b: _weighted(dc.solve(A, b)), [A, b]) < 1e-6


def test_solve_matches_numpy():
    A = np.eye(5) * 2.0 + RNG.uniform(-0.3, 0.3, (5, 5))
    b = RNG.uniform(-1, 1, 5)
    np.testing.assert_allclose(dc.solve(Tensor(A), Tensor(b)).data, np.linalg.solve(A, b), atol=1e-12)


def test_solve_singular_raises_with_condition():
    A = Tensor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(dc.SingularSystemError) as info:
        dc.solve(A, Tensor(np.ones(2)))
    assert info.value.cond > 1e12


def test_chain_gradient_small_mlp():
    x, w1, w2 = _t(5, 4), _t(4, 6), _t(6, 3)

    def f(x, w1, w2):
        h = dc.gelu(dc.matmul(x, w1))
        return dc.mean(dc.l2_normalize(dc.tanh(dc.matmul(h, w2))) ** 2.0 * 3.0 + dc.exp(dc.scale(h, 0.1)).mean())

    assert dc.grad_check(f, [x, w1, w2]) < 1e-4


def test_shape_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.add(_t(3, 4), _t(5))
    with pytest.raises(dc.ShapeError):
        dc.matmul(_t(3, 4), _t(5, 2))


def test_non_finite_names_primitive():
    with dc.finite_checks(), np.errstate(invalid="ignore"):
        with pytest.raises(dc.NonFiniteError) as info:
            dc.log(Tensor(np.array([-1.0, 1.0])))
    assert info.value.primitive == "log"


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        dc.grad_check(lambda a: dc.tsum(a), [_t(2)], eps=1e-2)


def test_backward_accumulates_over_shared_node():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = x * x + x
    dc.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_every_primitive_is_registered():
    assert {"solve", "attention", "layer_norm", "softmax", "matmul", "getitem"} <= set(dc.PRIMITIVES)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    state = dc.AdamState.for_params([p], lr=0.01)
    dc.adam_step([p], [np.array([0.5, -4.0, 0.0])], state)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.99, -1.99, 3.0], atol=1e-9)
    assert state.step_count == 1


def test_adam_matches_reference_recurrence():
    g_seq = RNG.normal(size=(5, 3))
    p = Tensor(np.zeros(3))
    state = dc.AdamState.for_params([p], lr=1e-3)
    m = np.zeros(3)
    v = np.zeros(3)
    ref = np.zeros(3)
    for t, g in enumerate(g_seq, start=1):
        dc.adam_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-15)


def test_adam_none_gradient_is_zero():
    p = Tensor(np.ones(2))
    dc.adam_step([p], [None], dc.AdamState.for_params([p]))
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_adam_rejects_non_finite_before_update():
    p, q = Tensor(np.ones(2)), Tensor(np.ones(2))
    state = dc.AdamState.for_params([p, q])
    with pytest.raises(FloatingPointError):
        dc.adam_step([p, q], [np.ones(2), np.array([np.nan, 0.0])], state)
    np.testing.assert_array_equal(p.data, np.ones(2))
    assert state.step_count == 0


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -2.0]))
    opt = dc.Adam([p], lr=0.1)
    p.requires_grad = True
    for _ in range(300):
        opt.zero_grad()
        dc.tsum(p * p).backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-2


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_broadcast_axis(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    dc.tsum(ta + tb).backward()
    np.testing.assert_array_equal(ta.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(tb.grad, np.full(4, 3.0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite))
def test_softmax_rows_sum_to_one(a):
    out = dc.softmax(Tensor(a), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(0.1, 10)))
def test_l2_normalize_unit_rows(a):
    np.testing.assert_allclose(np.linalg.norm(dc.l2_normalize(Tensor(a)).data, axis=-1), 1.0, atol=1e-12)
