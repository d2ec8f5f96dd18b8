import math

import numpy as np
import pytest

from gnpbench.autodiff import (
    NumericalDomainError,
    Param,
    ShapeError,
    Tape,
    grad_check,
    op_forward,
)


def test_relu_forward_sign_cases():
    t = Tape()
    out = t.relu(t.constant([[-1.0, 2.0]]))
    np.testing.assert_array_equal(out.value, [[0.0, 2.0]])


def test_softplus_at_zero_is_ln2():
    t = Tape()
    out = t.softplus(t.constant([[0.0]]))
    assert out.value[0, 0] == pytest.approx(math.log(2.0), abs=1e-15)


def test_matmul_hand_example():
    t = Tape()
    out = t.matmul(t.constant([[1.0, 2.0], [3.0, 4.0]]), t.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_backward_relu_identity_region():
    t = Tape()
    x = t.input([[2.0]])
    loss = t.sum_rows(t.relu(x))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0]])


def test_backward_square():
    t = Tape()
    x = t.input([[3.0]])
    loss = t.sum_rows(t.mul(x, x))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, [[6.0]])


def test_backward_variable_exponent():
    # loss = exp(p * log v) at v=2, p=1; d/dp = 2 * ln 2
    t = Tape()
    v = t.constant([[2.0]])
    p = t.input([[1.0]])
    loss = t.exp(t.mul(p, t.log(v)))
    t.backward(loss)
    assert p.grad[0, 0] == pytest.approx(2.0 * math.log(2.0), rel=1e-12)


def test_log_domain_error():
    t = Tape()
    with pytest.raises(NumericalDomainError):
        t.log(t.constant([[0.0]]))


def test_shape_mismatch_is_configuration_error():
    t = Tape()
    with pytest.raises(ShapeError):
        t.add(t.constant(np.ones((2, 3))), t.constant(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        # outer broadcast (n,1) with (1,d) is deliberately rejected
        t.add(t.constant(np.ones((2, 1))), t.constant(np.ones((1, 3))))


def test_broadcast_row_and_col():
    t = Tape()
    x = t.input(np.arange(6.0).reshape(2, 3))
    row = t.input([[1.0, 2.0, 3.0]])
    col = t.input([[10.0], [20.0]])
    out = t.add(t.add(x, row), col)
    loss = t.sum_rows(t.sum_cols(out))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(row.grad, [[2.0, 2.0, 2.0]])
    np.testing.assert_array_equal(col.grad, [[3.0], [3.0]])


def test_max_rows_ties_go_to_first_index():
    t = Tape()
    x = t.input([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]])
    loss = t.sum_cols(t.max_rows(x))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])


def test_segment_sum_single_segment_equals_sum_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3))
    t = Tape()
    a = t.constant(x)
    seg = t.segment_sum(a, [0, 7])
    full = t.sum_rows(a)
    np.testing.assert_array_equal(seg.value, full.value)


def test_segment_ops_values():
    x = np.array([[1.0, 2.0], [3.0, 0.0], [5.0, -1.0], [2.0, 2.0]])
    starts = [0, 2, 4]
    t = Tape()
    a = t.constant(x)
    np.testing.assert_array_equal(
        t.segment_sum(a, starts).value, [[4.0, 2.0], [7.0, 1.0]]
    )
    np.testing.assert_array_equal(
        t.segment_max(a, starts).value, [[3.0, 2.0], [5.0, 2.0]]
    )
    np.testing.assert_array_equal(
        t.segment_min(a, starts).value, [[1.0, 0.0], [2.0, -1.0]]
    )


def test_gather_rows_forward_and_backward():
    t = Tape()
    a = t.input([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = t.gather_rows(a, [2, 0, 2])
    np.testing.assert_array_equal(out.value, [[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]])
    loss = t.sum_rows(t.sum_cols(out))
    t.backward(loss)
    np.testing.assert_array_equal(a.grad, [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])


def test_gather_rows_scatter_fast_path_matches_slow_path():
    rng = np.random.default_rng(3)
    n, e, d = 6, 14, 4
    idx = np.sort(rng.integers(0, n, size=e))
    idx[:n] = np.arange(n)  # ensure every row occurs
    idx = np.sort(idx)
    starts = np.searchsorted(idx, np.arange(n + 1))
    x = rng.normal(size=(n, d))

    def run(scatter):
        t = Tape()
        a = t.input(x)
        out = t.gather_rows(a, idx, scatter=scatter)
        loss = t.sum_rows(t.sum_cols(t.mul(out, out)))
        t.backward(loss)
        return a.grad

    np.testing.assert_allclose(run(None), run((None, starts)), rtol=0, atol=0)


def test_clamp_zero_gradient_outside_interval():
    t = Tape()
    x = t.input([[-1.0, 0.5, 2.0]])
    loss = t.sum_cols(t.clamp(x, 0.0, 1.0))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_scalar_broadcast():
    t = Tape()
    s = t.input([[2.5]])
    out = t.scalar_broadcast(s, 3, 2)
    assert out.shape == (3, 2)
    loss = t.sum_rows(t.sum_cols(out))
    t.backward(loss)
    np.testing.assert_array_equal(s.grad, [[6.0]])


def test_concat_and_slice_cols():
    t = Tape()
    a = t.input([[1.0, 2.0]])
    b = t.input([[3.0]])
    cat = t.concat_cols(a, b)
    np.testing.assert_array_equal(cat.value, [[1.0, 2.0, 3.0]])
    sl = t.slice_cols(cat, 1, 3)
    loss = t.sum_cols(sl)
    t.backward(loss)
    np.testing.assert_array_equal(a.grad, [[0.0, 1.0]])
    np.testing.assert_array_equal(b.grad, [[1.0]])


def test_fanout_accumulates_additively():
    t = Tape()
    x = t.input([[2.0]])
    y = t.add(t.mul(x, x), t.mul(x, t.constant([[3.0]])))
    t.backward(y)
    assert x.grad[0, 0] == pytest.approx(2.0 * 2.0 + 3.0)


def test_backward_linearity():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(3, 2))

    def grads(a, b):
        t = Tape()
        x = t.input(x0)
        f = t.sum_rows(t.sum_cols(t.mul(x, x)))
        g = t.sum_rows(t.sum_cols(t.exp(x)))
        loss = t.add(t.mul(t.constant([[a]]), f), t.mul(t.constant([[b]]), g))
        t.backward(loss)
        return x.grad.copy()

    ga = grads(1.0, 0.0)
    gb = grads(0.0, 1.0)
    gab = grads(2.5, -1.5)
    np.testing.assert_allclose(gab, 2.5 * ga - 1.5 * gb, rtol=1e-12)


def test_rerun_is_bit_identical():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(4, 3))

    def run():
        t = Tape()
        x = t.input(x0)
        h = t.relu(t.add(t.mul(x, x), t.constant(np.full((4, 3), 0.3))))
        loss = t.sum_rows(t.sum_cols(t.exp(t.mul(h, t.constant([[0.5]])))))
        t.backward(loss)
        return loss.value.copy(), x.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


def test_param_watch_and_grad_lookup():
    p = Param([[1.0, 2.0]], name="w")
    t = Tape()
    node = t.watch(p)
    loss = t.sum_cols(t.mul(node, node))
    t.backward(loss)
    np.testing.assert_array_equal(t.grad(p), [[2.0, 4.0]])
    with pytest.raises(ValueError):
        t.watch(p)


def test_op_forward_dispatch():
    t = Tape()
    out = op_forward(t, "relu", [t.constant([[-2.0, 4.0]])])
    np.testing.assert_array_equal(out.value, [[0.0, 4.0]])
    with pytest.raises(ShapeError):
        op_forward(t, "nosuch", [])


def test_grad_check_simple():
    err = grad_check(lambda t, ns: t.sum_rows(t.relu(ns[0])), [[[2.0]]], step=1e-5)
    assert err < 1e-6


# Central-difference sweep over every primitive, away from kinks.

def _rand_pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


_UNARY_CASES = [
    ("relu", lambda t, x: t.relu(x), False),
    ("abs", lambda t, x: t.abs(x), False),
    ("exp", lambda t, x: t.exp(x), False),
    ("log", lambda t, x: t.log(x), True),
    ("softplus", lambda t, x: t.softplus(x), False),
    ("leaky_relu", lambda t, x: t.leaky_relu(x), False),
    ("elu", lambda t, x: t.elu(x), False),
    ("neg", lambda t, x: t.neg(x), False),
    ("clamp", lambda t, x: t.clamp(x, 0.6, 1.9), True),
    ("sum_rows", lambda t, x: t.sum_rows(x), False),
    ("sum_cols", lambda t, x: t.sum_cols(x), False),
    ("mean_rows", lambda t, x: t.mean_rows(x), False),
    ("max_rows", lambda t, x: t.max_rows(x), False),
    ("min_rows", lambda t, x: t.min_rows(x), False),
    ("segment_sum", lambda t, x: t.segment_sum(x, [0, 2, 5]), False),
    ("segment_max", lambda t, x: t.segment_max(x, [0, 2, 5]), False),
    ("segment_min", lambda t, x: t.segment_min(x, [0, 2, 5]), False),
    ("gather_rows", lambda t, x: t.gather_rows(x, [4, 0, 1, 1, 3, 2]), False),
    ("slice_cols", lambda t, x: t.slice_cols(x, 1, 3), False),
]


@pytest.mark.parametrize("name,fn,positive", _UNARY_CASES, ids=[c[0] for c in _UNARY_CASES])
def test_grad_check_unary_ops(name, fn, positive):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(8):
        x = _rand_pos(rng, (5, 3)) if positive else rng.normal(size=(5, 3))
        if not positive:
            # keep clear of relu/abs kinks
            x = np.where(np.abs(x) < 0.1, x + 0.25, x)

        def builder(t, ns):
            return t.sum_rows(t.sum_cols(fn(t, ns[0])))

        worst = max(worst, grad_check(builder, [x], step=1e-5))
    assert worst < 1e-4


_BINARY_CASES = [
    ("add", lambda t, a, b: t.add(a, b)),
    ("sub", lambda t, a, b: t.sub(a, b)),
    ("mul", lambda t, a, b: t.mul(a, b)),
    ("div", lambda t, a, b: t.div(a, b)),
    ("matmul", lambda t, a, b: t.matmul(a, b)),
]


@pytest.mark.parametrize("name,fn", _BINARY_CASES, ids=[c[0] for c in _BINARY_CASES])
def test_grad_check_binary_ops(name, fn):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(8):
        if name == "matmul":
            a, b = _rand_pos(rng, (3, 4)), _rand_pos(rng, (4, 2))
        else:
            a, b = _rand_pos(rng, (4, 3)), _rand_pos(rng, (4, 3))

        def builder(t, ns):
            return t.sum_rows(t.sum_cols(fn(t, ns[0], ns[1])))

        worst = max(worst, grad_check(builder, [a, b], step=1e-5))
    assert worst < 1e-4


@pytest.mark.parametrize("bshape", [(1, 3), (4, 1), (1, 1)])
def test_grad_check_broadcast_variants(bshape):
    rng = np.random.default_rng(5)
    a = _rand_pos(rng, (4, 3))
    b = _rand_pos(rng, bshape)

    def builder(t, ns):
        return t.sum_rows(t.sum_cols(t.mul(t.div(ns[0], ns[1]), ns[0])))

    assert grad_check(builder, [a, b], step=1e-5) < 1e-4
