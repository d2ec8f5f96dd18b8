import numpy as np
import pytest

from gnpbench import pooling as pl
from gnpbench.autodiff import Param, ShapeError, Tape, grad_check


def _plus(V, p, q, eps):
    t = Tape()
    return pl.gnp_plus(t, t.constant(V), p, q, epsilon=eps).value


def _minus(V, p, q, eps):
    t = Tape()
    return pl.gnp_minus(t, t.constant(V), p, q, epsilon=eps).value


def test_plus_sum_special_case():
    assert _plus([[2.0], [3.0]], 1.0, 0.0, 0.0)[0, 0] == pytest.approx(5.0, rel=1e-12)


def test_plus_mean_special_case():
    assert _plus([[2.0], [4.0]], 1.0, 1.0, 0.0)[0, 0] == pytest.approx(3.0, rel=1e-12)


def test_plus_large_p_approaches_max():
    out = _plus([[1.0], [2.0], [3.0]], 50.0, 0.0, 0.0)
    assert out[0, 0] == pytest.approx(3.0, abs=1e-6)


def test_minus_harmonic_combine():
    out = _minus([[2.0], [2.0]], 1.0, 0.0, 1e-4)
    assert abs(out[0, 0] - 1.0) < 2e-4


def test_minus_masks_near_zero_entry():
    out = _minus([[0.0], [2.0]], 1.0, 0.0, 1e-4)
    assert out[0, 0] == pytest.approx(2.0, abs=1e-3)


def test_minus_all_below_eps_outputs_zero_exactly():
    for p, q in [(1.0, 0.0), (7.0, 0.5), (50.0, -1.0)]:
        out = _minus([[0.0], [0.0]], p, q, 1e-4)
        assert out[0, 0] == 0.0


def test_negative_input_rejected():
    t = Tape()
    with pytest.raises(ValueError):
        pl.gnp_plus(t, t.constant([[-0.5], [1.0]]), 1.0, 0.0)


def _hand_gnp(dim, eps=0.0, mode=pl.FULL, t_val=-60.0, q=0.0):
    gp = pl.GnpParams(dim, epsilon=eps, mode=mode)
    gp.t_plus.value[:] = t_val  # p = 1 + softplus(t) ~ 1 for very negative t
    gp.t_minus.value[:] = t_val
    gp.q_plus.value[:] = q
    gp.q_minus.value[:] = q
    return gp


def test_forward_hand_example_sum_and_harmonic_halves():
    gp = _hand_gnp(2)
    t = Tape()
    out = pl.gnp_forward(t, t.constant([[2.0, 2.0], [3.0, 3.0]]), gp)
    assert out.value[0, 0] == pytest.approx(5.0, rel=1e-9)
    assert out.value[0, 1] == pytest.approx(1.2, rel=1e-9)


def test_forward_full_needs_two_columns():
    with pytest.raises(ShapeError):
        pl.GnpParams(1, mode=pl.FULL)
    pl.GnpParams(1, mode=pl.MINUS_ONLY)  # fine


def test_plus_only_matches_columnwise_sum():
    rng = np.random.default_rng(0)
    V = rng.uniform(0.5, 3.0, size=(6, 4))
    gp = _hand_gnp(4, eps=1e-8, mode=pl.PLUS_ONLY)
    t = Tape()
    out = pl.gnp_forward(t, t.constant(V), gp)
    np.testing.assert_allclose(out.value, V.sum(axis=0, keepdims=True), rtol=1e-7)


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    V = rng.uniform(0.0, 4.0, size=(9, 4))
    gp = pl.GnpParams(4, rng=np.random.default_rng(2))
    t1, t2 = Tape(), Tape()
    a = pl.gnp_forward(t1, t1.constant(V), gp).value
    b = pl.gnp_forward(t2, t2.constant(V[rng.permutation(9)]), gp).value
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_monotonicity_of_plus_half():
    rng = np.random.default_rng(3)
    for _ in range(20):
        V = rng.uniform(0.1, 2.0, size=(5, 3))
        p = float(rng.uniform(1.0, 20.0))
        q = float(rng.uniform(-1.0, 1.0))
        base = _plus(V, p, q, 1e-4)
        bumped = V.copy()
        bumped[2, 1] += 0.5
        out = _plus(bumped, p, q, 1e-4)
        assert np.all(out >= base - 1e-12)


def test_positive_homogeneity_at_eps_zero():
    rng = np.random.default_rng(4)
    V = rng.uniform(0.2, 3.0, size=(7, 2))
    for c in (0.5, 2.0, 10.0):
        a = _plus(c * V, 3.7, 0.25, 0.0)
        b = c * _plus(V, 3.7, 0.25, 0.0)
        np.testing.assert_allclose(a, b, rtol=1e-9)


def test_sandwich_bounds_plus_and_minus():
    # bounds at eps=0: max <= plus(q=0) <= max * n^(1/p), and
    # min * n^(-1/p) <= minus(q=0) <= min; equality cases (near-tied inputs
    # at large p) round at machine precision, hence the 1-ulp-scale slack
    rng = np.random.default_rng(5)
    tol = 1e-12
    for _ in range(300):
        n = int(rng.integers(2, 30))
        V = rng.uniform(0.1, 10.0, size=(n, 3))
        p = float(rng.uniform(1.0, 50.0))
        plus = _plus(V, p, 0.0, 0.0)[0]
        minus = _minus(V, p, 0.0, 0.0)[0]
        mx = V.max(axis=0)
        mn = V.min(axis=0)
        assert np.all(mx * (1 - tol) <= plus)
        assert np.all(plus <= mx * n ** (1.0 / p) * (1 + tol))
        assert np.all(mn * n ** (-1.0 / p) * (1 - tol) <= minus)
        assert np.all(minus <= mn * (1 + tol))


def test_mode_equivalence_full_vs_plus_only():
    # zeroing the minus block of w makes FULL agree with PLUS_ONLY on the
    # plus columns
    rng = np.random.default_rng(6)
    V = rng.uniform(0.5, 2.0, size=(6, 4))
    gp_full = pl.GnpParams(4, epsilon=1e-4, mode=pl.FULL)
    gp_full.w.value[:] = np.eye(4)
    gp_full.w.value[2:, :] = 0.0  # minus half contributes nothing
    gp_plus = pl.GnpParams(4, epsilon=1e-4, mode=pl.PLUS_ONLY)
    gp_plus.w.value[:] = np.eye(4)
    t1, t2 = Tape(), Tape()
    full = pl.gnp_forward(t1, t1.constant(V), gp_full).value
    plus = pl.gnp_forward(t2, t2.constant(np.hstack([V[:, :2], V[:, :2]])), gp_plus).value
    np.testing.assert_allclose(full[0, :2], plus[0, :2], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(full[0, 2:], 0.0, atol=1e-12)


def test_gradients_finite_with_zero_inputs():
    V0 = np.array([[0.0, 1.5], [2.0, 0.0], [0.5, 0.3]])
    gp = pl.GnpParams(2, epsilon=1e-4, rng=np.random.default_rng(7))
    t = Tape()
    out = pl.gnp_forward(t, t.input(V0), gp)
    loss = t.sum_cols(out)
    t.backward(loss)
    for p in gp.params():
        assert np.all(np.isfinite(t.grad(p))), p.name
    assert np.all(np.isfinite(t.nodes[1].grad))


def test_grad_check_full_forward():
    rng = np.random.default_rng(8)
    gp = pl.GnpParams(4, epsilon=1e-4, rng=rng)
    V0 = rng.uniform(0.05, 2.0, size=(6, 4))  # clear of the eps threshold

    def builder(t, ns):
        return t.sum_cols(pl.gnp_forward(t, ns[0], gp))

    assert grad_check(builder, [V0], step=1e-5) < 1e-4


def test_grad_check_wrt_exponents_and_mixing():
    rng = np.random.default_rng(9)
    V0 = rng.uniform(0.1, 2.0, size=(5, 2))

    def builder(t, ns):
        v, tp, tm, qp, qm, w, b = ns
        k = 1
        p_plus = t.clamp(t.softplus(tp) + t.constant(1.0), 1.0, 50.0)
        p_minus = t.clamp(t.softplus(tm) + t.constant(1.0), 1.0, 50.0)
        seg = pl.whole(5)
        plus = pl.gnp_plus_segments(t, t.slice_cols(v, 0, k), p_plus, qp, 1e-4, seg)
        minus = pl.gnp_minus_segments(t, t.slice_cols(v, k, 2), p_minus, qm, 1e-4, seg)
        y = t.concat_cols(plus, minus)
        return t.sum_cols(y @ w + b)

    inputs = [V0, [[0.3]], [[0.8]], [[0.4]], [[-0.2]],
              np.eye(2) + 0.05, np.zeros((1, 2))]
    assert grad_check(builder, inputs, step=1e-5) < 1e-4


def test_baseline_pools():
    V = np.array([[1.0, 5.0], [3.0, 2.0]])
    t = Tape()
    v = t.constant(V)
    np.testing.assert_array_equal(pl.pool_baseline(t, pl.MAX, v).value, [[3.0, 5.0]])
    np.testing.assert_array_equal(pl.pool_baseline(t, pl.MIN, v).value, [[1.0, 2.0]])
    np.testing.assert_array_equal(pl.pool_baseline(t, pl.SUM, v).value, [[4.0, 7.0]])
    np.testing.assert_array_equal(pl.pool_baseline(t, pl.MEAN, v).value, [[2.0, 3.5]])


def test_baseline_sum_gradient_is_one():
    t = Tape()
    x = t.input([[2.0], [4.0]])
    loss = t.sum_cols(pl.pool_baseline(t, pl.SUM, x))
    t.backward(loss)
    np.testing.assert_array_equal(x.grad, [[1.0], [1.0]])


def test_segmented_pooling_matches_per_segment_calls():
    rng = np.random.default_rng(10)
    V = rng.uniform(0.1, 3.0, size=(10, 4))
    seg = pl.Segments([0, 4, 10])
    gp = pl.GnpParams(4, epsilon=1e-4, rng=rng)
    t = Tape()
    batched = pl.gnp_apply(t, gp, t.constant(V), seg).value
    t1, t2 = Tape(), Tape()
    a = pl.gnp_forward(t1, t1.constant(V[:4]), gp).value
    b = pl.gnp_forward(t2, t2.constant(V[4:]), gp).value
    np.testing.assert_allclose(batched, np.vstack([a, b]), rtol=1e-12)


def test_exponent_values_reflect_reparameterization():
    gp = pl.GnpParams(2)
    vals = gp.exponent_values()
    assert vals["p_plus"] == pytest.approx(2.0, rel=1e-12)
    assert vals["q_plus"] == 0.0
    gp.t_plus.value[:] = 1000.0  # way past the clip
    assert gp.exponent_values()["p_plus"] == 50.0


def test_both_mode_mixes_two_halves_of_every_column():
    rng = np.random.default_rng(11)
    V = rng.uniform(0.5, 2.0, size=(6, 1))
    gp = pl.GnpParams(1, epsilon=1e-4, mode=pl.BOTH)
    gp.w.value[:] = [[1.0], [0.0]]  # select the positive half
    t = Tape()
    out = pl.gnp_forward(t, t.constant(V), gp)
    t2 = Tape()
    plus = pl.gnp_plus(t2, t2.constant(V), 2.0, 0.0, epsilon=1e-4)
    np.testing.assert_allclose(out.value, plus.value, rtol=1e-12)
