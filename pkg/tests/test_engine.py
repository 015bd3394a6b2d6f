"""Differentiation engine checks against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import engine
from flowlab.engine import (
    DimensionError,
    Dual,
    NumericError,
    Var,
    backward,
    concat,
    grad,
    jvp,
    mean_all,
    silu,
    sin,
    slice_flat,
    sum_rows,
    take_rows,
    value_and_grad,
)


def _toy_net(params, x, t):
    """Small MLP-shaped function exercising every op the models use.

    In reverse mode `t` is always plain (losses differentiate parameters), so
    the sinusoid features stay constants, exactly as in the real network.
    """
    w1 = slice_flat(params, 0, 12, (3, 4))
    b1 = slice_flat(params, 12, 16, (4,))
    w2 = slice_flat(params, 16, 32, (4, 4))
    b2 = slice_flat(params, 32, 36, (4,))
    w3 = slice_flat(params, 36, 48, (4, 3))
    b3 = slice_flat(params, 48, 51, (3,))
    w4 = slice_flat(params, 51, 59, (2, 4))
    feats = concat([sin(t * 2.0), engine.cos(t * 5.0)], axis=-1)
    h = silu(x @ w1 + b1 + feats @ w4)
    h = silu(h @ w2 + b2)
    return h @ w3 + b3


def _plain_net(params, x, t):
    # Same computation, everything plain, for finite differencing.
    return _toy_net(np.asarray(params, dtype=np.float64), x, t)


def _loss(params, x, t, target):
    pred = _toy_net(params, x, t)
    r = pred - target
    return mean_all(sum_rows(r * r))


N_PARAMS = 59


def test_dual_arithmetic_matches_analytic():
    # f(x) = x^2 * 3 + 2/x - x, f'(x) = 6x - 2/x^2 - 1; at x=2: f'=10.5
    d = Dual(np.array(2.0), np.array(1.0))
    out = d * d * 3.0 + 2.0 / d - d
    assert out.primal == pytest.approx(11.0)
    assert out.tangent == pytest.approx(10.5, rel=1e-12)


def test_dual_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        Dual(np.zeros(3), np.zeros(4))


def test_jvp_matches_central_fd():
    rng = np.random.default_rng(7)
    for _ in range(25):
        p = rng.standard_normal(N_PARAMS)
        x = rng.standard_normal((5, 3))
        t = rng.random((5, 1))
        dx = rng.standard_normal((5, 3))
        dt = rng.standard_normal((5, 1))
        val, tan = jvp(lambda xx, tt: _plain_net(p, xx, tt), x, t, dx, dt)
        h = 1e-5
        fd = (_plain_net(p, x + h * dx, t + h * dt) - _plain_net(p, x - h * dx, t - h * dt)) / (2 * h)
        assert val == pytest.approx(_plain_net(p, x, t), abs=0)
        denom = np.linalg.norm(fd) + 1e-12
        assert np.linalg.norm(tan - fd) / denom < 1e-6


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_jvp_linear_in_direction(a, b):
    rng = np.random.default_rng(11)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((4, 3))
    t = rng.random((4, 1))
    d1, d2 = rng.standard_normal((2, 4, 3))
    f = lambda xx, tt: _plain_net(p, xx, tt)
    _, t1 = jvp(f, x, t, d1, 0.0)
    _, t2 = jvp(f, x, t, d2, 0.0)
    _, tc = jvp(f, x, t, a * d1 + b * d2, 0.0)
    scale = np.linalg.norm(a * t1 + b * t2) + 1e-9
    assert np.linalg.norm(tc - (a * t1 + b * t2)) / scale < 1e-12


def test_jvp_constant_function_returns_zero_tangent():
    val, tan = jvp(lambda x, t: np.ones((2, 2)), np.zeros((2, 2)), 0.5, np.ones((2, 2)), 1.0)
    assert np.all(tan == 0.0)


def test_jvp_result_is_plain_ndarray():
    # Directional derivatives are constants for any later gradient computation.
    val, tan = jvp(lambda x, t: x * 2.0, np.ones(3), 0.0, np.ones(3), 0.0)
    assert type(val) is np.ndarray and type(tan) is np.ndarray


def test_grad_matches_analytic_quadratic():
    # L(p) = mean((p - b)^2): dL/dp = 2 (p - b) / n
    b = np.arange(4.0)
    p = np.array([1.0, -2.0, 0.5, 3.0])
    g = grad(lambda v: mean_all((v - b) * (v - b)), p)
    np.testing.assert_allclose(g, 2 * (p - b) / 4, rtol=1e-14)


def test_grad_matches_central_fd_directional():
    rng = np.random.default_rng(3)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((6, 3))
    t = rng.random((6, 1))
    tgt = rng.standard_normal((6, 3))
    f = lambda v: _loss(v, x, t, tgt)
    val, g = value_and_grad(f, p)
    assert val == pytest.approx(float(_loss(p, x, t, tgt)), abs=0)
    h = 1e-5
    for _ in range(40):
        d = rng.standard_normal(N_PARAMS)
        d /= np.linalg.norm(d)
        fd = (float(f(p + h * d)) - float(f(p - h * d))) / (2 * h)
        assert abs(float(g @ d) - fd) / (abs(fd) + 1e-10) < 1e-5


def test_grad_matches_elementwise_fd():
    rng = np.random.default_rng(5)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((4, 3))
    t = rng.random((4, 1))
    tgt = rng.standard_normal((4, 3))
    f = lambda v: float(_loss(v, x, t, tgt))
    g = grad(lambda v: _loss(v, x, t, tgt), p)
    h = 1e-5
    fd = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        fd[i] = (f(p + e) - f(p - e)) / (2 * h)
    assert np.linalg.norm(g - fd) / (np.linalg.norm(fd) + 1e-12) < 1e-7


def test_forward_reverse_consistency():
    # g . d computed by reverse mode equals the forward-mode derivative of the
    # loss along d, to near machine precision.
    rng = np.random.default_rng(9)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((5, 3))
    t = rng.random((5, 1))
    tgt = rng.standard_normal((5, 3))
    g = grad(lambda v: _loss(v, x, t, tgt), p)
    for _ in range(10):
        d = rng.standard_normal(N_PARAMS)
        out = _loss(Dual(p, d), x, t, tgt)
        fwd = out.tangent
        assert abs(float(g @ d) - float(fwd)) / (abs(fwd) + 1e-12) < 1e-10


def test_primal_identical_across_modes():
    rng = np.random.default_rng(13)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((5, 3))
    t = rng.random((5, 1))
    plain = _plain_net(p, x, t)
    dual_out = _toy_net(Dual(p, np.zeros_like(p)), x, t)
    var_out = _toy_net(Var(p), x, t)
    assert np.array_equal(plain, dual_out.primal)
    assert np.array_equal(plain, var_out.data)


def test_repeated_evaluation_bitwise_stable():
    rng = np.random.default_rng(17)
    p = rng.standard_normal(N_PARAMS)
    x = rng.standard_normal((5, 3))
    t = rng.random((5, 1))
    tgt = rng.standard_normal((5, 3))
    v1, g1 = value_and_grad(lambda v: _loss(v, x, t, tgt), p)
    v2, g2 = value_and_grad(lambda v: _loss(v, x, t, tgt), p)
    assert v1 == v2
    assert np.array_equal(g1, g2)


def test_take_rows_accumulates_repeated_indices():
    table = np.arange(6.0).reshape(3, 2)
    idx = np.array([0, 0, 2])

    def f(v):
        tab = slice_flat(v, 0, 6, (3, 2))
        rows = take_rows(tab, idx)
        return mean_all(rows * np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]))

    g = grad(f, table.ravel())
    # Row 0 picked twice, row 1 never, row 2 once; mean divides by 6 entries.
    np.testing.assert_allclose(g.reshape(3, 2), np.array([[2, 2], [0, 0], [1, 1]]) / 6.0)


def test_slice_flat_grad_stays_in_slice():
    p = np.ones(10)
    g = grad(lambda v: mean_all(slice_flat(v, 2, 5, (3,)) * np.array([1.0, 2.0, 3.0])), p)
    assert np.all(g[:2] == 0) and np.all(g[5:] == 0)
    np.testing.assert_allclose(g[2:5], np.array([1.0, 2.0, 3.0]) / 3.0)


def test_grad_of_param_free_loss_is_zero():
    val, g = value_and_grad(lambda v: np.float64(4.2), np.ones(3))
    assert val == 4.2 and np.all(g == 0)


def test_backward_rejects_nonscalar():
    v = Var(np.ones(3))
    with pytest.raises(DimensionError):
        backward(v + 1.0)


def test_nonfinite_loss_raises():
    with pytest.raises(NumericError):
        value_and_grad(lambda v: mean_all(v * np.inf), np.ones(3))


def test_jvp_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        jvp(lambda x, t: x, np.ones(3), 0.0, np.ones(4), 0.0)


def test_var_unsupported_ops_fail_loudly():
    v = Var(np.ones(3))
    with pytest.raises(TypeError):
        sin(v)
    with pytest.raises(TypeError):
        v / v


def test_silu_smooth_and_matches_fd():
    xs = np.linspace(-4, 4, 30)
    h = 1e-6
    d = Dual(xs, np.ones_like(xs))
    out = silu(d)
    fd = (silu(xs + h) - silu(xs - h)) / (2 * h)
    np.testing.assert_allclose(out.tangent, fd, atol=1e-8)
