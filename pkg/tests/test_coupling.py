"""Path construction and time sampling checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import norm

from flowlab.coupling import (
    TimePair,
    TimeSamplerConfig,
    cfg_velocity,
    conditional_velocity,
    interpolate,
    make_coupling,
    sample_time_pair,
    sample_time_pairs,
    sample_times,
)
from flowlab.engine import DimensionError, DomainError


def test_interpolate_endpoints():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3))
    eps = rng.standard_normal((8, 3))
    np.testing.assert_array_equal(interpolate(x, eps, 0.0), x)
    np.testing.assert_array_equal(interpolate(x, eps, 1.0), eps)


def test_interpolate_midpoint():
    out = interpolate(np.array([2.0, 0.0]), np.array([0.0, 2.0]), 0.5)
    np.testing.assert_array_equal(out, [1.0, 1.0])


def test_interpolate_rejects_bad_t():
    x = np.zeros(2)
    with pytest.raises(DomainError):
        interpolate(x, x, 1.5)
    with pytest.raises(DomainError):
        interpolate(x, x, -0.1)


def test_conditional_velocity_basics():
    x = np.array([1.0, 0.0])
    eps = np.array([0.0, 1.0])
    np.testing.assert_array_equal(conditional_velocity(x, eps), [-1.0, 1.0])
    np.testing.assert_array_equal(conditional_velocity(x, x), [0.0, 0.0])
    with pytest.raises(DimensionError):
        conditional_velocity(np.zeros(2), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.0, 1.0), seed=st.integers(0, 2**20))
def test_interpolation_algebraic_identity(t, seed):
    # x_t + (1-t) * v_t == eps for every pair.
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    lhs = interpolate(x, eps, t) + (1.0 - t) * conditional_velocity(x, eps)
    np.testing.assert_allclose(lhs, eps, atol=1e-14)


def test_make_coupling_reconstruction():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 2))
    eps = rng.standard_normal((16, 2))
    t = rng.random(16)
    batch = make_coupling(x, eps, t, label=np.zeros(16, dtype=int))
    np.testing.assert_allclose(
        batch.x_t, (1 - t[:, None]) * x + t[:, None] * eps, atol=1e-14
    )
    np.testing.assert_array_equal(batch.v_t, eps - x)
    assert len(batch) == 16 and batch.label.dtype == np.int64


def test_time_pair_ordering_enforced():
    with pytest.raises(DomainError):
        TimePair(0.7, 0.3)
    with pytest.raises(DomainError):
        TimePair(-0.1, 0.5)


def test_sampler_config_validation():
    with pytest.raises(DomainError):
        TimeSamplerConfig(sigma=0.0)
    with pytest.raises(DomainError):
        TimeSamplerConfig(equal_prob=1.5)


def test_equal_prob_one_forces_s_equals_t():
    rng = np.random.default_rng(5)
    cfg = TimeSamplerConfig(equal_prob=1.0)
    s, t = sample_time_pairs(rng, cfg, 500)
    np.testing.assert_array_equal(s, t)


def test_pair_max_min_construction():
    rng = np.random.default_rng(7)
    cfg = TimeSamplerConfig(equal_prob=0.0)
    s, t = sample_time_pairs(rng, cfg, 10**5)
    assert np.all(s < t)  # continuous draws tie with probability 0
    # t = max of two stochastically dominates s = min of two.
    qs = np.linspace(0.05, 0.95, 19)
    assert np.all(np.quantile(t, qs) > np.quantile(s, qs))


def test_logit_normal_mean_matches_quadrature():
    # Oracle: E[sigmoid(Z)], Z ~ N(-0.4, 1), by numerical integration.
    mean_true, _ = quad(
        lambda z: expit(z) * norm.pdf(z, loc=-0.4, scale=1.0), -12, 12
    )
    rng = np.random.default_rng(11)
    cfg = TimeSamplerConfig()
    draws = sample_times(rng, cfg, 10**5)
    assert abs(draws.mean() - mean_true) < 0.01
    # The same pre-max/min marginal underlies the pair sampler: pooling s and
    # t from equal_prob=0 pairs recovers it.
    s, t = sample_time_pairs(rng, TimeSamplerConfig(equal_prob=0.0), 10**5)
    pooled = np.concatenate([s, t])
    assert abs(pooled.mean() - mean_true) < 0.01


def test_sample_time_pair_single():
    rng = np.random.default_rng(13)
    pair = sample_time_pair(rng, TimeSamplerConfig())
    assert 0.0 <= pair.s <= pair.t <= 1.0


def test_cfg_velocity_values():
    v = np.zeros((1, 2))
    fc = np.array([[1.0, 0.0]])
    fu = np.array([[0.0, 0.0]])
    np.testing.assert_array_equal(cfg_velocity(v, fc, fu, 4.0), [[0.75, 0.0]])
    np.testing.assert_array_equal(cfg_velocity(v, fc, fu, 1.0), v)
    np.testing.assert_array_equal(cfg_velocity(v, fc, fc, 3.0), v)
    with pytest.raises(DomainError):
        cfg_velocity(v, fc, fu, 0.5)


@settings(max_examples=40, deadline=None)
@given(omega=st.floats(1.0, 100.0))
def test_cfg_coefficient_monotone_and_bounded(omega):
    coef = 1.0 - 1.0 / omega
    assert 0.0 <= coef < 1.0
    assert coef <= 1.0 - 1.0 / (omega + 1.0)


def test_cfg_velocity_per_row_omega():
    v = np.zeros((3, 1))
    fc = np.ones((3, 1))
    fu = np.zeros((3, 1))
    out = cfg_velocity(v, fc, fu, np.array([1.0, 2.0, 4.0]))
    np.testing.assert_allclose(out[:, 0], [0.0, 0.5, 0.75])
