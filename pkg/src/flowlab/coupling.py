"""Linear interpolation paths, conditional velocities, time-pair sampling,
and guidance-modified target velocities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .engine import DimensionError, DomainError, as_tensor


@dataclass(frozen=True)
class TimeSamplerConfig:
    """Logit-normal time sampler: sigmoid(N(mu, sigma^2)).

    `equal_prob` is the probability that a sampled pair is collapsed to
    s = t, keeping the equal-times branch (plain velocity regression) in
    the training mix.
    """

    mu: float = -0.4
    sigma: float = 1.0
    equal_prob: float = 0.6

    def __post_init__(self):
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.equal_prob <= 1.0:
            raise DomainError(f"equal_prob must lie in [0,1], got {self.equal_prob}")


@dataclass(frozen=True)
class TimePair:
    s: float
    t: float

    def __post_init__(self):
        if not 0.0 <= self.s <= self.t <= 1.0:
            raise DomainError(f"need 0 <= s <= t <= 1, got s={self.s}, t={self.t}")


@dataclass
class CouplingSample:
    """A batch of (data, noise) pairs with their path points at time t.

    Arrays are batch-first: x, eps, x_t, v_t are (n, d); t is (n,);
    label is (n,) integer or None for unconditional batches.
    """

    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_t: np.ndarray
    label: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


def interpolate(x, eps, t):
    """Path point (1-t)x + t*eps; t scalar or per-row (n,)."""
    x = as_tensor(x)
    eps = as_tensor(eps)
    if x.shape != eps.shape:
        raise DimensionError(f"x shape {x.shape} != eps shape {eps.shape}")
    t_arr = as_tensor(t)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError("t must lie in [0,1]")
    if x.ndim == 2 and t_arr.ndim == 1:
        t_arr = t_arr[:, None]
    return (1.0 - t_arr) * x + t_arr * eps


def conditional_velocity(x, eps):
    """Velocity eps - x of the straight path through one (x, eps) pair."""
    x = as_tensor(x)
    eps = as_tensor(eps)
    if x.shape != eps.shape:
        raise DimensionError(f"x shape {x.shape} != eps shape {eps.shape}")
    return eps - x


def make_coupling(x, eps, t, label=None) -> CouplingSample:
    x = np.atleast_2d(as_tensor(x))
    eps = np.atleast_2d(as_tensor(eps))
    t_arr = np.broadcast_to(as_tensor(t), (x.shape[0],)).copy()
    lab = None if label is None else np.asarray(label, dtype=np.int64)
    return CouplingSample(
        x=x,
        eps=eps,
        t=t_arr,
        x_t=interpolate(x, eps, t_arr),
        v_t=conditional_velocity(x, eps),
        label=lab,
    )


def sample_times(rng: np.random.Generator, cfg: TimeSamplerConfig, n: int) -> np.ndarray:
    """n independent draws of sigmoid(N(mu, sigma^2))."""
    return expit(rng.normal(cfg.mu, cfg.sigma, n))


def sample_time_pairs(
    rng: np.random.Generator, cfg: TimeSamplerConfig, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Batched (s, t): two draws each, t = max, s = min, then s := t with
    probability equal_prob."""
    vals = expit(rng.normal(cfg.mu, cfg.sigma, (n, 2)))
    t = vals.max(axis=1)
    s = vals.min(axis=1)
    eq = rng.random(n) < cfg.equal_prob
    s = np.where(eq, t, s)
    return s, t


def sample_time_pair(rng: np.random.Generator, cfg: TimeSamplerConfig) -> TimePair:
    s, t = sample_time_pairs(rng, cfg, 1)
    return TimePair(float(s[0]), float(t[0]))


def cfg_velocity(v, f_cond, f_uncond, omega):
    """Guidance-modified velocity v + (1 - 1/omega) * (f_cond - f_uncond).

    omega may be a scalar or per-row (n,); every entry must be >= 1.
    """
    v = as_tensor(v)
    f_cond = as_tensor(f_cond)
    f_uncond = as_tensor(f_uncond)
    if not (v.shape == f_cond.shape == f_uncond.shape):
        raise DimensionError("v, f_cond, f_uncond must share a shape")
    om = as_tensor(omega)
    if np.any(om < 1.0):
        raise DomainError("omega must be >= 1")
    if v.ndim == 2 and om.ndim == 1:
        om = om[:, None]
    return v + (1.0 - 1.0 / om) * (f_cond - f_uncond)
