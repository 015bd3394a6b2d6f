"""Gaussian-mixture data distributions with closed-form posteriors.

For data x ~ sum_k w_k N(mu_k, sigma_k^2 I) and the linear path
x_t = (1-t)x + t*eps, everything the rest of the package wants to test
against has a closed form: the posterior p(x | x_t) is again a Gaussian
mixture (conjugacy per component), so the marginal velocity u_t, the
conditional-velocity covariance trace, and exact posterior sampling are all
available without approximation. A high-accuracy RK4 integrator of the
marginal ODE serves as the reference flow map.

Numerical care: the velocity formulas are algebraically rearranged so that
the 1/t factors cancel exactly, keeping them stable for t near 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import DimensionError, DomainError, NumericError, as_tensor, check_finite

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture: weights (K,), means (K, d),
    variances (K,) of per-component scale sigma_k^2, optional labels (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", as_tensor(self.weights))
        object.__setattr__(self, "means", np.atleast_2d(as_tensor(self.means)))
        object.__setattr__(self, "variances", as_tensor(self.variances))
        if self.labels is not None:
            object.__setattr__(
                self, "labels", np.asarray(self.labels, dtype=np.int64)
            )
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape[0] != k:
            raise DimensionError("weights, means, variances must agree on K")
        if self.labels is not None and self.labels.shape[0] != k:
            raise DimensionError("labels must have one entry per component")
        if np.any(self.weights <= 0):
            raise DomainError("component weights must be positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise DomainError("component weights must sum to 1")
        if np.any(self.variances < 0):
            raise DomainError("variance scales must be nonnegative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def is_degenerate(self) -> bool:
        """True when the data law is a single point mass."""
        if np.any(self.variances > 0):
            return False
        return bool(np.all(self.means == self.means[0]))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


def single_gaussian(mean, variance: float = 1.0) -> MixtureSpec:
    mean = np.atleast_1d(as_tensor(mean))
    return MixtureSpec(np.array([1.0]), mean[None, :], np.array([variance]))


def gaussian_ring(
    n_components: int = 8,
    radius: float = 3.0,
    variance: float = 0.09,
    labeled: bool = False,
) -> MixtureSpec:
    """Equal-weight 2D mixture with means on a circle."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(n_components) if labeled else None
    return MixtureSpec(
        np.full(n_components, 1.0 / n_components),
        means,
        np.full(n_components, variance),
        labels,
    )


@dataclass
class PosteriorMoments:
    """Exact moments of p(x | x_t): mean (n, d), covariance trace (n,),
    per-component responsibilities (n, K)."""

    mean: np.ndarray
    covariance_trace: np.ndarray
    responsibilities: np.ndarray


def sample_data(
    spec: MixtureSpec, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """i.i.d. draws (x, label); label is None for unlabeled specs."""
    if n < 1:
        raise DomainError("n must be >= 1")
    comp = rng.choice(spec.n_components, size=n, p=spec.weights)
    x = spec.means[comp] + np.sqrt(spec.variances[comp])[:, None] * rng.standard_normal(
        (n, spec.dim)
    )
    if spec.labels is None:
        return x, None
    return x, spec.labels[comp]


def _as_batch(x_t, t) -> tuple[np.ndarray, np.ndarray, bool]:
    """Normalize inputs to x (n, d), t (n, 1); report if input was a single row."""
    x = as_tensor(x_t)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t_arr = as_tensor(t)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError("t must lie in [0,1]")
    t_col = np.broadcast_to(t_arr.reshape(-1, 1) if t_arr.ndim else t_arr, (x.shape[0], 1))
    return x, np.ascontiguousarray(t_col), single


def _core(spec: MixtureSpec, x: np.ndarray, t: np.ndarray):
    """Shared posterior pieces: responsibilities r (n,K), centered points
    g = x_t - (1-t) mu_k (n,K,d), mixing variances c = (1-t)^2 sig^2 + t^2 (n,K)."""
    a = 1.0 - t
    sig2 = spec.variances[None, :]
    c = a * a * sig2 + t * t
    g = x[:, None, :] - a[:, :, None] * spec.means[None, :, :]
    quad = np.einsum("nkd,nkd->nk", g, g)
    degen = c == 0.0  # only possible at t == 0 with a zero-variance component
    c_safe = np.where(degen, 1.0, c)
    logp = (
        np.log(spec.weights)[None, :]
        - 0.5 * quad / c_safe
        - 0.5 * spec.dim * (np.log(c_safe) + _LOG_2PI)
    )
    if degen.any():
        logp = np.where(degen, np.where(quad == 0.0, np.inf, -np.inf), logp)
    top = logp.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        r = np.exp(logp - top)
    r = np.where(
        np.isnan(r), np.where(np.isposinf(logp), spec.weights[None, :], 0.0), r
    )
    total = r.sum(axis=1, keepdims=True)
    bad = total[:, 0] == 0.0
    if bad.any():
        # Off-support query against a degenerate spec: fall back to priors.
        r[bad] = spec.weights[None, :]
        total = r.sum(axis=1, keepdims=True)
    r = r / total
    return r, g, c, c_safe, a


def posterior_moments(spec: MixtureSpec, x_t, t) -> PosteriorMoments:
    """Exact conjugate posterior of x given x_t = (1-t)x + t*eps.

    Per component k: x_t | k ~ N((1-t)mu_k, c_k I) with
    c_k = (1-t)^2 sigma_k^2 + t^2; responsibilities by Bayes;
    m_k = mu_k + (1-t)sigma_k^2/c_k * (x_t - (1-t)mu_k);
    v_k = sigma_k^2 t^2 / c_k per dimension; mixture moments by the law of
    total variance. At t = 0 the posterior is the Dirac at x_t.
    """
    x, t_col, single = _as_batch(x_t, t)
    if x.shape[1] != spec.dim:
        raise DimensionError(f"x_t has dim {x.shape[1]}, spec has {spec.dim}")
    r, g, c, c_safe, a = _core(spec, x, t_col)
    sig2 = spec.variances[None, :]
    coef = np.where(c == 0.0, 0.0, a * sig2 / c_safe)
    m = spec.means[None, :, :] + coef[:, :, None] * g
    v = np.where(c == 0.0, 0.0, sig2 * t_col * t_col / c_safe)
    mean = np.einsum("nk,nkd->nd", r, m)
    spread = m - mean[:, None, :]
    trace = np.einsum(
        "nk,nk->n", r, spec.dim * v + np.einsum("nkd,nkd->nk", spread, spread)
    )
    # t == 0 rows: Dirac at x_t regardless of component variances.
    at0 = t_col[:, 0] == 0.0
    if at0.any():
        mean = np.where(at0[:, None], x, mean)
        trace = np.where(at0, 0.0, trace)
    if single:
        return PosteriorMoments(mean[0], float(trace[0]), r[0])
    return PosteriorMoments(mean, trace, r)


def _velocity_parts(spec: MixtureSpec, x: np.ndarray, t_col: np.ndarray):
    """Per-component velocities w_k = (x_t - m_k)/t in cancellation-free form:
    w_k = g_k (t - (1-t)sigma_k^2)/c_k - mu_k, finite for all t including 0."""
    r, g, c, c_safe, a = _core(spec, x, t_col)
    sig2 = spec.variances[None, :]
    degen = c == 0.0
    coef = np.where(degen, 0.0, (t_col - a * sig2) / c_safe)
    w = coef[:, :, None] * g - spec.means[None, :, :]
    u = np.einsum("nk,nkd->nd", r, w)
    return r, w, u, c, c_safe, degen


def marginal_velocity(spec: MixtureSpec, x_t, t) -> np.ndarray:
    """u_t(x_t) = (x_t - E[x|x_t])/t for t > 0; u_0 = -x_t."""
    x, t_col, single = _as_batch(x_t, t)
    if x.shape[1] != spec.dim:
        raise DimensionError(f"x_t has dim {x.shape[1]}, spec has {spec.dim}")
    r, w, u, c, c_safe, degen = _velocity_parts(spec, x, t_col)
    at0 = t_col[:, 0] == 0.0
    if at0.any():
        u = np.where(at0[:, None], -x, u)
    return u[0] if single else u


def velocity_covariance(spec: MixtureSpec, x_t, t) -> np.ndarray | float:
    """Tr Sigma_t(x_t) = Tr Var(v_t | x_t); equals Tr Var(x|x_t)/t^2 for
    t > 0 and d (the dimension) at t = 0, where the velocity is -x + eps
    with eps ~ N(0, I) independent of x_t."""
    x, t_col, single = _as_batch(x_t, t)
    if x.shape[1] != spec.dim:
        raise DimensionError(f"x_t has dim {x.shape[1]}, spec has {spec.dim}")
    r, w, u, c, c_safe, degen = _velocity_parts(spec, x, t_col)
    sig2 = spec.variances[None, :]
    per_dim = np.where(degen, 0.0, sig2 / c_safe)
    spread = w - u[:, None, :]
    tr = np.einsum(
        "nk,nk->n", r, spec.dim * per_dim + np.einsum("nkd,nkd->nk", spread, spread)
    )
    at0 = t_col[:, 0] == 0.0
    if at0.any():
        tr = np.where(at0, float(spec.dim), tr)
    return float(tr[0]) if single else tr


def posterior_sample(
    spec: MixtureSpec, x_t, t, rng: np.random.Generator
) -> np.ndarray:
    """One exact draw from p(x | x_t) per row: component from the
    responsibilities, then the conjugate per-component Gaussian."""
    x, t_col, single = _as_batch(x_t, t)
    r, g, c, c_safe, a = _core(spec, x, t_col)
    n = x.shape[0]
    # Inverse-CDF over components, one uniform per row.
    cum = np.cumsum(r, axis=1)
    pick = (rng.random((n, 1)) > cum).sum(axis=1)
    pick = np.minimum(pick, spec.n_components - 1)
    rows = np.arange(n)
    sig2 = spec.variances[pick]
    c_pick = c[rows, pick]
    degen = c_pick == 0.0
    c_pick_safe = np.where(degen, 1.0, c_pick)
    coef = np.where(degen, 0.0, a[:, 0] * sig2 / c_pick_safe)
    m = spec.means[pick] + coef[:, None] * g[rows, pick]
    v = np.where(degen, 0.0, sig2 * t_col[:, 0] ** 2 / c_pick_safe)
    at0 = t_col[:, 0] == 0.0
    m = np.where(at0[:, None], x, m)
    v = np.where(at0, 0.0, v)
    out = m + np.sqrt(v)[:, None] * rng.standard_normal((n, spec.dim))
    return out[0] if single else out


def reference_flow_map(
    spec: MixtureSpec, x_t, s: float, t: float, n_steps: int = 1024
) -> np.ndarray:
    """Integrate dx/dtau = u_tau(x) from t backward to s with classic RK4
    over n_steps uniform substeps."""
    return _integrate(spec, x_t, s, t, n_steps)[0]


def reference_trajectory(
    spec: MixtureSpec, x_t, s: float, t: float, n_steps: int = 1024
) -> tuple[np.ndarray, np.ndarray]:
    """As reference_flow_map but returning (times (m+1,), states (m+1, n, d))
    with times[0] = t descending to times[-1] = s."""
    _, times, states = _integrate(spec, x_t, s, t, n_steps, record=True)
    return times, states


def _integrate(spec, x_t, s, t, n_steps, record=False):
    if not 0.0 <= s <= t <= 1.0:
        raise DomainError(f"need 0 <= s <= t <= 1, got s={s}, t={t}")
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    x, _, single = _as_batch(x_t, t)
    if s == t:
        out = x[0].copy() if single else x.copy()
        if record:
            return out, np.array([t]), x[None, :, :].copy()
        return out, None, None
    times = np.linspace(t, s, n_steps + 1)
    states = np.empty((n_steps + 1,) + x.shape) if record else None
    if record:
        states[0] = x
    h = (s - t) / n_steps
    for i in range(n_steps):
        tau = times[i]
        k1 = marginal_velocity(spec, x, tau)
        k2 = marginal_velocity(spec, x + 0.5 * h * k1, tau + 0.5 * h)
        k3 = marginal_velocity(spec, x + 0.5 * h * k2, tau + 0.5 * h)
        k4 = marginal_velocity(spec, x + h * k3, times[i + 1])
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record:
            states[i + 1] = x
    check_finite(x, "flow map state")
    return (x[0] if single else x), times, states


def average_velocity_oracle(
    spec: MixtureSpec, x_t, s: float, t: float, n_steps: int = 1024
) -> np.ndarray:
    """Exact average velocity (x_t - Phi(x_t, s, t))/(t - s), the field a
    flow-map model should learn."""
    if s == t:
        raise DomainError("average velocity needs s < t; use marginal_velocity")
    x = as_tensor(x_t)
    endpoint = reference_flow_map(spec, x_t, s, t, n_steps)
    return (x - endpoint) / (t - s)
