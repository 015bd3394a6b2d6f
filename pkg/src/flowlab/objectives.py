"""Training targets and losses: velocity regression, average-velocity
consistency, the auxiliary fake-velocity regression, and trajectory
rectification.

Every target builder runs on plain parameter arrays and returns plain
arrays, so targets are constants for any later gradient computation. That
is the whole stop-gradient discipline: there is no detach() to forget,
because the tape never sees a target being built.

Loss evaluators accept either plain params (returning floats, used for
reporting) or an engine.Var leaf (recording the tape the trainer
differentiates). Both run the same code, so reported values match trained
values bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .coupling import CouplingSample, TimeSamplerConfig, interpolate, sample_times
from .engine import DimensionError, DomainError, as_tensor, mean_all, sum_rows
from .network import VelocityMLP


@dataclass(frozen=True)
class AdaptiveWeightConfig:
    """Per-sample weight 1/(||residual||^2 + c)^p, applied as a constant."""

    p: float = 1.0
    c: float = 1e-3

    def __post_init__(self):
        if self.p < 0:
            raise DomainError("p must be >= 0")
        if self.c <= 0:
            raise DomainError("c must be > 0")


@dataclass
class LossReport:
    """loss is the weighted mean of squared residual norms; targets are the
    pre-stop-gradient snapshot actually regressed against."""

    loss: float
    residual_norms: np.ndarray
    targets: np.ndarray
    weights: np.ndarray


def adaptive_weight(residual_sq_norm, cfg: AdaptiveWeightConfig):
    r = as_tensor(residual_sq_norm)
    if np.any(r < 0):
        raise DomainError("squared residual norm must be >= 0")
    return (r + cfg.c) ** (-cfg.p)


def kl_weight(t):
    """(t-1)/t, the alignment weight; singular at t = 0."""
    t_arr = as_tensor(t)
    if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
        raise DomainError("kl weight needs t in (0, 1]")
    return (t_arr - 1.0) / t_arr


def _weighted_mse(pred, target: np.ndarray, weight_cfg: AdaptiveWeightConfig | None):
    """Shared reduction: mean_i w_i ||pred_i - target_i||^2 with w under
    stop-gradient. Returns (loss node/float, LossReport)."""
    r = pred - target
    sq = sum_rows(r * r)
    sq_plain = engine.primal_of(sq)
    if weight_cfg is None:
        w = np.ones(sq_plain.shape)
        loss = mean_all(sq)
    else:
        w = adaptive_weight(sq_plain, weight_cfg)
        loss = mean_all(sq * w)
    report = LossReport(
        loss=float(engine.primal_of(loss)),
        residual_norms=np.sqrt(sq_plain),
        targets=target,
        weights=w,
    )
    return loss, report


def _subset(value, mask):
    if value is None:
        return None
    arr = np.asarray(value)
    return arr[mask] if arr.ndim >= 1 else value


def fm_loss(
    net: VelocityMLP,
    params,
    sample: CouplingSample,
    weight_cfg: AdaptiveWeightConfig | None = None,
    omega=None,
):
    """Velocity regression at s = t against the pair's conditional velocity."""
    if len(sample) == 0:
        raise DimensionError("empty batch")
    pred = net.apply(
        params, sample.x_t, s=sample.t, t=sample.t, omega=omega, label=sample.label
    )
    return _weighted_mse(pred, sample.v_t, weight_cfg)


def meanflow_target(
    net: VelocityMLP,
    params: np.ndarray,
    sample: CouplingSample,
    s: np.ndarray,
    t: np.ndarray,
    v_eff: np.ndarray,
    omega=None,
) -> np.ndarray:
    """v_eff - (t-s) (dF/dx . v_eff + dF/dt): the average-velocity target
    whose total-derivative direction is the conditional velocity itself."""
    return _consistency_target(net, params, sample, s, t, v_eff, "conditional", omega)


def flowconsist_target(
    net: VelocityMLP,
    params: np.ndarray,
    sample: CouplingSample,
    s: np.ndarray,
    t: np.ndarray,
    v_eff: np.ndarray,
    omega=None,
) -> np.ndarray:
    """v_eff - (t-s) (dF/dx . u + dF/dt) with u = F(x_t, t, t), the model's
    own marginal-velocity estimate, as the trajectory direction."""
    return _consistency_target(net, params, sample, s, t, v_eff, "marginal", omega)


def cm_consistency_target(
    net: VelocityMLP,
    params: np.ndarray,
    sample: CouplingSample,
    t: np.ndarray,
    v_eff: np.ndarray,
    omega=None,
) -> np.ndarray:
    """flowconsist_target pinned to s = 0: endpoint-consistency training."""
    t_arr = np.broadcast_to(as_tensor(t), (len(sample),))
    return flowconsist_target(
        net, params, sample, np.zeros(len(sample)), t_arr, v_eff, omega
    )


def _consistency_target(net, params, sample, s, t, v_eff, direction: str, omega):
    params = as_tensor(params)
    n = len(sample)
    s = np.broadcast_to(as_tensor(s), (n,))
    t = np.broadcast_to(as_tensor(t), (n,))
    v_eff = as_tensor(v_eff)
    if np.any(s > t):
        raise DomainError("need s <= t")
    target = v_eff.copy()
    m = s < t
    if not m.any():
        return target
    x_m = sample.x_t[m]
    lab_m = _subset(sample.label, m)
    om_m = _subset(omega, m)
    if direction == "conditional":
        d = v_eff[m]
    else:
        d = net.apply(params, x_m, s=t[m], t=t[m], omega=om_m, label=lab_m)
    _, dF = net.apply_jvp(
        params, x_m, s=s[m], t=t[m], omega=om_m, label=lab_m, dir_x=d, dir_t=1.0
    )
    target[m] = v_eff[m] - (t[m] - s[m])[:, None] * dF
    return target


def consistency_loss(
    net: VelocityMLP,
    params,
    sample: CouplingSample,
    s: np.ndarray,
    t: np.ndarray,
    target: np.ndarray,
    weight_cfg: AdaptiveWeightConfig | None = None,
    omega=None,
):
    """||F(x_t, s, t) - target||^2 reduction used by every objective mode."""
    if len(sample) == 0:
        raise DimensionError("empty batch")
    pred = net.apply(params, sample.x_t, s=s, t=t, omega=omega, label=sample.label)
    return _weighted_mse(pred, target, weight_cfg)


# ---------------------------------------------------------------------------
# rectification


@dataclass
class RectificationDraw:
    """One sampled alignment configuration: model endpoint x0 from (x_t, t),
    fresh noise level tprime, noise eps_prime, and the re-noised point
    x_prime = tprime*eps_prime + (1-tprime)*x0. All plain arrays."""

    x0: np.ndarray
    tprime: np.ndarray
    eps_prime: np.ndarray
    x_prime: np.ndarray


def draw_rectification(
    f_net: VelocityMLP,
    f_params: np.ndarray,
    sample: CouplingSample,
    rng: np.random.Generator,
    time_cfg: TimeSamplerConfig,
    omega=None,
) -> RectificationDraw:
    if np.any(sample.t <= 0.0):
        raise DomainError("rectification needs t in (0, 1]")
    f0 = f_net.apply(
        as_tensor(f_params),
        sample.x_t,
        s=0.0,
        t=sample.t,
        omega=omega,
        label=sample.label,
    )
    x0 = sample.x_t - sample.t[:, None] * f0
    tprime = sample_times(rng, time_cfg, len(sample))
    eps_prime = rng.standard_normal(x0.shape)
    x_prime = interpolate(x0, eps_prime, tprime)
    return RectificationDraw(x0=x0, tprime=tprime, eps_prime=eps_prime, x_prime=x_prime)


def gpsi_loss(
    g_net: VelocityMLP,
    g_params,
    f_net: VelocityMLP = None,
    f_params: np.ndarray = None,
    sample: CouplingSample = None,
    rng: np.random.Generator = None,
    time_cfg: TimeSamplerConfig = None,
    draw: RectificationDraw | None = None,
    omega=None,
):
    """Conditional-velocity regression for the fake-marginal field G on
    re-noised model samples; the draw may be shared with rectification."""
    if draw is None:
        draw = draw_rectification(f_net, f_params, sample, rng, time_cfg, omega)
    pred = g_net.apply(g_params, draw.x_prime, t=sample.t, tprime=draw.tprime)
    return _weighted_mse(pred, draw.eps_prime - draw.x0, None)


def rectification_target(
    f_net: VelocityMLP,
    f_params: np.ndarray,
    g_net: VelocityMLP,
    g_params: np.ndarray,
    sample: CouplingSample,
    rng: np.random.Generator = None,
    time_cfg: TimeSamplerConfig = None,
    draw: RectificationDraw | None = None,
    omega=None,
) -> tuple[np.ndarray, np.ndarray]:
    """(prediction snapshot, frozen target) of the alignment loss
    ||F(x_t, 0, t) - sg(F(x', t', t') - G(x', t, t'))||^2.

    The re-noised point is drawn here unless a shared draw is supplied
    (the trainer reuses one draw for this target and the G regression).
    """
    f_params = as_tensor(f_params)
    if draw is None:
        draw = draw_rectification(f_net, f_params, sample, rng, time_cfg, omega)
    pred = f_net.apply(
        f_params, sample.x_t, s=0.0, t=sample.t, omega=omega, label=sample.label
    )
    f_real = f_net.apply(
        f_params,
        draw.x_prime,
        s=draw.tprime,
        t=draw.tprime,
        omega=omega,
        label=sample.label,
    )
    g_fake = g_net.apply(g_params, draw.x_prime, t=sample.t, tprime=draw.tprime)
    return pred, f_real - g_fake


def rectification_loss(
    f_net: VelocityMLP,
    params,
    sample: CouplingSample,
    target: np.ndarray,
    weight_cfg: AdaptiveWeightConfig | None = None,
    omega=None,
):
    """Regression of the live prediction F(x_t, 0, t) onto the frozen
    alignment target; gradient reaches the generator only through this
    prediction."""
    pred = f_net.apply(
        params, sample.x_t, s=0.0, t=sample.t, omega=omega, label=sample.label
    )
    return _weighted_mse(pred, target, weight_cfg)


def rectification_loss_dmd(
    f_net: VelocityMLP,
    params,
    f_params_plain: np.ndarray,
    g_net: VelocityMLP,
    g_params: np.ndarray,
    sample: CouplingSample,
    draw: RectificationDraw,
    omega=None,
):
    """Alternative surrogate whose gradient is the weighted velocity-gap
    form: E[w(t) (u_fake - u_real)^T dx'/dtheta], with w(t) = (t-1)/t.

    Returns (loss node/float, LossReport). The scalar surrogate value is not
    meaningful on its own; the report's loss records the mean squared gap
    ||u_fake - u_real||^2, which is the quantity worth watching.
    """
    u_fake = g_net.apply(g_params, draw.x_prime, t=sample.t, tprime=draw.tprime)
    u_real = f_net.apply(
        as_tensor(f_params_plain),
        draw.x_prime,
        s=draw.tprime,
        t=draw.tprime,
        omega=omega,
        label=sample.label,
    )
    gap = u_fake - u_real
    weights = kl_weight(sample.t)
    coef = weights[:, None] * gap
    f_live = f_net.apply(
        params, sample.x_t, s=0.0, t=sample.t, omega=omega, label=sample.label
    )
    t_col = sample.t[:, None]
    x0_live = sample.x_t - f_live * t_col
    x_prime_live = x0_live * (1.0 - draw.tprime[:, None]) + (
        draw.tprime[:, None] * draw.eps_prime
    )
    loss = mean_all(sum_rows(x_prime_live * coef))
    gap_sq = np.sum(np.asarray(gap) ** 2, axis=1)
    report = LossReport(
        loss=float(np.mean(gap_sq)),
        residual_norms=np.sqrt(gap_sq),
        targets=np.asarray(u_real),
        weights=np.asarray(weights),
    )
    return loss, report
