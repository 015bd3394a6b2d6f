"""Training loop: batch assembly, guidance dropout and scale sampling,
batch splitting between the consistency and rectification objectives,
Adam updates for the main and auxiliary fields, EMA, and checkpointing."""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, checkpoint_save
from .coupling import (
    TimeSamplerConfig,
    cfg_velocity,
    make_coupling,
    sample_time_pairs,
    sample_times,
)
from .csvio import write_csv
from .engine import DomainError, NumericError, value_and_grad
from .mixtures import MixtureSpec, sample_data
from .network import NULL_LABEL, EmaShadow, NetLayout, VelocityMLP, transplant
from .objectives import (
    AdaptiveWeightConfig,
    LossReport,
    consistency_loss,
    draw_rectification,
    flowconsist_target,
    gpsi_loss,
    meanflow_target,
    rectification_loss,
    rectification_loss_dmd,
    rectification_target,
)
from .optim import OptimizerState, adam_update

OBJECTIVES = ("fm", "meanflow", "flowconsist", "cm")
RECTIFY_STYLES = ("paper", "dmd")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "flowconsist"
    batch_size: int = 256
    total_steps: int = 20_000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    rectify_ratio: float = 0.3
    rectify_warmup_frac: float = 0.25
    rectify_style: str = "paper"
    equal_st_prob: float = 0.6
    time_mu: float = -0.4
    time_sigma: float = 1.0
    use_cfg: bool = False
    cfg_drop_prob: float = 0.1
    cfg_omega_range: tuple = (1.0, 4.0)
    cfg_interval: tuple = (0.0, 0.75)
    adaptive_p: float = 1.0
    adaptive_c: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise DomainError(f"objective must be one of {OBJECTIVES}")
        if self.rectify_style not in RECTIFY_STYLES:
            raise DomainError(f"rectify_style must be one of {RECTIFY_STYLES}")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise DomainError("total_steps must be >= 0")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise DomainError("adam betas must lie in [0,1)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise DomainError("ema_decay must lie in [0,1]")
        for name, p in (
            ("rectify_ratio", self.rectify_ratio),
            ("rectify_warmup_frac", self.rectify_warmup_frac),
            ("equal_st_prob", self.equal_st_prob),
            ("cfg_drop_prob", self.cfg_drop_prob),
        ):
            if not 0.0 <= p <= 1.0:
                raise DomainError(f"{name} must lie in [0,1]")
        lo, hi = self.cfg_omega_range
        if lo < 1.0 or hi < lo:
            raise DomainError("cfg_omega_range needs 1 <= lo <= hi")
        a, b = self.cfg_interval
        if not 0.0 <= a <= b <= 1.0:
            raise DomainError("cfg_interval needs 0 <= a <= b <= 1")
        AdaptiveWeightConfig(p=self.adaptive_p, c=self.adaptive_c)


@dataclass
class StepReport:
    step: int
    objective: str
    loss: float
    consistency: LossReport | None
    rectification: LossReport | None
    gpsi: LossReport | None
    omega_mean: float
    cfg_gate_frac: float
    wall_ms: float

    def mean_residual_norm(self) -> float:
        parts = [
            r.residual_norms
            for r in (self.consistency, self.rectification)
            if r is not None
        ]
        return float(np.mean(np.concatenate(parts))) if parts else 0.0

    def mean_target_norm(self) -> float:
        parts = [
            np.linalg.norm(r.targets, axis=1)
            for r in (self.consistency, self.rectification)
            if r is not None
        ]
        return float(np.mean(np.concatenate(parts))) if parts else 0.0


def effective_velocity(
    net: VelocityMLP,
    params: np.ndarray,
    x_t: np.ndarray,
    t: np.ndarray,
    v: np.ndarray,
    labels: np.ndarray | None,
    omega: np.ndarray | None,
    interval: tuple,
) -> tuple[np.ndarray, np.ndarray]:
    """Guidance-modified velocity target and the gate mask that received it.

    Rows with t inside [interval] and a present (non-null) label get
    v + (1 - 1/omega) * (F(x,t,t | c, omega) - F(x,t,t | null, omega));
    all other rows keep the plain conditional velocity v.
    """
    n = x_t.shape[0]
    if omega is None or labels is None:
        return v.copy(), np.zeros(n, dtype=bool)
    a, b = interval
    gate = (t >= a) & (t <= b) & (labels != NULL_LABEL)
    v_eff = v.copy()
    if gate.any():
        xg, tg, og = x_t[gate], t[gate], omega[gate]
        f_cond = net.apply(params, xg, s=tg, t=tg, omega=og, label=labels[gate])
        f_null = net.apply(
            params,
            xg,
            s=tg,
            t=tg,
            omega=og,
            label=np.full(int(gate.sum()), NULL_LABEL, dtype=np.int64),
        )
        v_eff[gate] = cfg_velocity(v[gate], f_cond, f_null, og)
    return v_eff, gate


class Trainer:
    """Owns the mutable training state: parameters, optimizer moments, EMA,
    RNG streams, and the step counter. step() is deterministic given the
    construction seed."""

    def __init__(
        self,
        cfg: TrainConfig,
        spec: MixtureSpec,
        hidden: int = 128,
        depth: int = 3,
        emb_dim: int = 32,
    ):
        self.cfg = cfg
        self.spec = spec
        labeled = spec.labels is not None
        if cfg.use_cfg and not labeled:
            raise DomainError("guidance training needs a labeled mixture")
        scalars = ("s", "t") + (("omega",) if cfg.use_cfg else ())
        self.f_net = VelocityMLP(
            NetLayout(
                dim=spec.dim,
                hidden=hidden,
                depth=depth,
                scalars=scalars,
                emb_dim=emb_dim,
                n_classes=spec.n_classes if labeled else 0,
            )
        )
        self.g_net = VelocityMLP(
            NetLayout(
                dim=spec.dim,
                hidden=hidden,
                depth=depth,
                scalars=("t", "tprime"),
                emb_dim=emb_dim,
            )
        )
        ss = np.random.SeedSequence(cfg.seed)
        s_init, s_data = ss.spawn(2)
        init_rng = np.random.default_rng(s_init)
        self.rng = np.random.default_rng(s_data)
        self.f_params = self.f_net.init_params(init_rng)
        self.g_params = self.g_net.init_params(init_rng)
        self.ema = EmaShadow(self.f_params, cfg.ema_decay)
        self.f_opt = OptimizerState.zeros(self.f_params.size)
        self.g_opt = OptimizerState.zeros(self.g_params.size)
        self.step_count = 0
        self.g_started = False
        self.time_cfg = TimeSamplerConfig(
            mu=cfg.time_mu, sigma=cfg.time_sigma, equal_prob=cfg.equal_st_prob
        )
        self.weight_cfg = AdaptiveWeightConfig(p=cfg.adaptive_p, c=cfg.adaptive_c)
        self.warmup_steps = int(round(cfg.total_steps * cfg.rectify_warmup_frac))
        # The delta map starts distilling halfway through the warmup so the
        # rectification target never points at an untrained G.
        self.g_warmup_steps = self.warmup_steps // 2

    # -- batch assembly -----------------------------------------------------

    def _draw_labels(self, labels: np.ndarray | None, n: int) -> np.ndarray | None:
        if labels is None:
            return None
        kept = labels.copy()
        drop = self.rng.random(n) < self.cfg.cfg_drop_prob
        kept[drop] = NULL_LABEL
        return kept

    def _draw_omega(self, n: int) -> np.ndarray | None:
        if not self.cfg.use_cfg:
            return None
        lo, hi = self.cfg.cfg_omega_range
        return self.rng.uniform(lo, hi, n)

    def _consistency_times(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        obj = self.cfg.objective
        if obj == "fm":
            t = sample_times(self.rng, self.time_cfg, n)
            return t.copy(), t
        if obj == "cm":
            t = sample_times(self.rng, self.time_cfg, n)
            eq = self.rng.random(n) < self.cfg.equal_st_prob
            s = np.where(eq, t, 0.0)
            return s, t
        pair = sample_time_pairs(self.rng, self.time_cfg, n)
        return pair

    # -- one step -----------------------------------------------------------

    def step(self) -> StepReport:
        """One optimization step. State is mutated only after every gradient
        is verified finite, so a raised numeric error leaves the trainer
        exactly as it was."""
        cfg = self.cfg
        t_start = time.perf_counter()
        b = cfg.batch_size
        g_on = (
            cfg.rectify_ratio > 0.0
            and cfg.total_steps > 0
            and self.step_count >= self.g_warmup_steps
        )
        n_rect = int(round(b * cfg.rectify_ratio)) if g_on else 0
        rect_on = n_rect > 0 and self.step_count >= self.warmup_steps
        n_cons = b - n_rect

        x, labels = sample_data(self.spec, self.rng, b)
        eps = self.rng.standard_normal((b, self.spec.dim))

        reports: dict[str, LossReport | None] = {
            "consistency": None,
            "rectification": None,
            "gpsi": None,
        }
        terms = []
        omega_all = []
        gate_count, gate_total = 0, 0

        if n_cons > 0:
            s_c, t_c = self._consistency_times(n_cons)
            lab_c = self._draw_labels(
                None if labels is None else labels[:n_cons], n_cons
            )
            om_c = self._draw_omega(n_cons)
            sample_c = make_coupling(x[:n_cons], eps[:n_cons], t_c, lab_c)
            v_eff, gate = effective_velocity(
                self.f_net,
                self.f_params,
                sample_c.x_t,
                t_c,
                sample_c.v_t,
                lab_c,
                om_c,
                cfg.cfg_interval,
            )
            gate_count += int(gate.sum())
            gate_total += n_cons
            if om_c is not None:
                omega_all.append(om_c)
            if cfg.objective in ("fm",):
                target_c = v_eff
            elif cfg.objective == "meanflow":
                target_c = meanflow_target(
                    self.f_net, self.f_params, sample_c, s_c, t_c, v_eff, om_c
                )
            else:  # flowconsist and its cm specialization share the target
                target_c = flowconsist_target(
                    self.f_net, self.f_params, sample_c, s_c, t_c, v_eff, om_c
                )

            def cons_term(p):
                loss, rep = consistency_loss(
                    self.f_net, p, sample_c, s_c, t_c, target_c, self.weight_cfg, om_c
                )
                reports["consistency"] = rep
                return loss * (n_cons / b)

            terms.append(cons_term)

        g_grad = None
        if n_rect > 0:
            if not self.g_started:
                self.g_params = transplant(
                    self.g_net,
                    self.g_params,
                    self.f_net,
                    self.f_params,
                    aliases={"emb_t": "emb_s", "emb_tprime": "emb_t"},
                )
                self.g_opt = OptimizerState.zeros(self.g_params.size)
                self.g_started = True
            t_r = sample_times(self.rng, self.time_cfg, n_rect)
            lab_r = self._draw_labels(
                None if labels is None else labels[n_cons:], n_rect
            )
            om_r = self._draw_omega(n_rect)
            if om_r is not None:
                omega_all.append(om_r)
            sample_r = make_coupling(x[n_cons:], eps[n_cons:], t_r, lab_r)
            draw = draw_rectification(
                self.f_net, self.f_params, sample_r, self.rng, self.time_cfg, om_r
            )

            def g_loss(p):
                loss, rep = gpsi_loss(self.g_net, p, sample=sample_r, draw=draw)
                reports["gpsi"] = rep
                return loss

            _, g_grad = value_and_grad(g_loss, self.g_params)

        if rect_on:
            if cfg.rectify_style == "paper":
                _, target_r = rectification_target(
                    self.f_net,
                    self.f_params,
                    self.g_net,
                    self.g_params,
                    sample_r,
                    draw=draw,
                    omega=om_r,
                )

                def rect_term(p):
                    loss, rep = rectification_loss(
                        self.f_net, p, sample_r, target_r, self.weight_cfg, om_r
                    )
                    reports["rectification"] = rep
                    return loss * (n_rect / b)

            else:

                def rect_term(p):
                    loss, rep = rectification_loss_dmd(
                        self.f_net,
                        p,
                        self.f_params,
                        self.g_net,
                        self.g_params,
                        sample_r,
                        draw,
                        om_r,
                    )
                    reports["rectification"] = rep
                    return loss * (n_rect / b)

            terms.append(rect_term)

        def f_loss(p):
            total = terms[0](p)
            for term in terms[1:]:
                total = total + term(p)
            return total

        if terms:
            loss_value, f_grad = value_and_grad(f_loss, self.f_params)
        else:
            # Everything routed to G this step (ratio 1 during priming).
            loss_value, f_grad = 0.0, None

        # All gradients exist and are finite: commit the update.
        if f_grad is not None:
            self.f_params = adam_update(
                self.f_opt,
                self.f_params,
                f_grad,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
        self.ema.update(self.f_params)
        if g_grad is not None:
            self.g_params = adam_update(
                self.g_opt,
                self.g_params,
                g_grad,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
        self.step_count += 1

        omega_mean = float(np.mean(np.concatenate(omega_all))) if omega_all else 1.0
        return StepReport(
            step=self.step_count,
            objective=cfg.objective,
            loss=float(loss_value),
            consistency=reports["consistency"],
            rectification=reports["rectification"],
            gpsi=reports["gpsi"],
            omega_mean=omega_mean,
            cfg_gate_frac=float(gate_count / gate_total) if gate_total else 0.0,
            wall_ms=(time.perf_counter() - t_start) * 1e3,
        )

    def checkpoint(self, config_hash: str = "") -> Checkpoint:
        include_g = self.g_started
        return Checkpoint(
            f_layout=self.f_net.layout,
            f_params=self.f_params.copy(),
            ema=self.ema.values.copy(),
            step=self.step_count,
            config_hash=config_hash,
            g_layout=self.g_net.layout if include_g else None,
            g_params=self.g_params.copy() if include_g else None,
            f_opt=OptimizerState(self.f_opt.m.copy(), self.f_opt.v.copy(), self.f_opt.count),
            g_opt=(
                OptimizerState(self.g_opt.m.copy(), self.g_opt.v.copy(), self.g_opt.count)
                if include_g
                else None
            ),
        )


METRICS_HEADER = (
    "step",
    "objective",
    "loss",
    "mean_residual_norm",
    "mean_target_norm",
    "omega_mean",
    "wall_ms",
)


def hash_run(cfg: TrainConfig, spec: MixtureSpec) -> str:
    h = hashlib.sha256()
    h.update(repr(cfg).encode())
    h.update(spec.weights.tobytes())
    h.update(spec.means.tobytes())
    h.update(spec.variances.tobytes())
    if spec.labels is not None:
        h.update(spec.labels.tobytes())
    return h.hexdigest()[:16]


def run_training(
    cfg: TrainConfig,
    spec: MixtureSpec,
    out_dir: str,
    hidden: int = 128,
    depth: int = 3,
    emb_dim: int = 32,
    metrics_every: int = 50,
    checkpoint_every: int | None = None,
    config_hash: str | None = None,
) -> tuple[Trainer, str, str]:
    """Full run: total_steps optimization steps, metrics CSV, and a final
    checkpoint. Returns (trainer, metrics_path, checkpoint_path)."""
    trainer = Trainer(cfg, spec, hidden=hidden, depth=depth, emb_dim=emb_dim)
    chash = hash_run(cfg, spec) if config_hash is None else config_hash
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "checkpoint.fck")
    rows: list[tuple] = []

    def flush():
        write_csv(
            metrics_path,
            METRICS_HEADER,
            rows,
            {"config_hash": chash, "seed": cfg.seed},
        )

    try:
        for i in range(cfg.total_steps):
            report = trainer.step()
            if (i + 1) % metrics_every == 0 or i + 1 == cfg.total_steps:
                rows.append(
                    (
                        report.step,
                        report.objective,
                        report.loss,
                        report.mean_residual_norm(),
                        report.mean_target_norm(),
                        report.omega_mean,
                        report.wall_ms,
                    )
                )
            if checkpoint_every and (i + 1) % checkpoint_every == 0:
                checkpoint_save(
                    os.path.join(out_dir, f"checkpoint_{i + 1:07d}.fck"),
                    trainer.checkpoint(chash),
                )
    finally:
        flush()
        checkpoint_save(ckpt_path, trainer.checkpoint(chash))
    return trainer, metrics_path, ckpt_path
