"""Command-line surface: train, sample, diagnose, sweep-omega, config-default.

Exit codes: 0 success; 2 invalid config, arguments, or checkpoint; 3 numeric
failure during training; 4 a diagnostics assertion landed outside its band
(the experiment CSV is still written).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load
from .config import (
    ConfigError,
    EXPERIMENTS,
    default_config_text,
    hash_config,
    load_config,
)
from .coupling import TimeSamplerConfig
from .csvio import write_csv
from .diagnostics import (
    DiagnosticsRecord,
    accumulation_experiment,
    appendix_identity_check,
    drift_experiment,
    sample_quality,
    theorem1_check,
    theorem2_check,
    theorem3_check,
    write_records,
)
from .engine import DimensionError, DomainError, NumericError
from .mixtures import sample_data
from .network import NetLayout, VelocityMLP
from .sampling import MODES, SamplerConfig, generate, omega_sweep
from .training import run_training

OUT_ROOT_ENV = "FLOWLAB_OUT_ROOT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


class _BoundNet:
    """Pins guidance inputs so identity checks see a plain (x, s, t) field."""

    def __init__(self, net: VelocityMLP, omega: float = 1.0):
        self.net = net
        self.layout = net.layout
        self._omega = omega

    def _omega_arg(self, omega):
        return self._omega if omega is None else omega

    def apply(self, params, x, *, s=None, t=None, omega=None, label=None):
        return self.net.apply(
            params, x, s=s, t=t, omega=self._omega_arg(omega), label=label
        )

    def apply_jvp(self, params, x, *, s=None, t=None, omega=None, label=None, dir_x, dir_t):
        return self.net.apply_jvp(
            params,
            x,
            s=s,
            t=t,
            omega=self._omega_arg(omega),
            label=label,
            dir_x=dir_x,
            dir_t=dir_t,
        )


def _plain_field(net):
    if "omega" in net.layout.scalars:
        return _BoundNet(net)
    return net


def _network_source(source: str, cfg):
    """(net, params, params_list) from a checkpoint path or 'analytic'.

    Analytic mode builds a deterministic randomly initialized field at the
    configured architecture; identity checks hold for arbitrary parameters.
    """
    if source and source != "analytic":
        ckpt = checkpoint_load(source)
        net = VelocityMLP(ckpt.f_layout)
        return net, ckpt.ema, [ckpt.f_params, ckpt.ema]
    layout = NetLayout(
        dim=cfg.mixture.dim,
        hidden=cfg.network.hidden,
        depth=cfg.network.depth,
        scalars=("s", "t"),
        emb_dim=cfg.network.emb_dim,
    )
    net = VelocityMLP(layout)
    rng = np.random.default_rng(cfg.seed)
    base = net.init_params(rng)
    p0 = base + 0.1 * rng.standard_normal(base.shape)
    p1 = base + 0.3 * rng.standard_normal(base.shape)
    return net, p0, [p0, p1]


def _run_omega_sweep(cfg, net, params, rng):
    if "omega" not in net.layout.scalars:
        raise DomainError("omega_sweep needs a guidance-conditioned checkpoint")
    n = min(cfg.diagnostics.n_sweep, 2048)
    reference, _ = sample_data(cfg.mixture, rng, n)
    base = SamplerConfig(
        nfe=cfg.sampler.nfe, mode=cfg.sampler.mode, omega=None, label=cfg.sampler.label
    )
    scored = omega_sweep(
        net,
        params,
        rng,
        cfg.diagnostics.omegas,
        lambda x: sample_quality(x, reference),
        base,
        n,
    )
    records = [DiagnosticsRecord("omega_sweep", float(w), float(v)) for w, v in scored]
    return records, []


def _run_experiment(experiment: str, cfg, rng, source: str):
    spec = cfg.mixture
    dcfg = cfg.diagnostics
    time_cfg = TimeSamplerConfig(
        mu=cfg.train.time_mu,
        sigma=cfg.train.time_sigma,
        equal_prob=cfg.train.equal_st_prob,
    )
    if experiment == "drift":
        return drift_experiment(spec, rng, dcfg.t_grid, dcfg.n_paths), []
    if experiment == "thm1":
        res = theorem1_check(spec, rng, dcfg.n_points, time_cfg)
        return res.records, res.failures

    net, params, params_list = _network_source(source, cfg)
    field = _plain_field(net)
    if experiment == "thm2":
        res = theorem2_check(spec, field, params, rng, dcfg.n_mc, time_cfg)
        return res.records, res.failures
    if experiment == "appendix":
        res = appendix_identity_check(spec, field, params_list, rng, dcfg.n_mc, time_cfg)
        return res.records, res.failures
    if experiment == "thm3":
        res = theorem3_check(
            spec,
            field,
            params,
            dcfg.span_start,
            dcfg.span_end,
            rng,
            n_quad=dcfg.n_quad,
        )
        return res.records, res.failures
    if experiment == "accumulation":
        records = accumulation_experiment(
            spec, field, params, dcfg.t_grid, rng, n_paths=dcfg.n_paths
        )
        return records, []
    return _run_omega_sweep(cfg, net, params, rng)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = _resolve_out(args.out or cfg.output_dir)
    trainer, metrics_path, ckpt_path = run_training(
        cfg.train,
        cfg.mixture,
        out_dir,
        hidden=cfg.network.hidden,
        depth=cfg.network.depth,
        emb_dim=cfg.network.emb_dim,
        metrics_every=args.metrics_every,
        checkpoint_every=args.checkpoint_every,
        config_hash=hash_config(cfg),
    )
    print(f"trained {trainer.step_count} steps: {metrics_path}, {ckpt_path}")
    return 0


def cmd_sample(args) -> int:
    if args.n < 0:
        raise DomainError("--n must be >= 0")
    ckpt = checkpoint_load(args.checkpoint)
    net = VelocityMLP(ckpt.f_layout)
    params = ckpt.ema if args.weights == "ema" else ckpt.f_params
    smp = SamplerConfig(nfe=args.nfe, mode=args.mode, omega=args.omega, label=args.label)
    rng = np.random.default_rng(args.seed)
    header = tuple(f"x{i}" for i in range(ckpt.f_layout.dim))
    rows: list = []
    if args.n > 0:
        x = generate(net, params, rng, smp, args.n)
        rows = [tuple(float(v) for v in row) for row in x]
    out = _resolve_out(args.out)
    metadata = {
        "config_hash": ckpt.config_hash or "none",
        "seed": args.seed,
        "nfe": args.nfe,
        "mode": args.mode,
    }
    if args.omega is not None:
        metadata["omega"] = args.omega
    if args.label is not None:
        metadata["label"] = args.label
    write_csv(out, header, rows, metadata=metadata)
    print(f"wrote {len(rows)} samples -> {out}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    rng = np.random.default_rng(cfg.seed)
    records, failures = _run_experiment(args.experiment, cfg, rng, args.checkpoint)
    out_dir = _resolve_out(args.out or cfg.output_dir)
    path = os.path.join(out_dir, f"diag_{args.experiment}.csv")
    write_records(
        path,
        records,
        metadata={
            "config_hash": hash_config(cfg),
            "seed": cfg.seed,
            "experiment": args.experiment,
        },
    )
    for failure in failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    print(f"{args.experiment}: {len(records)} records -> {path}")
    return 4 if failures else 0


def cmd_sweep_omega(args) -> int:
    args.experiment = "omega_sweep"
    return cmd_diagnose(args)


def cmd_config_default(args) -> int:
    text = default_config_text()
    if args.out:
        out = _resolve_out(args.out)
        parent = os.path.dirname(os.path.abspath(out))
        os.makedirs(parent, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(text)
        print(f"wrote {out}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowlab",
        description="Train, sample, and verify fast flow-map generative models "
        "on closed-form Gaussian mixtures.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model from a YAML config")
    tr.add_argument("--config", required=True, help="YAML run configuration")
    tr.add_argument("--out", default=None, help="override the config output_dir")
    tr.add_argument("--metrics-every", type=int, default=50)
    tr.add_argument("--checkpoint-every", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    sa = sub.add_parser("sample", help="draw samples from a checkpoint")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--n", type=int, default=4096, help="number of samples")
    sa.add_argument("--nfe", type=int, default=1, help="function evaluations")
    sa.add_argument("--mode", choices=MODES, default="flow_map_jumps")
    sa.add_argument("--omega", type=float, default=None, help="guidance strength")
    sa.add_argument("--label", type=int, default=None, help="class to generate")
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--weights", choices=("ema", "raw"), default="ema")
    sa.add_argument("--out", required=True, help="output CSV path")
    sa.set_defaults(func=cmd_sample)

    di = sub.add_parser("diagnose", help="run one verification experiment")
    di.add_argument("experiment", choices=EXPERIMENTS)
    di.add_argument("--config", required=True)
    di.add_argument(
        "--checkpoint",
        default="analytic",
        help="checkpoint path, or 'analytic' for a seeded random field",
    )
    di.add_argument("--out", default=None, help="override the config output_dir")
    di.set_defaults(func=cmd_diagnose)

    sw = sub.add_parser("sweep-omega", help="sample quality across guidance strengths")
    sw.add_argument("--checkpoint", required=True)
    sw.add_argument("--config", required=True)
    sw.add_argument("--out", default=None)
    sw.set_defaults(func=cmd_sweep_omega)

    cd = sub.add_parser("config-default", help="emit the documented default config")
    cd.add_argument("--out", default=None, help="write to a file instead of stdout")
    cd.set_defaults(func=cmd_config_default)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, DimensionError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
