"""Run configuration: one YAML file describing data, model, training,
sampling, and diagnostics, with strict unknown-key rejection at every level
so hyperparameter typos fail before any compute is spent.

parse_config(serialize_config(cfg)) reproduces cfg exactly; the documented
reference file emitted by `config-default` parses to the all-defaults config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .mixtures import MixtureSpec, gaussian_ring, single_gaussian
from .sampling import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


EXPERIMENTS = ("drift", "thm1", "thm2", "thm3", "appendix", "accumulation", "omega_sweep")

MIXTURE_PRESETS = ("ring", "single", "custom")


@dataclass(frozen=True)
class NetworkConfig:
    hidden: int = 128
    depth: int = 3
    emb_dim: int = 32

    def __post_init__(self):
        for name in ("hidden", "depth", "emb_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name} must be >= 1")


@dataclass(frozen=True)
class DiagnosticsConfig:
    experiments: tuple = ("drift", "thm1", "thm2", "thm3", "appendix", "accumulation")
    n_paths: int = 512
    n_points: int = 1000
    n_mc: int = 20_000
    n_quad: int = 256
    n_sweep: int = 1024
    t_grid: tuple = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9)
    omegas: tuple = (1.0, 1.5, 2.0, 2.5, 3.0, 4.0)
    span_start: float = 0.1
    span_end: float = 0.9

    def __post_init__(self):
        unknown = set(self.experiments) - set(EXPERIMENTS)
        if unknown:
            raise ConfigError(f"unknown experiment(s) {sorted(unknown)}; valid: {EXPERIMENTS}")
        for name in ("n_paths", "n_points", "n_mc", "n_quad", "n_sweep"):
            if getattr(self, name) < 2:
                raise ConfigError(f"diagnostics.{name} must be >= 2")
        if any(t < 0.0 or t > 1.0 for t in self.t_grid):
            raise ConfigError("diagnostics.t_grid must lie in [0,1]")
        if any(w < 1.0 for w in self.omegas):
            raise ConfigError("diagnostics.omegas must be >= 1")
        if not 0.0 <= self.span_start <= self.span_end <= 1.0:
            raise ConfigError("diagnostics span needs 0 <= start <= end <= 1")


@dataclass(frozen=True, eq=False)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/latest"
    mixture: MixtureSpec = field(default_factory=gaussian_ring)
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_samples: int = 4096
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return config_to_dict(self) == config_to_dict(other)

    def __hash__(self):
        return hash(hash_config(self))


# ---------------------------------------------------------------------------
# strict readers


def _expect_mapping(node, path: str) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path} must be a mapping")
    return node

def _reject_unknown(node: dict, allowed, path: str) -> None:
    unknown = set(node) - set(allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")


def _as_int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path} must be an integer, got {v!r}")
    return v


def _as_float(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path} must be a number, got {v!r}")
    return float(v)


def _as_bool(v, path: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"{path} must be a boolean, got {v!r}")
    return v


def _as_str(v, path: str) -> str:
    if not isinstance(v, str):
        raise ConfigError(f"{path} must be a string, got {v!r}")
    return v


def _as_float_list(v, path: str) -> list:
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{path} must be a list of numbers")
    return [_as_float(e, f"{path}[{i}]") for i, e in enumerate(v)]


def _as_pair(v, path: str) -> tuple:
    vals = _as_float_list(v, path)
    if len(vals) != 2:
        raise ConfigError(f"{path} must have exactly 2 entries")
    return tuple(vals)


# ---------------------------------------------------------------------------
# mixture section


def _parse_mixture(node) -> MixtureSpec:
    node = _expect_mapping(node, "mixture")
    preset = _as_str(node.get("preset", "ring"), "mixture.preset")
    if preset not in MIXTURE_PRESETS:
        raise ConfigError(f"mixture.preset must be one of {MIXTURE_PRESETS}")
    try:
        if preset == "ring":
            _reject_unknown(
                node, ("preset", "n_components", "radius", "variance", "labeled"), "mixture"
            )
            return gaussian_ring(
                n_components=_as_int(node.get("n_components", 8), "mixture.n_components"),
                radius=_as_float(node.get("radius", 3.0), "mixture.radius"),
                variance=_as_float(node.get("variance", 0.09), "mixture.variance"),
                labeled=_as_bool(node.get("labeled", False), "mixture.labeled"),
            )
        if preset == "single":
            _reject_unknown(node, ("preset", "mean", "variance"), "mixture")
            mean = _as_float_list(node.get("mean", [0.0, 0.0]), "mixture.mean")
            return single_gaussian(
                np.array(mean), _as_float(node.get("variance", 1.0), "mixture.variance")
            )
        _reject_unknown(node, ("preset", "weights", "means", "variances", "labels"), "mixture")
        for key in ("weights", "means", "variances"):
            if key not in node:
                raise ConfigError(f"mixture.{key} is required for the custom preset")
        weights = _as_float_list(node["weights"], "mixture.weights")
        means = [
            _as_float_list(row, f"mixture.means[{i}]") for i, row in enumerate(node["means"])
        ]
        variances = _as_float_list(node["variances"], "mixture.variances")
        labels = node.get("labels")
        if labels is not None:
            labels = np.array(
                [_as_int(v, f"mixture.labels[{i}]") for i, v in enumerate(labels)]
            )
        return MixtureSpec(
            weights=np.array(weights),
            means=np.array(means),
            variances=np.array(variances),
            labels=labels,
        )
    except ConfigError:
        raise
    except Exception as exc:  # domain violations from MixtureSpec
        raise ConfigError(f"mixture: {exc}") from exc


def _mixture_to_dict(spec: MixtureSpec) -> dict:
    out = {
        "preset": "custom",
        "weights": [float(w) for w in spec.weights],
        "means": [[float(v) for v in row] for row in spec.means],
        "variances": [float(v) for v in spec.variances],
    }
    if spec.labels is not None:
        out["labels"] = [int(v) for v in spec.labels]
    return out


# ---------------------------------------------------------------------------
# typed sections


_TRAIN_KINDS = {
    "objective": _as_str,
    "batch_size": _as_int,
    "total_steps": _as_int,
    "learning_rate": _as_float,
    "adam_beta1": _as_float,
    "adam_beta2": _as_float,
    "adam_eps": _as_float,
    "ema_decay": _as_float,
    "rectify_ratio": _as_float,
    "rectify_warmup_frac": _as_float,
    "rectify_style": _as_str,
    "equal_st_prob": _as_float,
    "time_mu": _as_float,
    "time_sigma": _as_float,
    "use_cfg": _as_bool,
    "cfg_drop_prob": _as_float,
    "cfg_omega_range": _as_pair,
    "cfg_interval": _as_pair,
    "adaptive_p": _as_float,
    "adaptive_c": _as_float,
}
_TRAIN_FIELDS = tuple(_TRAIN_KINDS)
assert set(_TRAIN_FIELDS) | {"seed"} == {f.name for f in fields(TrainConfig)}


def _parse_train(node, seed: int) -> TrainConfig:
    node = _expect_mapping(node, "train")
    if "seed" in node:
        raise ConfigError("train.seed is set by the top-level seed key")
    _reject_unknown(node, _TRAIN_FIELDS, "train")
    kwargs = {"seed": seed}
    for name, reader in _TRAIN_KINDS.items():
        if name in node:
            kwargs[name] = reader(node[name], f"train.{name}")
    try:
        return TrainConfig(**kwargs)
    except Exception as exc:
        raise ConfigError(f"train: {exc}") from exc


def _train_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for name in _TRAIN_FIELDS:
        v = getattr(cfg, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    return out


def _parse_network(node) -> NetworkConfig:
    node = _expect_mapping(node, "network")
    _reject_unknown(node, ("hidden", "depth", "emb_dim"), "network")
    return NetworkConfig(
        hidden=_as_int(node.get("hidden", 128), "network.hidden"),
        depth=_as_int(node.get("depth", 3), "network.depth"),
        emb_dim=_as_int(node.get("emb_dim", 32), "network.emb_dim"),
    )


def _parse_sampler(node) -> tuple[SamplerConfig, int]:
    node = _expect_mapping(node, "sampler")
    _reject_unknown(node, ("nfe", "mode", "omega", "label", "n_samples"), "sampler")
    omega = node.get("omega")
    if omega is not None:
        omega = _as_float(omega, "sampler.omega")
    label = node.get("label")
    if label is not None:
        label = _as_int(label, "sampler.label")
    n_samples = _as_int(node.get("n_samples", 4096), "sampler.n_samples")
    if n_samples < 0:
        raise ConfigError("sampler.n_samples must be >= 0")
    try:
        cfg = SamplerConfig(
            nfe=_as_int(node.get("nfe", 1), "sampler.nfe"),
            mode=_as_str(node.get("mode", "flow_map_jumps"), "sampler.mode"),
            omega=omega,
            label=label,
        )
    except Exception as exc:
        raise ConfigError(f"sampler: {exc}") from exc
    return cfg, n_samples


def _parse_diagnostics(node) -> DiagnosticsConfig:
    node = _expect_mapping(node, "diagnostics")
    names = [f.name for f in fields(DiagnosticsConfig)]
    _reject_unknown(node, names, "diagnostics")
    kwargs = {}
    if "experiments" in node:
        exps = node["experiments"]
        if not isinstance(exps, (list, tuple)):
            raise ConfigError("diagnostics.experiments must be a list")
        kwargs["experiments"] = tuple(
            _as_str(e, f"diagnostics.experiments[{i}]") for i, e in enumerate(exps)
        )
    for name in ("n_paths", "n_points", "n_mc", "n_quad", "n_sweep"):
        if name in node:
            kwargs[name] = _as_int(node[name], f"diagnostics.{name}")
    for name in ("span_start", "span_end"):
        if name in node:
            kwargs[name] = _as_float(node[name], f"diagnostics.{name}")
    for name in ("t_grid", "omegas"):
        if name in node:
            kwargs[name] = tuple(_as_float_list(node[name], f"diagnostics.{name}"))
    return DiagnosticsConfig(**kwargs)


# ---------------------------------------------------------------------------
# whole-file parse / serialize


_TOP_KEYS = ("seed", "output_dir", "mixture", "train", "network", "sampler", "diagnostics")


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    raw = _expect_mapping(raw, "config")
    _reject_unknown(raw, _TOP_KEYS, "config")
    seed = _as_int(raw.get("seed", 0), "seed")
    output_dir = _as_str(raw.get("output_dir", "runs/latest"), "output_dir")
    mixture = _parse_mixture(raw.get("mixture"))
    train = _parse_train(raw.get("train"), seed)
    network = _parse_network(raw.get("network"))
    sampler, n_samples = _parse_sampler(raw.get("sampler"))
    diagnostics = _parse_diagnostics(raw.get("diagnostics"))
    if train.use_cfg and mixture.labels is None:
        raise ConfigError("train.use_cfg requires a labeled mixture")
    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        mixture=mixture,
        train=train,
        network=network,
        sampler=sampler,
        n_samples=n_samples,
        diagnostics=diagnostics,
    )


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "mixture": _mixture_to_dict(cfg.mixture),
        "train": _train_to_dict(cfg.train),
        "network": {
            "hidden": cfg.network.hidden,
            "depth": cfg.network.depth,
            "emb_dim": cfg.network.emb_dim,
        },
        "sampler": {
            "nfe": cfg.sampler.nfe,
            "mode": cfg.sampler.mode,
            "omega": cfg.sampler.omega,
            "label": cfg.sampler.label,
            "n_samples": cfg.n_samples,
        },
        "diagnostics": {
            "experiments": list(cfg.diagnostics.experiments),
            "n_paths": cfg.diagnostics.n_paths,
            "n_points": cfg.diagnostics.n_points,
            "n_mc": cfg.diagnostics.n_mc,
            "n_quad": cfg.diagnostics.n_quad,
            "n_sweep": cfg.diagnostics.n_sweep,
            "t_grid": list(cfg.diagnostics.t_grid),
            "omegas": list(cfg.diagnostics.omegas),
            "span_start": cfg.diagnostics.span_start,
            "span_end": cfg.diagnostics.span_end,
        },
    }


def serialize_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def hash_config(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


DEFAULT_CONFIG_TEXT = """\
# Reference run configuration. Every key is optional; the values below are
# the defaults used when a key is omitted. Unknown keys are rejected.

seed: 0                     # master seed: data, init, batches, guidance draws
output_dir: runs/latest     # metrics/checkpoints/diagnostics land here
                            # (relative paths resolve under $FLOWLAB_OUT_ROOT
                            # when that variable is set)

mixture:                    # data distribution (closed-form Gaussian mixture)
  preset: ring              # ring | single | custom
  n_components: 8           # ring: number of modes
  radius: 3.0               # ring: mode distance from the origin
  variance: 0.09            # ring: per-mode isotropic variance
  labeled: false            # ring: attach one class label per mode
  # single preset keys:   mean: [0.0, 0.0]   variance: 1.0
  # custom preset keys:   weights: [...] means: [[...], ...] variances: [...]
  #                       labels: [...] (optional ints, one per component)

train:
  objective: flowconsist    # fm | meanflow | flowconsist | cm
  batch_size: 256
  total_steps: 20000
  learning_rate: 1.0e-4
  adam_beta1: 0.9
  adam_beta2: 0.95
  adam_eps: 1.0e-8
  ema_decay: 0.9999         # exponential moving average of the field weights
  rectify_ratio: 0.3        # fraction of each batch spent on self-rectification
  rectify_warmup_frac: 0.25 # fraction of total_steps before rectification
                            # starts (the delta map distills from halfway in)
  rectify_style: paper      # paper (endpoint regression) | dmd (score surrogate)
  equal_st_prob: 0.6        # probability of collapsing the time pair to s == t
  time_mu: -0.4             # logit-normal time distribution location
  time_sigma: 1.0           # logit-normal time distribution scale
  use_cfg: false            # classifier-free guidance (needs a labeled mixture)
  cfg_drop_prob: 0.1        # label dropout rate when use_cfg is on
  cfg_omega_range: [1.0, 4.0]  # per-sample guidance strength ~ U[lo, hi]
  cfg_interval: [0.0, 0.75] # apply guidance only for t inside this interval
  adaptive_p: 1.0           # loss weight (||r||^2 + c)^-p; 0 disables weighting
  adaptive_c: 1.0e-3

network:
  hidden: 128               # width of every hidden layer
  depth: 3                  # number of hidden layers
  emb_dim: 32               # sinusoidal time/omega embedding features

sampler:
  nfe: 1                    # function evaluations per sample
  mode: flow_map_jumps      # flow_map_jumps | euler_instantaneous
  omega: null               # guidance strength at sampling time (null = off)
  label: null               # class to generate (null = unconditional)
  n_samples: 4096

diagnostics:
  experiments: [drift, thm1, thm2, thm3, appendix, accumulation]
  n_paths: 512              # drift / accumulation paths
  n_points: 1000            # covariance-positivity sample count
  n_mc: 20000               # Monte Carlo points for the identity checks
  n_quad: 256               # quadrature intervals for the integral-dynamics check
  n_sweep: 1024             # samples per guidance strength in omega_sweep
  t_grid: [0.0, 0.1, 0.25, 0.5, 0.75, 0.9]
  omegas: [1.0, 1.5, 2.0, 2.5, 3.0, 4.0]
  span_start: 0.1           # (s, t) span for the integral-dynamics check
  span_end: 0.9
"""


def default_config_text() -> str:
    return DEFAULT_CONFIG_TEXT
