"""MLP velocity fields with scalar-conditioning embeddings and EMA shadows.

One network family covers both the main average-velocity field
F(x_t, s, t | c, omega) and the auxiliary field G(x, t, t'): the layout
names its scalar inputs, each of which is embedded sinusoidally, projected
by a small two-layer MLP, and summed into the first hidden pre-activation.
Class conditioning adds a learned embedding row, with a dedicated null row
for unconditional evaluation.

The activation is smooth (silu) on purpose: training targets differentiate
the field with respect to its inputs, so a piecewise-linear activation
would put kinks exactly where the targets look.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import (
    DimensionError,
    DomainError,
    Dual,
    as_tensor,
    check_finite,
    concat,
    cos,
    silu,
    sin,
    slice_flat,
    take_rows,
)

NULL_LABEL = -1


@dataclass(frozen=True)
class NetLayout:
    """Architecture descriptor. `scalars` names the conditioning inputs in
    order; `n_classes` 0 means no class conditioning."""

    dim: int
    hidden: int = 128
    depth: int = 3
    scalars: tuple[str, ...] = ("s", "t")
    n_classes: int = 0
    emb_dim: int = 32
    activation: str = "silu"

    def __post_init__(self):
        if self.depth < 1:
            raise DomainError("depth must be >= 1 hidden layer")
        if self.emb_dim % 2 != 0 or self.emb_dim < 2:
            raise DomainError("emb_dim must be even and >= 2")
        if self.activation != "silu":
            raise DomainError(f"unknown activation {self.activation!r}")
        if len(set(self.scalars)) != len(self.scalars) or not self.scalars:
            raise DomainError("scalars must be a nonempty set of distinct names")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": self.hidden,
            "depth": self.depth,
            "scalars": list(self.scalars),
            "n_classes": self.n_classes,
            "emb_dim": self.emb_dim,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetLayout":
        d = dict(d)
        d["scalars"] = tuple(d["scalars"])
        return NetLayout(**d)


@dataclass
class EmaShadow:
    """Exponential moving average of a flat parameter vector."""

    values: np.ndarray
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise DomainError("decay must lie in [0,1]")
        self.values = as_tensor(self.values).copy()

    def update(self, params: np.ndarray) -> "EmaShadow":
        params = as_tensor(params)
        if params.shape != self.values.shape:
            raise DimensionError("EMA shadow length mismatch")
        self.values *= self.decay
        self.values += (1.0 - self.decay) * params
        return self


class VelocityMLP:
    """Flat-parameter MLP bound to a NetLayout.

    `apply` runs in whichever mode its params argument selects: a plain
    ndarray evaluates normally, an engine.Var records the gradient tape.
    `apply_jvp` differentiates the output in (x, t) with everything else
    held constant.
    """

    def __init__(self, layout: NetLayout):
        self.layout = layout
        half = layout.emb_dim // 2
        # Strictly increasing geometric frequency ladder.
        self.frequencies = np.exp(
            np.linspace(0.0, np.log(64.0), half)
        ) if half > 1 else np.ones(1)
        self._segments: dict[str, tuple[int, int, tuple]] = {}
        cursor = 0

        def seg(name: str, shape: tuple):
            nonlocal cursor
            size = int(np.prod(shape))
            self._segments[name] = (cursor, cursor + size, shape)
            cursor += size

        h, k, d = layout.hidden, layout.emb_dim, layout.dim
        seg("in.w", (d, h))
        seg("in.b", (h,))
        for name in layout.scalars:
            seg(f"emb_{name}.w1", (k, k))
            seg(f"emb_{name}.b1", (k,))
            seg(f"emb_{name}.w2", (k, h))
            seg(f"emb_{name}.b2", (h,))
        if layout.n_classes > 0:
            seg("class_emb", (layout.n_classes + 1, h))
        for i in range(1, layout.depth):
            seg(f"h{i}.w", (h, h))
            seg(f"h{i}.b", (h,))
        seg("out.w", (h, d))
        seg("out.b", (d,))
        self.n_params = cursor

    def segment_names(self) -> list[str]:
        return list(self._segments)

    def segment(self, params: np.ndarray, name: str) -> np.ndarray:
        start, stop, shape = self._segments[name]
        return as_tensor(params)[start:stop].reshape(shape)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Fan-in scaled init; zero output layer so the initial field is 0."""
        params = np.zeros(self.n_params)
        for name, (start, stop, shape) in self._segments.items():
            if name.startswith("out.") or ".b" in name:
                continue  # biases and the output layer stay zero
            if name == "class_emb":
                scale = 1.0 / np.sqrt(self.layout.hidden)
            else:
                scale = 1.0 / np.sqrt(shape[0])
            params[start:stop] = scale * rng.standard_normal(stop - start)
        return params

    # -- evaluation ---------------------------------------------------------

    def _embed_scalar(self, value):
        """(n,1) scalar column -> (n, emb_dim) sinusoid features."""
        angles = value * self.frequencies[None, :]
        return concat([sin(angles), cos(angles)], axis=-1)

    def _forward(self, params, x, scalars: dict, label_idx: np.ndarray | None):
        seg = self._segments

        def p(name):
            start, stop, shape = seg[name]
            return slice_flat(params, start, stop, shape)

        z = x @ p("in.w") + p("in.b")
        for name in self.layout.scalars:
            feats = self._embed_scalar(scalars[name])
            e = silu(feats @ p(f"emb_{name}.w1") + p(f"emb_{name}.b1"))
            z = z + (e @ p(f"emb_{name}.w2") + p(f"emb_{name}.b2"))
        if self.layout.n_classes > 0:
            z = z + take_rows(p("class_emb"), label_idx)
        hcur = silu(z)
        for i in range(1, self.layout.depth):
            hcur = silu(hcur @ p(f"h{i}.w") + p(f"h{i}.b"))
        return hcur @ p("out.w") + p("out.b")

    def _prep(self, x, scalars: dict, label):
        """Normalize shapes and validate conditioning arguments."""
        if isinstance(x, Dual):
            single = x.primal.ndim == 1
            x2 = Dual(np.atleast_2d(x.primal), np.atleast_2d(x.tangent)) if single else x
            n, d = x2.primal.shape
        else:
            arr = as_tensor(x)
            single = arr.ndim == 1
            x2 = np.atleast_2d(arr)
            n, d = x2.shape
        if d != self.layout.dim:
            raise DimensionError(f"x has dim {d}, layout expects {self.layout.dim}")

        cols = {}
        for name in self.layout.scalars:
            val = scalars.get(name)
            if val is None:
                raise DomainError(f"network requires scalar input {name!r}")
            if isinstance(val, Dual):
                cols[name] = Dual(
                    np.broadcast_to(as_tensor(val.primal).reshape(-1, 1), (n, 1)),
                    np.broadcast_to(as_tensor(val.tangent).reshape(-1, 1), (n, 1)),
                )
            else:
                cols[name] = np.ascontiguousarray(
                    np.broadcast_to(as_tensor(val).reshape(-1, 1), (n, 1))
                )
        extra = {k for k, v in scalars.items() if v is not None} - set(self.layout.scalars)
        if extra:
            raise DomainError(f"network has no scalar input(s) {sorted(extra)}")

        def col_primal(name):
            v = cols[name]
            return v.primal if isinstance(v, Dual) else v

        if "omega" in self.layout.scalars and np.any(col_primal("omega") < 1.0):
            raise DomainError("omega must be >= 1")
        if "s" in self.layout.scalars and "t" in self.layout.scalars:
            if np.any(col_primal("s") > col_primal("t")):
                raise DomainError("need s <= t")

        if self.layout.n_classes > 0:
            if label is None:
                idx = np.full(n, self.layout.n_classes, dtype=np.int64)
            else:
                idx = np.broadcast_to(
                    np.asarray(label, dtype=np.int64).reshape(-1), (n,)
                ).copy()
                if np.any(idx > self.layout.n_classes - 1):
                    raise DomainError("label out of range")
                idx[idx < 0] = self.layout.n_classes  # null embedding row
        else:
            if label is not None:
                raise DomainError("network has no class conditioning")
            idx = None
        return x2, cols, idx, single

    def apply(
        self,
        params,
        x,
        *,
        s=None,
        t=None,
        tprime=None,
        omega=None,
        label=None,
    ):
        """Evaluate the field. params: ndarray (plain) or engine.Var (tape)."""
        x2, cols, idx, single = self._prep(
            x, {"s": s, "t": t, "tprime": tprime, "omega": omega}, label
        )
        out = self._forward(params, x2, cols, idx)
        if single:
            if isinstance(out, engine.Var) or isinstance(out, Dual):
                return out
            return out[0]
        return out

    def apply_jvp(
        self,
        params: np.ndarray,
        x,
        *,
        s=None,
        t=None,
        tprime=None,
        omega=None,
        label=None,
        dir_x,
        dir_t,
    ) -> tuple[np.ndarray, np.ndarray]:
        """(F, dF/deps along (dir_x, dir_t)) with s, label, omega constant.

        Returns plain arrays; the tangent can never carry parameter
        gradients, which is what makes consistency targets stop-gradients.
        """
        params = as_tensor(params)
        x = np.atleast_2d(as_tensor(x))
        dir_x = np.atleast_2d(as_tensor(dir_x))
        if dir_x.shape != x.shape:
            raise DimensionError("dir_x must match x's shape")
        n = x.shape[0]
        if t is None:
            raise DomainError("network requires scalar input 't'")
        t_col = np.ascontiguousarray(
            np.broadcast_to(as_tensor(t).reshape(-1, 1), (n, 1))
        )
        dt_col = np.ascontiguousarray(
            np.broadcast_to(as_tensor(dir_t).reshape(-1, 1), (n, 1))
        )
        x_dual = Dual(x, dir_x)
        t_dual = Dual(t_col, dt_col)
        out = self.apply(
            params, x_dual, s=s, t=t_dual, tprime=tprime, omega=omega, label=label
        )
        check_finite(out.primal, "forward value")
        check_finite(out.tangent, "forward tangent")
        return out.primal, out.tangent


def transplant(
    dst_net: VelocityMLP,
    dst_params: np.ndarray,
    src_net: VelocityMLP,
    src_params: np.ndarray,
    aliases: dict[str, str] | None = None,
) -> np.ndarray:
    """Copy same-shaped segments from src into a copy of dst_params.

    `aliases` maps destination segment prefixes to source prefixes, e.g.
    {"emb_tprime": "emb_t"} seeds a t'-embedding from a t-embedding.
    """
    aliases = aliases or {}
    out = as_tensor(dst_params).copy()
    for name, (start, stop, shape) in dst_net._segments.items():
        src_name = name
        for dst_prefix, src_prefix in aliases.items():
            if name.startswith(dst_prefix + "."):
                src_name = src_prefix + name[len(dst_prefix):]
                break
        if src_name not in src_net._segments:
            continue
        s0, s1, src_shape = src_net._segments[src_name]
        if src_shape != shape:
            continue
        out[start:stop] = src_params[s0:s1]
    return out
