"""Float64 array math with forward-mode directional derivatives and
reverse-mode parameter gradients.

Model code is written once against plain ndarrays plus the helpers in this
module (`silu`, `concat`, `take_rows`, ...). The same code then runs in three
modes: plain numpy, forward mode (operands wrapped in `Dual`, propagating a
directional derivative alongside every value), and reverse mode (the flat
parameter vector wrapped in `Var`, recording a tape that `backward` walks to
accumulate gradients).

Two deliberate restrictions keep the semantics honest:

* `jvp` returns plain ndarrays. A directional derivative can never re-enter a
  gradient computation, so anything built from a JVP is a constant target by
  construction.
* The reverse-mode op set is the small closed family needed for MLPs and
  quadratic losses. Unsupported compositions fail loudly instead of silently
  computing wrong gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation's contract."""


class DomainError(ValueError):
    """A scalar argument lies outside its documented range."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    return np.asarray(x, dtype=np.float64)


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# ---------------------------------------------------------------------------
# forward mode


class Dual:
    """A value paired with its directional derivative.

    Arithmetic on `Dual` propagates both halves; mixing with plain arrays or
    scalars treats them as constants (zero tangent). `__array_ufunc__ = None`
    stops numpy from absorbing the left operand in mixed expressions.
    """

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent):
        primal = as_tensor(primal)
        tangent = as_tensor(tangent)
        if primal.shape != tangent.shape:
            raise DimensionError(
                f"primal shape {primal.shape} != tangent shape {tangent.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal + other.primal, self.tangent + other.tangent)
        p = self.primal + other
        return Dual(p, np.broadcast_to(self.tangent, p.shape))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal - other.primal, self.tangent - other.tangent)
        p = self.primal - other
        return Dual(p, np.broadcast_to(self.tangent, p.shape))

    def __rsub__(self, other):
        p = other - self.primal
        return Dual(p, np.broadcast_to(-self.tangent, p.shape))

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.primal * other.primal,
                self.tangent * other.primal + self.primal * other.tangent,
            )
        return Dual(self.primal * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.primal
            return Dual(
                self.primal * inv,
                (self.tangent - self.primal * inv * other.tangent) * inv,
            )
        return Dual(self.primal / other, self.tangent / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.primal
        p = other * inv
        return Dual(p, -p * inv * self.tangent)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.primal @ other.primal,
                self.tangent @ other.primal + self.primal @ other.tangent,
            )
        return Dual(self.primal @ other, self.tangent @ other)

    def __rmatmul__(self, other):
        return Dual(other @ self.primal, other @ self.tangent)

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("Dual exponent must be a plain number")
        return Dual(self.primal**n, n * self.primal ** (n - 1) * self.tangent)


# ---------------------------------------------------------------------------
# reverse mode


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _acc(v: "Var", g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.zeros(v.data.shape)
    v.grad += _unbroadcast(g, v.data.shape)


class Var:
    """Node in a reverse-mode tape over float64 ndarrays.

    Supported ops: +, -, *, / (scalar divisor), @, negation, `slice_flat`,
    `take_rows`, `silu`, `sum_rows`, `mean_all`, elementwise squaring via `*`.
    Constants (ndarrays, scalars) mix freely on either side.
    """

    __slots__ = ("data", "grad", "_parents", "_bw")
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), bw: Callable | None = None):
        self.data = as_tensor(data)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bw = bw

    def __repr__(self):
        return f"Var(shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __add__(self, other):
        if isinstance(other, Var):
            out = Var(self.data + other.data, (self, other))
            out._bw = lambda g: (_acc(self, g), _acc(other, g))
        else:
            out = Var(self.data + other, (self,))
            out._bw = lambda g: _acc(self, g)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            out = Var(self.data - other.data, (self, other))
            out._bw = lambda g: (_acc(self, g), _acc(other, -g))
        else:
            out = Var(self.data - other, (self,))
            out._bw = lambda g: _acc(self, g)
        return out

    def __rsub__(self, other):
        out = Var(other - self.data, (self,))
        out._bw = lambda g: _acc(self, -g)
        return out

    def __neg__(self):
        out = Var(-self.data, (self,))
        out._bw = lambda g: _acc(self, -g)
        return out

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.data, other.data
            out = Var(a * b, (self, other))
            out._bw = lambda g: (_acc(self, g * b), _acc(other, g * a))
        else:
            c = as_tensor(other)
            out = Var(self.data * c, (self,))
            out._bw = lambda g: _acc(self, g * c)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("Var division by Var is outside the supported op set")
        return self * (1.0 / as_tensor(other))

    def __matmul__(self, other):
        if isinstance(other, Var):
            a, b = self.data, other.data
            out = Var(a @ b, (self, other))
            out._bw = lambda g: (_acc(self, g @ b.T), _acc(other, a.T @ g))
        else:
            b = as_tensor(other)
            out = Var(self.data @ b, (self,))
            out._bw = lambda g: _acc(self, g @ b.T)
        return out

    def __rmatmul__(self, other):
        a = as_tensor(other)
        out = Var(a @ self.data, (self,))
        out._bw = lambda g: _acc(self, a.T @ g)
        return out


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar `root` into `.grad` of every node."""
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar, got shape {root.data.shape}")
    root.grad = np.ones(root.data.shape)
    for node in reversed(_topo_order(root)):
        if node._bw is not None:
            node._bw(node.grad)


# ---------------------------------------------------------------------------
# mode-generic helpers


def slice_flat(params, start: int, stop: int, shape: tuple):
    """View `params[start:stop]` reshaped to `shape`; differentiable in Var mode."""
    if isinstance(params, Var):
        if params.data.ndim != 1:
            raise DimensionError("slice_flat expects a flat parameter vector")
        out = Var(params.data[start:stop].reshape(shape), (params,))

        def bw(g, _s=start, _e=stop, _p=params):
            if _p.grad is None:
                _p.grad = np.zeros(_p.data.shape)
            _p.grad[_s:_e] += g.reshape(_e - _s)

        out._bw = bw
        return out
    if isinstance(params, Dual):
        return Dual(
            params.primal[start:stop].reshape(shape),
            params.tangent[start:stop].reshape(shape),
        )
    arr = as_tensor(params)
    if arr.ndim != 1:
        raise DimensionError("slice_flat expects a flat parameter vector")
    return arr[start:stop].reshape(shape)


def take_rows(table, idx: np.ndarray):
    """Row gather `table[idx]`; differentiable in the table (Var mode)."""
    idx = np.asarray(idx)
    if isinstance(table, Var):
        out = Var(table.data[idx], (table,))

        def bw(g, _t=table, _i=idx):
            if _t.grad is None:
                _t.grad = np.zeros(_t.data.shape)
            np.add.at(_t.grad, _i, g)

        out._bw = bw
        return out
    if isinstance(table, Dual):
        return Dual(table.primal[idx], table.tangent[idx])
    return as_tensor(table)[idx]


def silu(x):
    """x * sigmoid(x), smooth everywhere."""
    if isinstance(x, Dual):
        s = _sigmoid(x.primal)
        return Dual(x.primal * s, (s * (1.0 + x.primal * (1.0 - s))) * x.tangent)
    if isinstance(x, Var):
        s = _sigmoid(x.data)
        out = Var(x.data * s, (x,))
        d = s * (1.0 + x.data * (1.0 - s))
        out._bw = lambda g: _acc(x, g * d)
        return out
    return x * _sigmoid(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.primal), np.cos(x.primal) * x.tangent)
    if isinstance(x, Var):
        raise TypeError("sin is not in the reverse-mode op set")
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.primal), -np.sin(x.primal) * x.tangent)
    if isinstance(x, Var):
        raise TypeError("cos is not in the reverse-mode op set")
    return np.cos(x)


def concat(parts: Sequence, axis: int = -1):
    """Concatenate ndarrays and/or Duals; plain parts contribute zero tangent."""
    if any(isinstance(p, Var) for p in parts):
        raise TypeError("concat is not in the reverse-mode op set")
    if any(isinstance(p, Dual) for p in parts):
        primals = [p.primal if isinstance(p, Dual) else as_tensor(p) for p in parts]
        tangents = [
            p.tangent if isinstance(p, Dual) else np.zeros(np.shape(p))
            for p in parts
        ]
        return Dual(
            np.concatenate(primals, axis=axis), np.concatenate(tangents, axis=axis)
        )
    return np.concatenate([as_tensor(p) for p in parts], axis=axis)


def sum_rows(x):
    """Sum over the last axis: (n, d) -> (n,)."""
    if isinstance(x, Var):
        n, d = x.data.shape
        out = Var(x.data.sum(axis=1), (x,))
        out._bw = lambda g: _acc(x, np.repeat(g[:, None], d, axis=1))
        return out
    if isinstance(x, Dual):
        return Dual(x.primal.sum(axis=-1), x.tangent.sum(axis=-1))
    return as_tensor(x).sum(axis=-1)


def mean_all(x):
    """Mean over all entries, returning a scalar node/array."""
    if isinstance(x, Var):
        n = x.data.size
        out = Var(x.data.mean(), (x,))
        out._bw = lambda g: _acc(x, np.full(x.data.shape, float(g) / n))
        return out
    if isinstance(x, Dual):
        return Dual(x.primal.mean(), x.tangent.mean())
    return as_tensor(x).mean()


def primal_of(x) -> np.ndarray:
    """The plain value of a Var/Dual/ndarray, with no graph attached."""
    if isinstance(x, Var):
        return x.data
    if isinstance(x, Dual):
        return x.primal
    return as_tensor(x)


# ---------------------------------------------------------------------------
# driver entry points


def jvp(
    f: Callable,
    point,
    time,
    dir_x,
    dir_t,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode directional derivative of `f(x, t)` along `(dir_x, dir_t)`.

    Returns plain `(value, tangent)` ndarrays. The tangent is a constant with
    respect to any later gradient computation, which is exactly the
    stop-gradient discipline consistency targets rely on.
    """
    point = as_tensor(point)
    dir_x = as_tensor(dir_x)
    if point.shape != dir_x.shape:
        raise DimensionError(
            f"point shape {point.shape} != direction shape {dir_x.shape}"
        )
    t_arr = as_tensor(time)
    dt_arr = np.broadcast_to(as_tensor(dir_t), t_arr.shape)
    out = f(Dual(point, dir_x), Dual(t_arr, dt_arr))
    if isinstance(out, Dual):
        value, tangent = out.primal, out.tangent
    else:
        value = as_tensor(out)
        tangent = np.zeros(value.shape)
    check_finite(value, "jvp value")
    check_finite(tangent, "jvp tangent")
    return value, tangent


def grad(loss_fn: Callable, params) -> np.ndarray:
    """Gradient of a scalar-valued `loss_fn` at a flat parameter vector."""
    return value_and_grad(loss_fn, params)[1]


def value_and_grad(loss_fn: Callable, params) -> tuple[float, np.ndarray]:
    params = as_tensor(params)
    if params.ndim != 1:
        raise DimensionError("params must be a flat vector")
    leaf = Var(params)
    out = loss_fn(leaf)
    if not isinstance(out, Var):
        # Loss did not touch the parameters: gradient is identically zero.
        value = float(as_tensor(out).reshape(()))
        if not np.isfinite(value):
            raise NumericError("non-finite loss value")
        return value, np.zeros(params.shape)
    if out.data.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {out.data.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NumericError("non-finite loss value")
    backward(out)
    g = leaf.grad if leaf.grad is not None else np.zeros(params.shape)
    check_finite(g, "parameter gradient")
    return value, g
