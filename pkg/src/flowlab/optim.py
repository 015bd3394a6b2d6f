"""Bias-corrected Adam on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import DimensionError, as_tensor, check_finite


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(m=np.zeros(n), v=np.zeros(n), count=0)

    def __post_init__(self):
        self.m = as_tensor(self.m)
        self.v = as_tensor(self.v)
        if self.m.shape != self.v.shape:
            raise DimensionError("moment accumulators must share a shape")


def adam_update(
    opt: OptimizerState,
    params: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
) -> np.ndarray:
    """One Adam step: updates opt in place, returns the new parameters."""
    params = as_tensor(params)
    grad = as_tensor(grad)
    if params.shape != grad.shape or params.shape != opt.m.shape:
        raise DimensionError("params, grad, and optimizer state must match")
    check_finite(grad, "gradient")
    opt.count += 1
    opt.m = beta1 * opt.m + (1.0 - beta1) * grad
    opt.v = beta2 * opt.v + (1.0 - beta2) * grad * grad
    m_hat = opt.m / (1.0 - beta1**opt.count)
    v_hat = opt.v / (1.0 - beta2**opt.count)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)
