"""Central finite differences, used as the independent oracle for backward()."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_difference_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every element i of ``x``.

    ``f`` maps a Tensor to a scalar (Tensor or float) and must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64 if not isinstance(x, Tensor) else x.dtype)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(np.array(x, copy=True), requires_grad=True)
    backward(f(t))
    return t.grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Relative error between backward() and central differences of f at x."""
    return relative_error(analytic_gradient(f, x), finite_difference_gradient(f, x, h))
