"""Central finite differences, used as an independent oracle for gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, grad


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Estimate df/dx coordinate-wise with (f(x+eps e_i) - f(x-eps e_i)) / 2eps.

    ``f`` receives a float64 array of x's shape and must return a scalar.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C")
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return out


def rel_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||), with 0 for two zero arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Relative error between reverse-mode and finite-difference gradients of ``fn`` at ``x``."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    (analytic,) = grad(fn(leaf), [leaf])

    def scalar(v):
        return fn(Tensor(v)).item()

    return rel_error(analytic.data, finite_diff_gradient(scalar, x, eps))
