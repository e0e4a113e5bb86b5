"""Central finite differences and the error metric used by all gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest entry-wise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` is the largest magnitude in either array, so entries that are
    tiny compared with the gradient as a whole are judged on an absolute
    basis instead of blowing up the ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)))
    if scale == 0.0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / den))
