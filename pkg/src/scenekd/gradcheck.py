"""Central finite-difference gradient checking at float64."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, atol) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom))


def check_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Assert the analytic gradient matches central differences; returns the error."""
    err = max_rel_error(analytic, numerical_grad(f, x, h))
    if err >= tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} >= {tol}")
    return err
