"""Shared test utilities: finite-difference oracles and tolerance checks."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of f with respect to x, mutated in place.

    f must recompute the forward pass from the current contents of x. This
    stays independent of any autodiff path it is used to check.
    """
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + eps
        plus = f()
        flat_x[i] = original - eps
        minus = f()
        flat_x[i] = original
        flat_g[i] = (plus - minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-8) -> float:
    """Elementwise relative error, ignoring entries where both sides are ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    mask = denom > tiny
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / denom[mask]).max())


def assert_gradients_match(analytic, numeric, rtol: float = 1e-4, tiny: float = 1e-8):
    err = max_relative_error(analytic, numeric, tiny=tiny)
    assert err <= rtol, f"gradient mismatch: max relative error {err:.3e} > {rtol:.1e}"
