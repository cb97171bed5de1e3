"""
Central finite-difference oracle for analytic gradients.

Usage in tests:
    numeric = numerical_gradient(lambda w: loss(w), w0)
    assert relative_error(analytic, numeric) < 1e-4
"""

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-4


def numerical_gradient(
    fcn: Callable[[np.ndarray], float], x0: np.ndarray, step: float = DEFAULT_STEP
) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every entry of x0; x0 is not modified."""
    x = np.array(x0, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        f_plus = fcn(x)
        flat[i] = original - step
        f_minus = fcn(x)
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|, 1e-8)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch: {analytic.shape} vs {numeric.shape}")
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradient(
    fcn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    analytic: np.ndarray,
    step: float = DEFAULT_STEP,
) -> float:
    """Relative error between an analytic gradient and central differences at x0."""
    return relative_error(analytic, numerical_gradient(fcn, x0, step))
