"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NumericDomainError, Tensor


def finite_difference_gradient(f: Callable[[], float], theta: Tensor, h: float = 1e-5) -> np.ndarray:
    """Estimate d f / d theta coordinate-wise by (f(θ+h·e_i) − f(θ−h·e_i)) / 2h.

    ``f`` is called with no arguments and must read ``theta.data``, which is
    perturbed in place and restored afterwards.
    """
    if theta.dtype != np.float64:
        raise TypeError("finite differences need a float64 parameter")
    flat = theta.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericDomainError(f"objective not finite at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> float:
    """max |a − n| / max(|a|, |n|, atol) over coordinates."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
