from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        fp = float(f(theta))
        theta[i] = orig - eps
        fm = float(f(theta))
        theta[i] = orig
        if np.isnan(fp) or np.isnan(fm):
            raise FloatingPointError(f"objective returned NaN at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a-b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
