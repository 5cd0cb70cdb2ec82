"""Central finite-difference gradient checking (float64)."""

from __future__ import annotations

import numpy as np

STEP = 1e-4
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def numerical_gradient(f, x: np.ndarray, indices=None, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    Only entries in ``indices`` (flat) are evaluated when given; the rest of
    the returned array is left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def max_relative_error(analytic, numeric, indices=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a, n = a[list(indices)], n[list(indices)]
    return float(relative_error(a, n).max()) if a.size else 0.0
