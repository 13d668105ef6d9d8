"""Shared test utilities: finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np


def fd_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. array x (in place)."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst per-element relative error, floored by the arrays' scale.

    The floor keeps elements far below the gradient's magnitude from
    dominating: finite differences cannot resolve them beyond the
    truncation noise of the loss itself.
    """
    scale = max(1.0, float(np.abs(a).max(initial=0.0)),
                float(np.abs(b).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3 * scale)
    return float(np.max(np.abs(a - b) / denom))
