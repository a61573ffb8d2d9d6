"""Central finite-difference gradient oracle.

Independent of the autodiff path: it only evaluates the forward function.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, no_grad


def numeric_grad(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d f() / d param by central differences, perturbing ``param.data`` in place."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    floor: float = 1e-6) -> float:
    """Run backward once on ``f()`` and return the max relative error across
    every element of every parameter."""
    for p in params:
        p.zero_grad()
    f().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        num = numeric_grad(f, p, eps)
        worst = max(worst, float(relative_error(analytic, num, floor).max()))
    return worst
