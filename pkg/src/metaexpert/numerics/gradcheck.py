"""Central finite-difference gradient checks.

The numeric side only ever evaluates the forward function, so it stays
independent of the backward rules being checked.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                  h: float = 1e-5) -> list[np.ndarray]:
    out = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the L2 norm; 0 when both vanish."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den == 0.0:
        return 0.0
    return num / den


def check_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
                h: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric grads over ``inputs``."""
    ana = analytic_grads(fn, inputs)
    num = numeric_grads(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
