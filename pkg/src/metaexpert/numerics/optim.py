"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 3e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """One update over ``params``, then clear their grads.

    ``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.
    Velocities start at zero and are keyed by parameter name, so stepping a
    subset of the model leaves the other velocities untouched.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for parameter(s) {', '.join(missing)}")
    lr, mom, wd = state.learning_rate, state.momentum, state.weight_decay
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"sgd_step: velocity for {name} has shape {list(v.shape)}, "
                             f"parameter has {list(p.data.shape)}")
        v = mom * v + p.grad + wd * p.data
        state.velocity[name] = v
        p.data = p.data - lr * v
        p.grad = None
