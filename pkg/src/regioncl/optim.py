"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor | np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """Apply one Adam update in place and return ``(params, state)``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if a.shape != np.shape(g) or m.shape != a.shape:
            raise DimensionError(f"parameter {a.shape} vs gradient {np.shape(g)}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        a -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(a.dtype)
    return params, state
