"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, default_dtype


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable, x, h: float = 1e-5, grad_fn: Callable | None = None) -> float:
    """Max relative error between the analytic and central-difference gradients.

    ``f`` maps a :class:`Tensor` to a scalar tensor and is differentiated with
    :func:`backward`. When ``grad_fn`` is given, ``f`` and ``grad_fn`` take
    plain float64 arrays instead and ``grad_fn`` returns the analytic gradient.
    Runs in 64-bit.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with default_dtype(np.float64):
        if grad_fn is not None:
            analytic = np.asarray(grad_fn(x0.copy()), dtype=np.float64)
            numeric = numerical_gradient(lambda z: f(z.copy()), x0.copy(), h)
        else:
            xt = Tensor(x0, requires_grad=True)
            out = f(xt)
            analytic = backward(out, wrt=[xt])[xt]
            numeric = numerical_gradient(lambda z: f(Tensor(z)).item(), x0.copy(), h)
    return relative_error(analytic, numeric)
