"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(np.sum(fn().data))
        flat[i] = orig - step
        down = float(np.sum(fn().data))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), taken over the whole array."""
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
              np.max(np.abs(numeric)) if numeric.size else 0.0, floor)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> dict[int, float]:
    """Compare backprop against finite differences for each parameter.

    ``fn`` must rebuild the graph from scratch on every call and return a
    tensor; non-scalar outputs are summed. Returns {param index: rel. error}.
    """
    for p in params:
        p.grad = None
    out = fn()
    loss = out if out.size == 1 else out.sum()
    loss.backward()
    errors = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[i] = relative_error(analytic, numerical_grad(fn, p, step))
    return errors
