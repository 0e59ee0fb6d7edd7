"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``FLEXSEP_KERNELS`` (``numba`` or
``numpy``; default ``numba`` when numba imports). :func:`use_backend`
switches at runtime, mainly for tests and the benchmark.
"""
from __future__ import annotations

import contextlib
import os
from types import ModuleType

import numpy as np

from . import _numpy

try:  # pragma: no cover - exercised implicitly
    from . import _numba
except Exception:  # numba missing or broken
    _numba = None

KERNEL_NAMES = (
    "conv1d_forward",
    "conv1d_backward_input",
    "conv1d_backward_weight",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool_forward",
    "maxpool_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "softmax_forward",
    "softmax_backward",
)

_BACKENDS: dict[str, ModuleType | None] = {"numpy": _numpy, "numba": _numba}


def available_backends() -> list[str]:
    return [name for name, mod in _BACKENDS.items() if mod is not None]


def _resolve(name: str | None) -> str:
    name = (name or "").strip().lower() or ("numba" if _numba is not None else "numpy")
    if name in ("0", "off", "false", "no"):
        name = "numpy"
    if name in ("1", "on", "true", "yes"):
        name = "numba"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {sorted(_BACKENDS)}")
    if _BACKENDS[name] is None:
        name = "numpy"
    return name


_active = _resolve(os.environ.get("FLEXSEP_KERNELS"))


def backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    _active = _resolve(name)


@contextlib.contextmanager
def use_backend(name: str):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def _impl(name: str):
    return getattr(_BACKENDS[_active], name)


def conv1d_forward(x, w, stride, dilation):
    return _impl("conv1d_forward")(_c(x), _c(w), int(stride), int(dilation))


def conv1d_backward_input(gy, w, stride, dilation, t_in):
    return _impl("conv1d_backward_input")(_c(gy), _c(w), int(stride), int(dilation), int(t_in))


def conv1d_backward_weight(gy, x, k, stride, dilation):
    return _impl("conv1d_backward_weight")(_c(gy), _c(x), int(k), int(stride), int(dilation))


def depthwise_forward(xp, w):
    return _impl("depthwise_forward")(_c(xp), _c(w))


def depthwise_backward(gy, xp, w):
    return _impl("depthwise_backward")(_c(gy), _c(xp), _c(w))


def maxpool_forward(x, window):
    return _impl("maxpool_forward")(_c(x), int(window))


def maxpool_backward(gy, idx, window, t_in):
    return _impl("maxpool_backward")(_c(gy), _c(idx), int(window), int(t_in))


def layer_norm_forward(x, gamma, beta, eps):
    return _impl("layer_norm_forward")(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_backward(gy, xhat, rstd, gamma):
    return _impl("layer_norm_backward")(_c(gy), _c(xhat), _c(rstd), _c(gamma))


def gelu_forward(x):
    return _impl("gelu_forward")(_c(x))


def gelu_backward(x, gy):
    return _impl("gelu_backward")(_c(x), _c(gy))


def softmax_forward(x):
    return _impl("softmax_forward")(_c(x))


def softmax_backward(p, gp):
    return _impl("softmax_backward")(_c(p), _c(gp))
