"""Parameter containers and the handful of layers the model is built from."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.op = "param"


class Module:
    """Tree of parameters discovered from instance attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> Parameter:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def zeros(shape, dtype) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def ones(shape, dtype) -> Parameter:
    return Parameter(np.ones(shape), dtype=dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = xavier(rng, n_in, n_out, (n_in, n_out), dtype)
        self.bias = zeros((n_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = ones((dim,), dtype)
        self.beta = zeros((dim,), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Self-attention over the second-to-last axis of x [..., L, D]."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if dim % heads:
            raise ValueError(f"feature dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor, return_weights: bool = False):
        *lead, length, dim = x.shape
        h = self.heads
        d = dim // h
        qkv = self.qkv(x).reshape(tuple(lead) + (length, 3, h, d))
        n = len(lead)
        # -> [3, ..., H, L, d]
        qkv = ops.transpose(qkv, (n + 1,) + tuple(range(n)) + (n + 2, n, n + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        res = ops.scaled_dot_product_attention(q, k, v, scale=1.0 / math.sqrt(d), return_weights=return_weights)
        att, weights = res if return_weights else (res, None)
        merged = ops.transpose(att, tuple(range(n)) + (n + 1, n, n + 2)).reshape(tuple(lead) + (length, dim))
        out = self.proj(merged)
        return (out, weights) if return_weights else out
