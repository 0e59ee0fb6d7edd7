"""Two-branch multi-scale audio encoder.

Each block mixes a global self-attention branch and a local convolutional
gated MLP branch with a learnable convex weight, plus a residual path::

    h_out = h + a * mhsa(h) + (1 - a) * cgmlp(h),   a = sigmoid(alpha_logit)
"""
from __future__ import annotations

import numpy as np

from .numerics import LayerNorm, Linear, Module, MultiHeadAttention, Parameter, Tensor, ops
from .numerics.tensor import ContractError


class ConvGatingUnit(Module):
    """Split [.., L, Dh] in half; gate the first half by a conv of the normed second."""

    def __init__(self, hidden: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        if hidden % 2:
            raise ContractError(f"gating unit needs an even feature size, got {hidden}")
        if kernel % 2 == 0:
            raise ContractError(f"depthwise kernel must be odd, got {kernel}")
        half = hidden // 2
        self.norm = LayerNorm(half, dtype=dtype)
        # near-identity init keeps the gate ~1 early on
        w = rng.normal(0.0, 1e-2, size=(half, kernel))
        self.conv_weight = Parameter(w, dtype=dtype)
        self.conv_bias = Parameter(np.ones(half), dtype=dtype)

    def forward(self, hz: Tensor) -> Tensor:
        dh = hz.shape[-1]
        if dh % 2:
            raise ContractError(f"gating unit needs an even feature size, got {dh}")
        half = dh // 2
        z1 = hz[..., :half]
        z2 = self.norm(hz[..., half:])
        z2 = ops.swapaxes(z2, -1, -2)                      # [.., half, L]
        gate = ops.depthwise_conv1d(z2, self.conv_weight, self.conv_bias)
        return z1 * ops.swapaxes(gate, -1, -2)


class BranchformerBlock(Module):
    def __init__(self, dim: int, hidden: int, heads: int, csgu_kernel: int,
                 rng: np.random.Generator, dtype=np.float32, alpha_override: float | None = None):
        if dim % heads:
            raise ContractError(f"feature dim {dim} not divisible by {heads} heads")
        self.attn_norm = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.mlp_norm = LayerNorm(dim, dtype=dtype)
        self.up = Linear(dim, hidden, rng, dtype=dtype)
        self.csgu = ConvGatingUnit(hidden, csgu_kernel, rng, dtype=dtype)
        self.down = Linear(hidden // 2, dim, rng, dtype=dtype)
        self.alpha_logit = Parameter(np.zeros(()), dtype=dtype)
        self.alpha_override = alpha_override

    def mhsa_branch(self, h: Tensor, return_weights: bool = False):
        return self.attn(self.attn_norm(h), return_weights=return_weights)

    def cgmlp_branch(self, h: Tensor) -> Tensor:
        hz = ops.gelu(self.up(self.mlp_norm(h)))
        return self.down(self.csgu(hz))

    def alpha(self) -> Tensor:
        if self.alpha_override is not None:
            return Tensor(np.asarray(self.alpha_override, dtype=self.alpha_logit.dtype))
        return ops.sigmoid(self.alpha_logit)

    def forward(self, h: Tensor) -> Tensor:
        a = self.alpha()
        if self.alpha_override == 1.0:
            return h + self.mhsa_branch(h)
        if self.alpha_override == 0.0:
            return h + self.cgmlp_branch(h)
        return h + a * self.mhsa_branch(h) + (1.0 - a) * self.cgmlp_branch(h)


class BranchformerEncoder(Module):
    """Stack of ``n_blocks`` blocks on time-major features [B, L, D]."""

    def __init__(self, dim: int, hidden: int, heads: int, csgu_kernel: int, n_blocks: int,
                 rng: np.random.Generator, dtype=np.float32, alpha_override: float | None = None):
        self.blocks = [
            BranchformerBlock(dim, hidden, heads, csgu_kernel, rng, dtype, alpha_override)
            for _ in range(n_blocks)
        ]

    def forward(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = block(h)
        return h
