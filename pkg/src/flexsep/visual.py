"""Visual cue encoder: per-frame embedding, dilated TCN, and chunk alignment.

Streams are channel-first [B, F_v, I_raw] on input; the output is time-major
[B, I, D] to match the separator layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Parameter, Tensor, ops
from .numerics.tensor import ContractError


@dataclass
class VisualStream:
    frames: np.ndarray        # [F_v, I_raw]
    frame_rate: int = 25

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


def _conv_param(rng, cout, cin, k, dtype, scale=None):
    scale = np.sqrt(2.0 / (cin * k)) if scale is None else scale
    return Parameter(rng.normal(0.0, scale, size=(cout, cin, k)), dtype=dtype)


class TCNBlock(Module):
    """x + W_out * gelu(dilated_conv(x)), length preserving."""

    def __init__(self, channels: int, kernel: int, dilation: int, rng, dtype=np.float32):
        self.kernel = kernel
        self.dilation = dilation
        self.conv_w = _conv_param(rng, channels, channels, kernel, dtype)
        self.conv_b = Parameter(np.zeros(channels), dtype=dtype)
        self.out_w = _conv_param(rng, channels, channels, 1, dtype, scale=0.5 / np.sqrt(channels))
        self.out_b = Parameter(np.zeros(channels), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        pad = self.dilation * (self.kernel - 1) // 2
        h = ops.conv1d(x, self.conv_w, self.conv_b, padding=pad, dilation=self.dilation)
        h = ops.conv1d(ops.gelu(h), self.out_w, self.out_b)
        return x + h


def receptive_field(kernel: int, dilations) -> int:
    return 1 + sum((kernel - 1) * d for d in dilations)


class VisualFrontend(Module):
    def __init__(self, visual_dim: int, embed_dim: int, dim: int, tcn_blocks: int, tcn_kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        if tcn_kernel % 2 == 0:
            raise ContractError("TCN kernel must be odd to keep the length")
        self.embed1_w = _conv_param(rng, embed_dim, visual_dim, 1, dtype)
        self.embed1_b = Parameter(np.zeros(embed_dim), dtype=dtype)
        self.embed2_w = _conv_param(rng, embed_dim, embed_dim, 3, dtype)
        self.embed2_b = Parameter(np.zeros(embed_dim), dtype=dtype)
        self.blocks = [TCNBlock(embed_dim, tcn_kernel, 2 ** i, rng, dtype) for i in range(tcn_blocks)]
        self.proj_w = _conv_param(rng, dim, embed_dim, 1, dtype, scale=np.sqrt(1.0 / embed_dim))
        self.proj_b = Parameter(np.zeros(dim), dtype=dtype)

    @property
    def dilations(self) -> list[int]:
        return [b.dilation for b in self.blocks]

    def extract_embedding(self, frames: Tensor) -> Tensor:
        """[B, F_v, I_raw] -> [B, E, I_raw]."""
        if frames.shape[-1] < 1:
            raise ContractError("visual stream is empty")
        h = ops.gelu(ops.conv1d(frames, self.embed1_w, self.embed1_b))
        return ops.gelu(ops.conv1d(h, self.embed2_w, self.embed2_b, padding=1))

    def tcn(self, emb: Tensor) -> Tensor:
        """[B, E, I_raw] -> [B, I_raw, D]."""
        h = emb
        for block in self.blocks:
            h = block(h)
        out = ops.conv1d(h, self.proj_w, self.proj_b)
        return ops.swapaxes(out, -1, -2)

    def forward(self, frames) -> Tensor:
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.proj_w.dtype))
        if x.ndim == 2:
            x = x.reshape((1,) + x.shape)
        return self.tcn(self.extract_embedding(x))


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights [n_out, n_in] with half-sample-centred grids."""
    if n_out < 1 or n_in < 1:
        raise ContractError("interpolation needs at least one input and output frame")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def align_to_chunks(features: Tensor, n_target: int) -> Tensor:
    """Resample time-major features [.., I_raw, D] to [.., n_target, D]."""
    n_in = features.shape[-2]
    if n_in == n_target:
        return features
    w = Tensor(interpolation_matrix(n_in, n_target, dtype=features.dtype))
    return ops.matmul(w, features)
