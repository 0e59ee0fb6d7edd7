"""Convolutional waveform front-end and transposed-convolution decoder.

Features are kept time-major, ``[B, L, D]``, throughout the model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Parameter, Tensor, ops
from .numerics.tensor import ContractError, ShapeError


@dataclass
class EncodedAudio:
    features: Tensor          # [B, L, D]
    stride: int
    kernel: int
    input_length: int

    @property
    def length(self) -> int:
        return self.features.shape[-2]


def frame_count(n_samples: int, kernel: int) -> int:
    """L = floor((T - K) / (K/2)) + 1."""
    if n_samples < kernel:
        raise ContractError(f"input too short: {n_samples} samples < kernel {kernel}")
    return (n_samples - kernel) // (kernel // 2) + 1


def decoded_length(n_frames: int, kernel: int) -> int:
    return (n_frames - 1) * (kernel // 2) + kernel


class Frontend(Module):
    """Bias-free 1 -> D conv with kernel K and stride K/2, followed by ReLU."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        self.kernel = kernel
        scale = np.sqrt(2.0 / kernel)
        self.weight = Parameter(rng.normal(0.0, scale, size=(dim, 1, kernel)), dtype=dtype)

    def forward(self, wave) -> EncodedAudio:
        x = wave if isinstance(wave, Tensor) else Tensor(np.asarray(wave, dtype=self.weight.dtype))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        t = x.shape[-1]
        frame_count(t, self.kernel)
        h = ops.conv1d(x.reshape(x.shape[0], 1, t), self.weight, stride=self.kernel // 2)
        h = ops.relu(ops.transpose(h, (0, 2, 1)))
        return EncodedAudio(h, self.kernel // 2, self.kernel, t)

    def pre_activation(self, wave) -> Tensor:
        """Conv output before ReLU, [B, L, D]; exposed for linearity checks."""
        x = wave if isinstance(wave, Tensor) else Tensor(np.asarray(wave, dtype=self.weight.dtype))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        h = ops.conv1d(x.reshape(x.shape[0], 1, x.shape[-1]), self.weight, stride=self.kernel // 2)
        return ops.transpose(h, (0, 2, 1))


class Decoder(Module):
    """Masked features [B, L, D] -> waveform [B, T] by transposed conv."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        self.kernel = kernel
        scale = np.sqrt(1.0 / dim)
        self.weight = Parameter(rng.normal(0.0, scale, size=(dim, 1, kernel)), dtype=dtype)

    def forward(self, mask: Tensor, encoded: EncodedAudio, length: int | None = None) -> Tensor:
        h = encoded.features
        if mask.shape != h.shape:
            raise ShapeError(f"mask shape {mask.shape} != encoded feature shape {h.shape}")
        masked = ops.transpose(mask * h, (0, 2, 1))                   # [B, D, L]
        wave = ops.conv1d_transpose(masked, self.weight, stride=self.kernel // 2)[:, 0, :]
        return fit_length(wave, encoded.input_length if length is None else length)


def fit_length(wave: Tensor, length: int) -> Tensor:
    """Truncate or zero-pad the last axis to ``length``."""
    t = wave.shape[-1]
    if t == length:
        return wave
    if t > length:
        return wave[..., :length]
    widths = [(0, 0)] * (wave.ndim - 1) + [(0, length - t)]
    return ops.pad(wave, widths)


def encode_frontend(wave, frontend: Frontend) -> EncodedAudio:
    return frontend(wave)


def decode(mask: Tensor, encoded: EncodedAudio, decoder: Decoder, trim: bool = True) -> Tensor:
    if trim:
        return decoder(mask, encoded)
    return decoder(mask, encoded, length=decoded_length(encoded.length, encoded.kernel))
