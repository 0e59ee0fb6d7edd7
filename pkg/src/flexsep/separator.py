"""Dual-path audio-visual separator with weight-shared parallel branches.

Layout: encoded audio is [B, L, D]; chunked audio is [B, I, C, D] (I chunks
of C frames, hop C/2); visual features are [B, I, D].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import LayerNorm, Linear, Module, MultiHeadAttention, Tensor, ops
from .numerics.tensor import ContractError, ShapeError
from .visual import align_to_chunks


class ChunkCorruptionError(ValueError):
    """Chunk tensor and its padding record disagree."""


@dataclass
class ChunkedFeature:
    chunks: Tensor        # [B, I, C, D]
    pad_front: int
    pad_back: int
    original_length: int

    @property
    def chunk_size(self) -> int:
        return self.chunks.shape[2]

    @property
    def n_chunks(self) -> int:
        return self.chunks.shape[1]

    def replace(self, chunks: Tensor) -> "ChunkedFeature":
        return ChunkedFeature(chunks, self.pad_front, self.pad_back, self.original_length)


def chunk_grid(length: int, chunk: int) -> tuple[int, int]:
    """(pad_back, n_chunks) for a sequence of ``length`` frames.

    The tail is zero-padded so the grid extends at least one hop past the
    last frame (every frame but the first hop is seen by two windows); short
    inputs (length <= C/2) collapse to a single window.
    """
    if chunk < 2 or chunk % 2:
        raise ContractError(f"chunk length must be even and >= 2, got {chunk}")
    if length < 1:
        raise ContractError("cannot chunk an empty sequence")
    hop = chunk // 2
    need = length + hop
    padded = chunk + max(0, math.ceil((need - chunk) / hop)) * hop
    return padded - length, (padded - chunk) // hop + 1


def chunk(h: Tensor, chunk_size: int) -> ChunkedFeature:
    """[B, L, D] -> overlapping windows [B, I, C, D] with hop C/2."""
    b, length, d = h.shape
    pad_back, n_chunks = chunk_grid(length, chunk_size)
    hop = chunk_size // 2
    padded = ops.pad(h, [(0, 0), (0, pad_back), (0, 0)]) if pad_back else h
    seg = padded.reshape(b, n_chunks + 1, hop, d)
    chunks = ops.concat([seg[:, :-1], seg[:, 1:]], axis=2)
    return ChunkedFeature(chunks, 0, pad_back, length)


def overlap_add(chunked: ChunkedFeature) -> Tensor:
    """Inverse of :func:`chunk`: average overlapping windows, strip padding."""
    x = chunked.chunks
    if x.ndim != 4:
        raise ChunkCorruptionError(f"expected a [B, I, C, D] chunk tensor, got {x.shape}")
    b, n_chunks, c, d = x.shape
    if c % 2:
        raise ChunkCorruptionError(f"chunk length {c} is odd")
    hop = c // 2
    total = (n_chunks + 1) * hop
    if chunked.pad_front + chunked.original_length + chunked.pad_back != total or chunked.original_length < 1:
        raise ChunkCorruptionError(
            f"padding record (front={chunked.pad_front}, L={chunked.original_length}, "
            f"back={chunked.pad_back}) does not match {n_chunks} chunks of {c}")
    first = ops.pad(x[:, :, :hop], [(0, 0), (0, 1), (0, 0), (0, 0)])
    second = ops.pad(x[:, :, hop:], [(0, 0), (1, 0), (0, 0), (0, 0)])
    summed = (first + second).reshape(b, total, d)
    counts = np.full(n_chunks + 1, 2.0)
    counts[0] = counts[-1] = 1.0
    inv = np.repeat(1.0 / counts, hop).astype(x.dtype)[:, None]
    start = chunked.pad_front
    return (summed * Tensor(inv))[:, start : start + chunked.original_length]


def sinusoidal_table(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table.astype(dtype)


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng, dtype):
        self.fc1 = Linear(dim, mult * dim, rng, dtype=dtype)
        self.fc2 = Linear(mult * dim, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm self-attention + feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, ff_mult, rng, dtype)

    def forward(self, x: Tensor, weights: list | None = None) -> Tensor:
        if weights is not None:
            att, w = self.attn(self.norm1(x), return_weights=True)
            weights.append(w)
        else:
            att = self.attn(self.norm1(x))
        x = x + att
        return x + self.ff(self.norm2(x))


class TransformerStack(Module):
    """Sinusoidal positions + ``n_layers`` layers + final norm over x [N, S, D]."""

    def __init__(self, dim: int, heads: int, ff_mult: int, n_layers: int, rng, dtype=np.float32):
        self.layers = [TransformerLayer(dim, heads, ff_mult, rng, dtype) for _ in range(n_layers)]
        self.norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor, weights: list | None = None) -> Tensor:
        x = x + Tensor(sinusoidal_table(x.shape[-2], x.shape[-1], x.dtype))
        for layer in self.layers:
            x = layer(x, weights)
        return self.norm(x)


class IntraTransformer(TransformerStack):
    """Attention over the C positions inside each chunk, chunks independent."""

    def forward(self, h: Tensor, weights: list | None = None) -> Tensor:
        b, n, c, d = h.shape
        out = super().forward(h.reshape(b * n, c, d), weights)
        return out.reshape(b, n, c, d)


class InterTransformer(TransformerStack):
    """Attention across the I chunks at each fixed within-chunk position."""

    def forward(self, h: Tensor, weights: list | None = None) -> Tensor:
        b, n, c, d = h.shape
        x = ops.transpose(h, (0, 2, 1, 3)).reshape(b * c, n, d)
        out = super().forward(x, weights).reshape(b, c, n, d)
        return ops.transpose(out, (0, 2, 1, 3))


class CrossModalFusion(Module):
    """Each visual frame queries the C audio positions of its chunk.

    h_f[:, i, c] = h_a[:, i, c] + softmax(q_i K_i^T / sqrt(D)) V_i
    """

    def __init__(self, dim: int, rng, dtype=np.float32):
        self.query = Linear(dim, dim, rng, dtype=dtype)
        self.key = Linear(dim, dim, rng, dtype=dtype)
        self.value = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, hv: Tensor, ha: Tensor, return_weights: bool = False):
        b, n, c, d = ha.shape
        if hv.shape[-2] != n:
            raise ShapeError(f"visual frames {hv.shape[-2]} != chunk count {n}; align first")
        q = self.query(hv).reshape(b, n, 1, d)
        k = self.key(ha)
        v = self.value(ha)
        res = ops.scaled_dot_product_attention(q, k, v, scale=1.0 / math.sqrt(d), return_weights=return_weights)
        att, w = res if return_weights else (res, None)
        out = ha + att
        return (out, w) if return_weights else out


class SeparationModule(Module):
    def __init__(self, dim: int, heads: int, ff_mult: int, n_intra: int, n_inter: int,
                 n_repeats: int, rng, dtype=np.float32):
        self.intra = [IntraTransformer(dim, heads, ff_mult, n_intra, rng, dtype) for _ in range(n_repeats)]
        self.cross = [CrossModalFusion(dim, rng, dtype) for _ in range(n_repeats)]
        self.inter = [InterTransformer(dim, heads, ff_mult, n_inter, rng, dtype) for _ in range(n_repeats)]
        self.mask_out = Linear(dim, dim, rng, dtype=dtype)

    def forward(self, chunks: Tensor, hv: Tensor, weights: list | None = None) -> Tensor:
        h = chunks
        for intra, cross, inter in zip(self.intra, self.cross, self.inter):
            h = intra(h, weights)
            h = cross(hv, h)
            h = inter(h, weights)
        return ops.relu(self.mask_out(h))


class Separator(Module):
    def __init__(self, dim: int, chunk_size: int, heads: int, ff_mult: int, n_intra: int,
                 n_inter: int, n_repeats: int, rng, dtype=np.float32):
        self.chunk_size = chunk_size
        self.in_norm = LayerNorm(dim, dtype=dtype)
        self.in_proj = Linear(dim, dim, rng, dtype=dtype)
        self.module = SeparationModule(dim, heads, ff_mult, n_intra, n_inter, n_repeats, rng, dtype)

    def prepare(self, h_a: Tensor) -> ChunkedFeature:
        return chunk(self.in_proj(self.in_norm(h_a)), self.chunk_size)

    def branch(self, chunked: ChunkedFeature, hv: Tensor) -> Tensor:
        """One weight-shared branch: chunk masks -> full-length mask [B, L, D]."""
        hv = align_to_chunks(hv, chunked.n_chunks)
        return overlap_add(chunked.replace(self.module(chunked.chunks, hv)))

    def separate_all(self, h_a: Tensor, visuals: list[Tensor]) -> list[Tensor]:
        if not visuals:
            raise ContractError("separate_all needs at least one visual cue (one branch)")
        chunked = self.prepare(h_a)
        return [self.branch(chunked, hv) for hv in visuals]

    def forward(self, h_a: Tensor, visuals: list[Tensor]) -> list[Tensor]:
        return self.separate_all(h_a, visuals)
