"""Speaker presence head: mask -> existence probability, then thresholding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Linear, Module, MultiHeadAttention, Parameter, Tensor, ops
from .numerics.tensor import ContractError


class PairingError(ValueError):
    """Masks and waveforms do not pair up one-to-one."""


@dataclass
class PresenceEstimate:
    probabilities: list[float]
    threshold: float
    selected_indices: list[int] = field(default_factory=list)

    @property
    def estimated_count(self) -> int:
        return len(self.selected_indices)


class CountingHead(Module):
    def __init__(self, dim: int, count_dim: int, kernel: int, pool: int, heads: int,
                 mlp_hidden: int, rng: np.random.Generator, dtype=np.float32,
                 activation: str = "gelu"):
        self.kernel = kernel
        self.pool = pool
        self.activation = activation
        scale = np.sqrt(2.0 / (dim * kernel))
        self.conv_w = Parameter(rng.normal(0.0, scale, size=(count_dim, dim, kernel)), dtype=dtype)
        self.conv_b = Parameter(np.zeros(count_dim), dtype=dtype)
        self.attn = MultiHeadAttention(count_dim, heads, rng, dtype=dtype)
        self.fc1 = Linear(count_dim, mlp_hidden, rng, dtype=dtype)
        self.fc2 = Linear(mlp_hidden, 1, rng, dtype=dtype)

    def mask_to_frames(self, mask: Tensor) -> Tensor:
        """[B, L, D] mask -> [B, L//pool, D_c] frame features."""
        length = mask.shape[-2]
        if length < self.pool:
            raise ContractError(f"mask too short for pooling: L={length} < {self.pool}")
        x = ops.swapaxes(mask, -1, -2)
        # edge-replicate padding: a time-constant mask gives time-constant frames
        half = self.kernel // 2
        if half:
            x = ops.concat([x[..., :1]] * half + [x] + [x[..., -1:]] * half, axis=-1)
        h = ops.gelu(ops.conv1d(x, self.conv_w, self.conv_b))
        h = ops.max_pool1d(h, self.pool)
        return ops.swapaxes(h, -1, -2)

    def attend_pool(self, frames: Tensor, return_weights: bool = False):
        """Self-attention over frames, then mean over time -> [B, D_c]."""
        if return_weights:
            att, w = self.attn(frames, return_weights=True)
            return ops.mean(att, axis=-2), w
        return ops.mean(self.attn(frames), axis=-2)

    def logit(self, f: Tensor) -> Tensor:
        h = self.fc1(f)
        if self.activation == "gelu":
            h = ops.gelu(h)
        return self.fc2(h)[..., 0]

    def presence_probability(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.logit(f))

    def forward(self, mask: Tensor) -> Tensor:
        """[B, L, D] -> presence probabilities [B]."""
        return self.presence_probability(self.attend_pool(self.mask_to_frames(mask)))


def select(probabilities, threshold: float) -> PresenceEstimate:
    """Keep every branch whose probability meets or exceeds ``threshold``."""
    probs = [float(p) for p in probabilities]
    chosen = [i for i, p in enumerate(probs) if p >= threshold]
    return PresenceEstimate(probs, float(threshold), chosen)


def count_and_select(masks: list[Tensor], waveforms: list, threshold: float, head: CountingHead,
                     probabilities=None):
    """Score each branch mask and keep the waveforms that pass the threshold.

    ``probabilities`` bypasses the head (oracle injection). Returns the
    estimate and the selected waveforms in branch order.
    """
    if len(masks) != len(waveforms):
        raise PairingError(f"{len(masks)} masks but {len(waveforms)} waveforms")
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must lie in (0, 1], got {threshold}")
    if probabilities is None:
        probabilities = [head(m).data.reshape(-1)[0] for m in masks]
    est = select(probabilities, threshold)
    return est, [waveforms[i] for i in est.selected_indices]
