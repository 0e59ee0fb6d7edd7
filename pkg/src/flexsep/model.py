"""Full audio-visual separation network plus counting head.

The backbone is front-end -> two-branch encoder -> dual-path separator (one
weight-shared branch per visual cue) -> decoder. Masks gate the non-negative
front-end features; the encoder output only drives the separator.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .audio_codec import Decoder, EncodedAudio, Frontend
from .branchformer import BranchformerEncoder
from .config import ModelConfig
from .counting import CountingHead, PresenceEstimate, select
from .losses import JointLossState
from .numerics import Module, Tensor, no_grad, ops
from .numerics.tensor import ContractError
from .separator import Separator
from .visual import VisualFrontend

BACKBONE = ("frontend", "encoder", "visual", "separator", "decoder")


@dataclass
class SeparationOutput:
    masks: list[Tensor]                 # per branch, [B, L, D]
    waveforms: list[Tensor]             # per branch, [B, T]
    probabilities: np.ndarray | None = None     # [M, B]
    selection: list[PresenceEstimate] = field(default_factory=list)


class AVFSNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = np.random.default_rng(seed)
        self.frontend = Frontend(cfg.dim, cfg.kernel, rng, dtype=dt)
        self.encoder = BranchformerEncoder(cfg.dim, cfg.hidden, cfg.heads, cfg.csgu_kernel, cfg.n_blocks,
                                           rng, dtype=dt, alpha_override=cfg.alpha_override)
        self.visual = VisualFrontend(cfg.visual_dim, cfg.embed_dim, cfg.dim, cfg.tcn_blocks,
                                     cfg.tcn_kernel, rng, dtype=dt)
        self.separator = Separator(cfg.dim, cfg.chunk, cfg.sep_heads, cfg.ff_mult, cfg.n_intra,
                                   cfg.n_inter, cfg.n_repeats, rng, dtype=dt)
        self.decoder = Decoder(cfg.dim, cfg.kernel, rng, dtype=dt)
        self.counter = CountingHead(cfg.dim, cfg.count_dim, cfg.count_kernel, cfg.count_pool,
                                    cfg.count_heads, cfg.mlp_hidden, rng, dtype=dt,
                                    activation=cfg.head_activation)
        self.joint = JointLossState(dtype=dt)
        # debug hook: constant mask instead of the separator (identity model)
        self.mask_override: float | None = None

    # -- parameter groups ----------------------------------------------------

    def backbone_parameters(self):
        return [p for name, p in self.named_parameters() if name.split(".", 1)[0] in BACKBONE]

    def head_parameters(self):
        return self.counter.parameters()

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            if name.split(".", 1)[0] in BACKBONE:
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward pieces --------------------------------------------------------

    def _as_batch(self, x, ndim: int) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        if t.ndim == ndim - 1:
            t = t.reshape((1,) + t.shape)
        if t.ndim != ndim:
            raise ContractError(f"expected a {ndim - 1}-D sample or {ndim}-D batch, got shape {t.shape}")
        return t

    def encode(self, wave) -> tuple[EncodedAudio, Tensor]:
        """-> (front-end features used for masking, encoder output h_a)."""
        enc = self.frontend(self._as_batch(wave, 2))
        return enc, self.encoder(enc.features)

    def visual_features(self, frames) -> Tensor:
        return self.visual(self._as_batch(frames, 3))

    def masks(self, wave, visuals: list) -> tuple[EncodedAudio, list[Tensor]]:
        if not visuals:
            raise ContractError("need at least one visual cue (one branch)")
        enc, h_a = self.encode(wave)
        if self.mask_override is not None:
            m = Tensor(np.full(h_a.shape, self.mask_override, dtype=h_a.dtype))
            return enc, [m for _ in visuals]
        hv = [self.visual_features(v) for v in visuals]
        return enc, self.separator.separate_all(h_a, hv)

    def separate(self, wave, visuals: list) -> SeparationOutput:
        enc, masks = self.masks(wave, visuals)
        waves = [self.decoder(m, enc) for m in masks]
        return SeparationOutput(masks, waves)

    def presence(self, masks: list[Tensor]) -> list[Tensor]:
        """Presence probability per branch, each [B]."""
        return [self.counter(m) for m in masks]

    def infer(self, wave, visuals: list, threshold: float = 0.5, probabilities=None) -> SeparationOutput:
        """Full inference without gradients: masks, waveforms, thresholded selection.

        ``probabilities`` ([M, B]) bypasses the counting head.
        """
        if not 0.0 < threshold <= 1.0:
            raise ContractError(f"threshold must lie in (0, 1], got {threshold}")
        with no_grad():
            out = self.separate(wave, visuals)
            if probabilities is None:
                probs = np.stack([p.data for p in self.presence(out.masks)])
            else:
                probs = np.asarray(probabilities, dtype=np.float64).reshape(len(visuals), -1)
        out.probabilities = probs
        out.selection = [select(probs[:, b], threshold) for b in range(probs.shape[1])]
        return out

    def forward(self, wave, visuals: list) -> SeparationOutput:
        return self.separate(wave, visuals)


def identity_model(cfg: ModelConfig, seed: int = 0) -> AVFSNet:
    """Backbone whose decode(encode(x)) reproduces x away from the edges.

    The front-end holds +/- unit impulses for every tap (so relu(+x) - relu(-x)
    recovers each sample) and the decoder averages the two overlapping
    windows. Masks are pinned to 1.
    """
    k = cfg.kernel
    model = AVFSNet(ModelConfig(**{**cfg.__dict__, "dim": 2 * k, "heads": 1, "sep_heads": 1}), seed)
    fw = np.zeros((2 * k, 1, k))
    dw = np.zeros((2 * k, 1, k))
    for tap in range(k):
        fw[2 * tap, 0, tap], fw[2 * tap + 1, 0, tap] = 1.0, -1.0
        dw[2 * tap, 0, tap], dw[2 * tap + 1, 0, tap] = 0.5, -0.5
    model.frontend.weight.data = fw.astype(model.cfg.np_dtype)
    model.decoder.weight.data = dw.astype(model.cfg.np_dtype)
    model.mask_override = 1.0
    return model


def stack_probabilities(probs: list[Tensor]) -> Tensor:
    return ops.stack(probs, axis=0)
