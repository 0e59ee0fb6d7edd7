"""Procedural speakers and SNR-controlled mixing.

A speaker is a 4-harmonic tone stack whose fundamental sits in one of three
disjoint bands; an utterance modulates it with a smooth random envelope that
contains silent gaps. The matching visual stream carries, per video frame,
the envelope value, a 4-dim identity code and 3 dims of Gaussian noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .io import Waveform

F0_BANDS = ((100.0, 150.0), (160.0, 220.0), (240.0, 320.0))
N_HARMONICS = 4
VISUAL_DIM = 8
CONTROL_RATE = 100          # envelope control points per second
SPEAKER_PEAK = 0.5
MIX_PEAK = 0.9


class DegenerateSourceError(ValueError):
    """A source with zero energy cannot be placed at a target SNR."""


@dataclass(frozen=True)
class SpeakerProfile:
    seed: int
    band: int
    f0: float
    harmonics: tuple[float, ...]        # relative amplitudes, first is 1

    @property
    def identity_code(self) -> np.ndarray:
        lo, hi = F0_BANDS[0][0], F0_BANDS[-1][1]
        pitch = 2.0 * (self.f0 - lo) / (hi - lo) - 1.0
        timbre = [2.0 * (a - 0.6) for a in self.harmonics[1:]]
        return np.array([pitch, *timbre])


def speaker_profile(seed: int) -> SpeakerProfile:
    rng = np.random.default_rng([int(seed), 0x5EED])
    band = int(rng.integers(len(F0_BANDS)))
    f0 = float(rng.uniform(*F0_BANDS[band]))
    amps = (1.0,) + tuple(float(a) for a in rng.uniform(0.2, 1.0, size=N_HARMONICS - 1))
    return SpeakerProfile(int(seed), band, f0, amps)


def _envelope(rng: np.random.Generator, n_ctrl: int) -> np.ndarray:
    z = gaussian_filter1d(rng.normal(size=n_ctrl + 24), sigma=3.0)[12:-12]
    env = 0.2 + 0.8 * (z - z.min()) / max(z.max() - z.min(), 1e-12)
    # silent gaps covering 10-30% of the utterance
    n_gaps = int(rng.integers(1, 4))
    total_gap = int(round(rng.uniform(0.1, 0.3) * n_ctrl))
    gap_lens = np.diff(np.round(np.linspace(0, total_gap, n_gaps + 1)).astype(int))
    speech = rng.dirichlet(np.ones(n_gaps + 1)) * (n_ctrl - total_gap)
    speech_lens = np.diff(np.round(np.concatenate([[0.0], np.cumsum(speech)])).astype(int))
    pos = 0
    ramp = np.linspace(0.0, 1.0, 5)[1:-1]
    for i in range(n_gaps):
        pos += speech_lens[i]
        lo, hi = pos, pos + gap_lens[i]
        env[lo:hi] = 0.0
        # short fades on both sides of the gap
        for j, r in enumerate(ramp[::-1]):
            if lo - 1 - j >= 0:
                env[lo - 1 - j] *= r
        for j, r in enumerate(ramp):
            if hi + j < n_ctrl:
                env[hi + j] *= r
        pos = hi
    return env


def gen_speaker(seed: int, duration: float, sample_rate: int, utterance_seed: int = 0,
                frame_rate: int = 25) -> tuple[Waveform, np.ndarray]:
    """One utterance of speaker ``seed`` -> (waveform, visual frames [8, I_raw])."""
    if duration < 0.5:
        raise ValueError(f"duration must be at least 0.5 s, got {duration}")
    prof = speaker_profile(seed)
    rng = np.random.default_rng([int(seed), int(utterance_seed), 0xA0D10])
    n = int(round(duration * sample_rate))
    n_ctrl = int(math.ceil(duration * CONTROL_RATE)) + 1
    t_ctrl = np.arange(n_ctrl) / CONTROL_RATE
    env_ctrl = _envelope(rng, n_ctrl)

    t = np.arange(n) / sample_rate
    env = np.interp(t, t_ctrl, env_ctrl)
    jitter = 1.0 + rng.uniform(-0.02, 0.02)
    vib_rate, vib_phase = rng.uniform(3.0, 6.0), rng.uniform(0, 2 * np.pi)
    f0_t = prof.f0 * jitter * (1.0 + 0.03 * np.sin(2 * np.pi * vib_rate * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate
    offsets = rng.uniform(0, 2 * np.pi, size=N_HARMONICS)
    tone = sum(a * np.sin((h + 1) * phase + offsets[h]) for h, a in enumerate(prof.harmonics))
    x = env * tone
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= SPEAKER_PEAK / peak

    n_frames = int(math.ceil(duration * frame_rate))
    centres = (np.arange(n_frames) + 0.5) / frame_rate
    frames = np.empty((VISUAL_DIM, n_frames))
    frames[0] = np.interp(centres, t_ctrl, env_ctrl)
    frames[1:5] = prof.identity_code[:, None]
    frames[5:8] = rng.normal(size=(3, n_frames))
    return Waveform(x, sample_rate), frames.astype(np.float32)


@dataclass
class MixResult:
    mixture: np.ndarray
    sources: list[np.ndarray]       # rescaled, gain already applied
    noise: np.ndarray
    gain: float


def energy(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def mix(sources, snr_dbs, noise_snr_db: float | None = None,
        rng: np.random.Generator | None = None) -> MixResult:
    """Sum sources at the requested SNRs relative to the first one.

    ``snr_dbs[i]`` sets 10 log10(E(s_1) / E(s_{i+2})). White noise, when
    requested, sits ``noise_snr_db`` below the clean sum. The result is scaled
    down (never up) so its peak stays at or below 0.9, and the same gain is
    applied to the returned sources and noise.
    """
    srcs = [np.asarray(s, dtype=np.float64).reshape(-1) for s in sources]
    if not srcs:
        raise ValueError("mix needs at least one source")
    if len(snr_dbs) != len(srcs) - 1:
        raise ValueError(f"{len(srcs)} sources need {len(srcs) - 1} SNR values, got {len(snr_dbs)}")
    if any(s.size != srcs[0].size for s in srcs):
        raise ValueError("sources must share one length")
    for i, s in enumerate(srcs):
        if energy(s) == 0.0:
            raise DegenerateSourceError(f"source {i} has zero energy")
    ref_e = energy(srcs[0])
    scaled = [srcs[0]]
    for s, snr in zip(srcs[1:], snr_dbs):
        scaled.append(s * math.sqrt(ref_e / (energy(s) * 10.0 ** (snr / 10.0))))
    clean = np.sum(scaled, axis=0)
    noise = np.zeros_like(clean)
    if noise_snr_db is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(size=clean.size)
        noise = w * math.sqrt(energy(clean) / (energy(w) * 10.0 ** (noise_snr_db / 10.0)))
    x = clean + noise
    peak = float(np.max(np.abs(x)))
    gain = MIX_PEAK / peak if peak > MIX_PEAK else 1.0
    if gain != 1.0:
        x = x * gain
        scaled = [s * gain for s in scaled]
        noise = noise * gain
    return MixResult(x, scaled, noise, gain)
