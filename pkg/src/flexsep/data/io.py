"""WAV (PCM16 mono) and visual-stream binary I/O.

Visual stream layout, all little-endian::

    b"AVFS" | u32 F_v | u32 frame_rate | u32 I_raw | f32[F_v * I_raw] (row-major F_v x I_raw)
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VISUAL_MAGIC = b"AVFS"
_HEADER = struct.Struct("<4sIII")
_PCM_SCALE = 32768.0


class FormatError(ValueError):
    """A file on disk does not match the expected container layout."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def write_wav(path, wav: Waveform | np.ndarray, sample_rate: int | None = None) -> None:
    if not isinstance(wav, Waveform):
        wav = Waveform(np.asarray(wav), int(sample_rate))
    x = np.asarray(wav.samples, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: refusing to write non-finite samples")
    pcm = np.clip(np.round(x * _PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wav.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            if channels != 1:
                raise FormatError(f"{path}: unsupported channels={channels} (mono only)")
            if width != 2:
                raise FormatError(f"{path}: unsupported sample width={8 * width} bits (PCM16 only)")
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from None
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: data chunk holds {len(raw)} bytes, header promises {2 * n}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    return Waveform(samples, rate)


def write_visual(path, frames: np.ndarray, frame_rate: int) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"visual frames must be [F_v, I_raw], got shape {frames.shape}")
    f_v, n = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(VISUAL_MAGIC, f_v, int(frame_rate), n))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_visual(path) -> tuple[np.ndarray, int]:
    """-> (frames [F_v, I_raw] float32, frame_rate)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, f_v, rate, n = _HEADER.unpack_from(blob)
    if magic != VISUAL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VISUAL_MAGIC!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * f_v * n:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header F_v={f_v} I_raw={n} "
                          f"needs {4 * f_v * n}")
    return np.frombuffer(payload, dtype="<f4").reshape(f_v, n).astype(np.float32), rate
