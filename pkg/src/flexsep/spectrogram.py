"""Log-magnitude STFT / mel spectrograms and their PNG or CSV rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

N_FFT = 512
HOP = 128
N_MELS = 40
LOG_FLOOR_DB = -160.0       # 20 log10(1e-8)


def stft_magnitude(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| with a periodic Hann window, [frames, n_fft // 2 + 1]."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size))
    frames = sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * get_window("hann", n_fft), axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-spaced filters, [n_mels, n_fft // 2 + 1]."""
    freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_spectrogram(x: np.ndarray, sample_rate: int, mel: bool = False) -> np.ndarray:
    """dB spectrogram [frames, bins], floored at -160 dB."""
    mag = stft_magnitude(x)
    if mel:
        mag = mag @ mel_filterbank(sample_rate).T
    return 20.0 * np.log10(np.maximum(mag, 10.0 ** (LOG_FLOOR_DB / 20.0)))


def write_csv(path, spec: np.ndarray) -> None:
    np.savetxt(path, spec, delimiter=",", fmt="%.6f")


def render_png(path, specs: list[np.ndarray], titles: list[str], sample_rate: int, mel: bool) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(specs)
    fig, axes = plt.subplots(n, 1, figsize=(8, 2.6 * n), squeeze=False)
    for ax, spec, title in zip(axes[:, 0], specs, titles):
        dur = spec.shape[0] * HOP / sample_rate
        top = spec.shape[1] if mel else sample_rate / 2
        im = ax.imshow(spec.T, origin="lower", aspect="auto", extent=(0, dur, 0, top),
                       vmin=max(spec.max() - 80.0, LOG_FLOOR_DB), vmax=spec.max(), cmap="magma")
        ax.set_title(title, fontsize=9)
        ax.set_ylabel("mel band" if mel else "Hz")
        fig.colorbar(im, ax=ax, label="dB")
    axes[-1, 0].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit(paths: list[Path], waves: list[np.ndarray], sample_rate: int, out, mel: bool = False,
         annotations: list[str] | None = None, fmt: str = "png") -> list[Path]:
    """One PNG grid (a panel per input) or one CSV per input; returns written files."""
    out = Path(out)
    specs = [log_spectrogram(w, sample_rate, mel) for w in waves]
    titles = [p.name + (f"  ({a})" if a else "") for p, a in zip(paths, annotations or [""] * len(paths))]
    if fmt == "png":
        try:
            render_png(out, specs, titles, sample_rate, mel)
            return [out]
        except ImportError:
            fmt = "csv"
    base = out.with_suffix("") if out.suffix else out
    base.mkdir(parents=True, exist_ok=True)
    written = []
    for p, spec in zip(paths, specs):
        target = base / f"{p.stem}.csv"
        write_csv(target, spec)
        written.append(target)
    return written
