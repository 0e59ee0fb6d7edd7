"""Time every kernel on both backends at desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--dtype float32] [--model]

Prints a markdown table: best-of-N wall time per call and the numpy/numba
ratio. ``--model`` adds one forward+backward step of the desk model.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from flexsep.numerics import kernels


def cases(dtype, rng):
    f = lambda *s: rng.standard_normal(s).astype(dtype)  # noqa: E731
    # desk scale: B=4, T=16000, D=64, L=1999, chunk 80
    wav = f(4, 1, 16000)
    w_front = f(64, 1, 16)
    feats = f(4, 64, 1999)
    w_vis = f(64, 64, 3)
    dw_x = f(4, 64, 2001)
    dw_w = f(64, 3)
    rows = f(4 * 1999, 64)
    gamma, beta = f(64), f(64)
    scores = f(4 * 4 * 80, 80)
    pool_x = f(4 * 8, 1996)
    _, xhat, rstd = kernels.layer_norm_forward(rows, gamma, beta, 1e-5)
    p = kernels.softmax_forward(scores)
    _, idx = kernels.maxpool_forward(pool_x, 4)
    gy_front = f(4, 64, 1999)
    return {
        "conv1d_forward (front-end)": lambda: kernels.conv1d_forward(wav, w_front, 8, 1),
        "conv1d_backward_weight": lambda: kernels.conv1d_backward_weight(gy_front, wav, 16, 8, 1),
        "conv1d_backward_input": lambda: kernels.conv1d_backward_input(gy_front, w_front, 8, 1, 16000),
        "conv1d_forward (k=3, dilated)": lambda: kernels.conv1d_forward(feats, w_vis, 1, 2),
        "depthwise_forward": lambda: kernels.depthwise_forward(dw_x, dw_w),
        "depthwise_backward": lambda: kernels.depthwise_backward(feats, dw_x, dw_w),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(rows, gamma, beta, 1e-5),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(rows, xhat, rstd, gamma),
        "gelu_forward": lambda: kernels.gelu_forward(rows),
        "gelu_backward": lambda: kernels.gelu_backward(rows, rows),
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(p, scores),
        "maxpool_forward": lambda: kernels.maxpool_forward(pool_x, 4),
        "maxpool_backward": lambda: kernels.maxpool_backward(pool_x[:, :499], idx, 4, 1996),
    }


def model_step():
    from flexsep.config import model_preset
    from flexsep.losses import si_snr_loss
    from flexsep.model import AVFSNet
    from flexsep.numerics import backward

    cfg = model_preset("desk")
    model = AVFSNet(cfg, seed=0)
    rng = np.random.default_rng(0)
    wave = rng.standard_normal((4, 16000)).astype(np.float32)
    vis = rng.standard_normal((4, cfg.visual_dim, 50)).astype(np.float32)
    ref = rng.standard_normal((4, 16000)).astype(np.float32)

    def run():
        for p in model.parameters():
            p.grad = None
        backward(si_snr_loss(model.separate(wave, [vis]).waveforms[0], ref))
    return run


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up (JIT compile, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    ap.add_argument("--model", action="store_true", help="also time a desk-model training step")
    args = ap.parse_args()
    backends = kernels.available_backends()
    dtype = np.dtype(args.dtype)
    results: dict[str, dict[str, float]] = {}
    for name in backends:
        with kernels.use_backend(name):
            for label, fn in cases(dtype, np.random.default_rng(0)).items():
                results.setdefault(label, {})[name] = best_of(fn, args.repeat)
            if args.model:
                results.setdefault("desk model fwd+bwd, B=4", {})[name] = best_of(model_step(), 3)
    print(f"dtype {dtype}, best of {args.repeat}\n")
    print("| kernel | " + " | ".join(f"{b} (ms)" for b in backends) + " | numpy/numba |")
    print("|---|" + "---|" * len(backends) + "---|")
    for label, row in results.items():
        cells = " | ".join(f"{row[b] * 1e3:.3f}" for b in backends)
        ratio = f"{row['numpy'] / row['numba']:.2f}" if "numba" in row else "n/a"
        print(f"| {label} | {cells} | {ratio} |")


if __name__ == "__main__":
    main()
