"""``flexsep`` command line.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing dependency
checkpoint, 5 data mismatch (sample or frame rate).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, data_preset, load_config, model_preset
from .data import FormatError, Manifest, ManifestError, build_dataset, read_visual, read_wav, write_wav
from .losses import si_snr
from .training import (
    CheckpointError, DependencyError, evaluate, model_from_checkpoint, train_stage1, train_stage2,
    train_stage3,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEPENDENCY, EXIT_MISMATCH = 0, 2, 3, 4, 5


class DataMismatchError(ValueError):
    """Input files disagree with the checkpoint's rates."""


def _say(msg: str) -> None:
    print(msg, flush=True)


def _resolve(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(args.run_dir) / p


def _echo_config(out: Path, cfg: Config, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    (out / "seed").write_text(f"{seed}\n")


def _config(args, base: Config | None = None) -> Config:
    path = _resolve(args, args.config) if getattr(args, "config", None) else None
    return load_config(path, args.set or [], base=base)


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    base = Config(data=data_preset(args.preset))
    cfg = _config(args, base)
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = _resolve(args, args.out)
    _echo_config(out, cfg, cfg.data.seed)
    path = build_dataset(cfg.data, out)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    _say(f"manifest: {path}")
    _say(f"sha256: {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = Config(model=model_preset(args.model_preset))
    cfg = _config(args, base)
    cfg.train.stage = args.stage
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = _resolve(args, args.out)
    manifest = Manifest(_resolve(args, args.manifest))
    if manifest.sample_rate != cfg.model.sample_rate:
        raise DataMismatchError(f"manifest sample rate {manifest.sample_rate} Hz != model.sample_rate "
                                f"{cfg.model.sample_rate} Hz")
    init = _resolve(args, args.init) if args.init else None
    transfer = _resolve(args, args.transfer_from) if args.transfer_from else None
    _echo_config(out, cfg, cfg.train.seed)
    if args.stage == 1:
        res = train_stage1(cfg, manifest, out, transfer_from=transfer, kind=args.kind, echo=_say)
    elif args.stage == 2:
        res = train_stage2(cfg, manifest, init, out, echo=_say)
    else:
        res = train_stage3(cfg, manifest, init, out, kind=args.kind or "23mix", echo=_say)
    _say(f"checkpoint: {res.last_path}")
    _say(f"best: {res.best_path}")
    return EXIT_OK


def _load_visuals(args, model_cfg) -> list[np.ndarray]:
    frames = []
    for v in args.visuals:
        f, rate = read_visual(_resolve(args, v))
        if rate != model_cfg.frame_rate:
            raise DataMismatchError(f"{v}: frame rate {rate} != checkpoint {model_cfg.frame_rate}")
        if f.shape[0] != model_cfg.visual_dim:
            raise DataMismatchError(f"{v}: F_v={f.shape[0]} != checkpoint visual_dim {model_cfg.visual_dim}")
        frames.append(f)
    return frames


def cmd_separate(args) -> int:
    model, cfg, _ = model_from_checkpoint(_resolve(args, args.ckpt))
    wav = read_wav(_resolve(args, args.mixture))
    if wav.sample_rate != cfg.model.sample_rate:
        raise DataMismatchError(f"{args.mixture}: sample rate {wav.sample_rate} Hz != checkpoint "
                                f"{cfg.model.sample_rate} Hz")
    visuals = _load_visuals(args, cfg.model)
    if not visuals:
        raise ConfigError("separate needs at least one visual stream")
    out = _resolve(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = model.infer(wav.samples, visuals, threshold=args.tau)
    sel = res.selection[0]
    report = {"mixture": str(args.mixture), "tau": args.tau, "n_selected": sel.estimated_count, "branches": []}
    for k, p in enumerate(sel.probabilities):
        entry = {"branch": k, "visual": str(args.visuals[k]), "p": p, "selected": k in sel.selected_indices,
                 "file": None}
        if entry["selected"]:
            name = f"branch_{k}.wav"
            write_wav(out / name, res.waveforms[k].data[0], wav.sample_rate)
            entry["file"] = name
        report["branches"].append(entry)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _say(f"selected {sel.estimated_count} of {len(visuals)} branches; report: {out / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, cfg, _ = model_from_checkpoint(_resolve(args, args.ckpt))
    manifest = Manifest(_resolve(args, args.manifest))
    if manifest.sample_rate != cfg.model.sample_rate:
        raise DataMismatchError(f"manifest sample rate {manifest.sample_rate} != checkpoint {cfg.model.sample_rate}")
    if not manifest.kinds():
        raise ConfigError(f"{args.manifest}: manifest holds no datasets; nothing to evaluate")
    kind = args.mix or manifest.kinds()[0]
    samples = manifest.split(kind, args.split)
    if len(samples) == 0:
        raise ConfigError(f"{args.manifest}: {kind}/{args.split} holds no samples; nothing to evaluate")
    rec = evaluate(model, samples, threshold=args.tau, batch_size=args.batch_size, limit=args.limit,
                   oracle=args.oracle)
    out = _resolve(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_speaker.csv").write_text(rec.to_csv())
    agg = {"mix": kind, "split": args.split, "tau": args.tau, "oracle": bool(args.oracle), **rec.aggregate()}
    (out / "aggregate.json").write_text(json.dumps(agg, indent=1, sort_keys=True) + "\n")
    _say(f"SI-SDRi {agg['si_sdri']:.3f} dB  SDRi {agg['sdri']:.3f} dB  SCA {agg['sca']:.4f} "
         f"({agg['n_samples']} samples)")
    return EXIT_OK


def cmd_spectrogram(args) -> int:
    from .spectrogram import emit

    paths = [_resolve(args, p) for p in args.wavs]
    waves = [read_wav(p) for p in paths]
    rates = {w.sample_rate for w in waves}
    if len(rates) != 1:
        raise DataMismatchError(f"inputs mix sample rates {sorted(rates)}")
    notes = None
    if args.reference:
        ref = read_wav(_resolve(args, args.reference))
        if ref.sample_rate not in rates:
            raise DataMismatchError("reference sample rate differs from the inputs")
        notes = []
        for w in waves:
            n = min(w.samples.size, ref.samples.size)
            notes.append(f"SI-SDR {si_snr(w.samples[:n], ref.samples[:n]):.2f} dB")
    written = emit(paths, [w.samples for w in waves], rates.pop(), _resolve(args, args.out),
                   mel=args.mel, annotations=notes, fmt=args.format)
    for w in written:
        _say(str(w))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexsep", description="Audio-visual separation for a flexible number of speakers.")
    ap.add_argument("--run-dir", default=".", help="root for every relative path (default: cwd)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (sections model/data/train)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("gen-data", help="synthesise a dataset and its manifest")
    g.add_argument("--preset", default="desk")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="checkpoint of the previous stage (stages 2 and 3)")
    t.add_argument("--transfer-from", help="stage-1 checkpoint; fine-tune on 3-speaker mixtures")
    t.add_argument("--kind", help="mixture kind to train on (default 2mix; 3mix with transfer; 23mix in stage 3)")
    t.add_argument("--model-preset", default="desk")
    t.add_argument("--seed", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one mixture given per-speaker visual streams")
    s.add_argument("mixture")
    s.add_argument("visuals", nargs="*")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--out", default="separated")
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="metrics with the zero-penalty rule and SCA")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--mix", help="mixture kind (default: first in the manifest)")
    e.add_argument("--split", default="test")
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--out", default="eval")
    e.add_argument("--limit", type=int)
    e.add_argument("--batch-size", type=int, default=4)
    e.add_argument("--oracle", action="store_true", help="inject oracle presence probabilities")
    e.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("spectrogram", help="log-magnitude (mel) spectrogram grid")
    sp.add_argument("wavs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mel", action="store_true")
    sp.add_argument("--reference", help="clean reference; adds an SI-SDR note per panel")
    sp.add_argument("--format", choices=("png", "csv"), default="png")
    sp.set_defaults(func=cmd_spectrogram)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "tau", None) is not None and not 0.0 < args.tau <= 1.0:
            raise ConfigError(f"--tau must lie in (0, 1], got {args.tau}")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DataMismatchError as exc:
        print(f"data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, FormatError, ManifestError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
