"""Three-stage training driver and batch evaluation.

Stage 1 trains the backbone with one branch per sample (random active target)
on SI-SNR. With ``transfer_from`` it starts from a stage-1 checkpoint and
fine-tunes on 3-speaker mixtures. Stage 2 freezes the backbone and fits the
counting head on balanced positive/negative cue pairs. Stage 3 fine-tunes
everything with the uncertainty-weighted joint loss.

A run directory holds ``last.ckpt``, ``best.ckpt`` and ``train.jsonl``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..config import Config, config_from_dict
from ..data import Manifest, MixtureSample, SampleSet
from ..losses import (
    EvalRecord, bce, evaluate_with_penalty, joint_loss, sdr, si_snr, si_snr_loss,
)
from ..model import AVFSNet
from ..numerics import Tensor, backward, no_grad, ops
from ..numerics.tensor import ContractError
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam, EarlyStopping, ReduceLROnPlateau, clip_grad_norm

SISNR_OFFSET = 60.0     # keeps the separation term of the joint loss non-negative


class DependencyError(RuntimeError):
    """A stage was started without the checkpoint it builds on."""


# -- batching --------------------------------------------------------------------

def _stack(arrays, dtype) -> np.ndarray:
    return np.stack([np.asarray(a, dtype=dtype) for a in arrays])


def branch_inputs(samples: list[MixtureSample], branches: list[list[int]], dtype):
    """Mixture batch [B, T] plus one stacked visual batch per branch slot."""
    wave = _stack([s.mixture for s in samples], dtype)
    n_slots = len(branches[0])
    visuals = [_stack([s.visuals[br[j]] for s, br in zip(samples, branches)], dtype) for j in range(n_slots)]
    return wave, visuals


def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


# -- model / checkpoint helpers ------------------------------------------------------

def checkpoint_from(model: AVFSNet, cfg: Config, stage: int, epoch: int, best: float,
                    optimizer: Adam | None = None, extra: dict | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {
        "stage": stage,
        "epoch": epoch,
        "best_metric": best,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "backbone_hash": model.backbone_hash(),
    }
    if optimizer is not None:
        scalars, moments = optimizer.state()
        meta["optimizer"] = scalars
        tensors.update({f"optim.{k}": v for k, v in moments.items()})
    meta.update(extra or {})
    return Checkpoint(tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> tuple[AVFSNet, Config, Checkpoint]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = config_from_dict(ckpt.meta["config"])
    model = AVFSNet(cfg.model)
    try:
        model.load_state_dict(ckpt.model_state())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not fit the model: {exc}") from None
    return model, cfg, ckpt


def with_model(cfg: Config, source: Config) -> Config:
    """cfg with its model section replaced by the checkpoint's."""
    return Config(model=source.model, data=cfg.data, train=cfg.train)


def require_stage(path, stage: int, purpose: str) -> Checkpoint:
    if path is None:
        raise DependencyError(f"{purpose} needs a stage-{stage} checkpoint (pass --init)")
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"{purpose} needs a stage-{stage} checkpoint; {p} does not exist")
    ckpt = load_checkpoint(p)
    if ckpt.stage != stage:
        raise DependencyError(f"{purpose} needs a stage-{stage} checkpoint; {p} is from stage {ckpt.stage}")
    return ckpt


# -- logging -------------------------------------------------------------------------

class JsonlLog:
    def __init__(self, path: Path | None, echo: Callable[[str], None] | None = None):
        self.path = path
        self.echo = echo
        self.start = time.monotonic()
        self.records: list[dict] = []

    def write(self, epoch: int, split: str, loss: float, metrics: dict, lr: float) -> None:
        rec = {"epoch": epoch, "split": split, "loss": float(loss),
               "metrics": {k: float(v) for k, v in metrics.items()}, "lr": float(lr),
               "wallclock": round(time.monotonic() - self.start, 3)}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if self.echo is not None:
            shown = " ".join(f"{k}={v:.4g}" for k, v in rec["metrics"].items())
            self.echo(f"epoch {epoch} {split:5s} loss={loss:.4f} {shown} lr={lr:.2e} t={rec['wallclock']:.0f}s")


# -- generic loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    run_dir: Path | None
    best_path: Path | None
    last_path: Path | None
    history: list[dict] = field(default_factory=list)
    best_metric: float = math.inf
    epochs_run: int = 0
    stopped_early: bool = False
    model: AVFSNet | None = None


def fit(model: AVFSNet, cfg: Config, stage: int, named_params, train_set: SampleSet,
        batch_loss: Callable, validate: Callable, run_dir=None, lr: float | None = None,
        extra_meta: dict | None = None, echo=None, after_step: Callable | None = None) -> TrainResult:
    """Shared epoch loop: Adam + clipping + plateau LR + early stopping.

    ``batch_loss(samples, rng) -> (loss Tensor, stats dict)``;
    ``validate() -> (val_loss, metrics dict)``, lower loss is better.
    """
    tc = cfg.train
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
    log = JsonlLog(run / "train.jsonl" if run else None, echo)
    named = list(named_params)
    params = [p for _, p in named]
    opt = Adam(named, lr=tc.lr if lr is None else lr)
    sched = ReduceLROnPlateau(tc.plateau_factor, tc.plateau_patience)
    stopper = EarlyStopping(tc.patience)
    result = TrainResult(run, run / "best.ckpt" if run else None, run / "last.ckpt" if run else None, model=model)
    n = len(train_set)
    if n == 0:
        raise ContractError("training split is empty")
    for epoch in range(tc.max_epochs):
        rng = np.random.default_rng([tc.seed, stage, epoch])
        order = rng.permutation(n)
        losses, stats_acc = [], {}
        for step, idx in enumerate(batches(n, tc.batch_size, order)):
            if tc.max_steps_per_epoch is not None and step >= tc.max_steps_per_epoch:
                break
            samples = [train_set[int(i)] for i in idx]
            opt.zero_grad()
            loss, stats = batch_loss(samples, rng)
            backward(loss)
            pre, post = clip_grad_norm(params, tc.clip_norm)
            stats = {**stats, "grad_norm": pre, "grad_norm_clipped": post}
            opt.step()
            if after_step is not None:
                after_step(stats)
            losses.append(loss.item())
            for k, v in stats.items():
                stats_acc.setdefault(k, []).append(float(v))
        train_loss = float(np.mean(losses))
        metrics = {k: float(np.mean(v)) for k, v in stats_acc.items()}
        metrics["grad_norm_clipped_max"] = float(np.max(stats_acc["grad_norm_clipped"]))
        log.write(epoch, "train", train_loss, metrics, opt.lr)
        val_loss, val_metrics = validate()
        is_best = stopper.update(val_loss, epoch)
        val_metrics = {**val_metrics, "best_loss": stopper.best}
        log.write(epoch, "valid", val_loss, val_metrics, opt.lr)
        sched.step(val_loss, opt)
        result.epochs_run = epoch + 1
        if run is not None:
            meta = {"early_stop": {"best_epoch": stopper.best_epoch, "best": stopper.best},
                    "last_val": {"loss": val_loss, **val_metrics}, **(extra_meta or {})}
            ckpt = checkpoint_from(model, cfg, stage, epoch, stopper.best, opt, meta)
            save_checkpoint(result.last_path, ckpt)
            if is_best:
                save_checkpoint(result.best_path, ckpt)
        if stopper.should_stop:
            result.stopped_early = True
            break
    result.history = log.records
    result.best_metric = stopper.best
    return result


# -- stage 1 ----------------------------------------------------------------------------

def stage1_validation(model: AVFSNet, valid: SampleSet, batch_size: int, limit: int | None = None):
    """Separation quality on every active speaker (no counting involved)."""
    n = len(valid) if limit is None else min(limit, len(valid))
    snr, snri, sdri_ = [], [], []
    dtype = model.cfg.np_dtype
    for idx in batches(n, batch_size):
        samples = [valid[int(i)] for i in idx]
        groups: dict[tuple, list[MixtureSample]] = {}
        for s in samples:
            groups.setdefault((s.n_active,), []).append(s)
        for group in groups.values():
            act = [[k for k, a in enumerate(s.active) if a] for s in group]
            wave, visuals = branch_inputs(group, act, dtype)
            with no_grad():
                out = model.separate(wave, visuals)
            for b, s in enumerate(group):
                for j, k in enumerate(act[b]):
                    est = out.waveforms[j].data[b]
                    ref = s.sources[k]
                    v = si_snr(est, ref)
                    snr.append(v)
                    snri.append(v - si_snr(s.mixture, ref))
                    sdri_.append(sdr(est, ref) - sdr(s.mixture, ref))
    return -float(np.mean(snr)), {"si_sdr": float(np.mean(snr)), "si_sdri": float(np.mean(snri)),
                                  "sdri": float(np.mean(sdri_))}


def train_stage1(cfg: Config, manifest: Manifest, run_dir=None, transfer_from=None,
                 kind: str | None = None, echo=None, model: AVFSNet | None = None) -> TrainResult:
    """Backbone training on SI-SNR with one random active target per sample."""
    extra = {}
    if transfer_from is not None:
        src = require_stage(transfer_from, 1, "transfer fine-tuning")
        model, src_cfg, _ = model_from_checkpoint(src)
        cfg = with_model(cfg, src_cfg)
        kind = kind or "3mix"
        extra["transfer_from"] = str(transfer_from)
    elif model is None:
        model = AVFSNet(cfg.model, seed=cfg.train.seed)
    kind = kind or "2mix"
    extra["kind"] = kind
    train_set = manifest.split(kind, "train")
    valid_set = manifest.split(kind, "valid")
    dtype = model.cfg.np_dtype
    named = [(k, p) for k, p in model.named_parameters() if k.split(".", 1)[0] not in ("counter", "joint")]

    def batch_loss(samples, rng):
        targets = [int(rng.choice([k for k, a in enumerate(s.active) if a])) for s in samples]
        wave, visuals = branch_inputs(samples, [[k] for k in targets], dtype)
        refs = _stack([s.sources[k] for s, k in zip(samples, targets)], dtype)
        out = model.separate(wave, visuals)
        return si_snr_loss(out.waveforms[0], refs), {}

    def validate():
        return stage1_validation(model, valid_set, cfg.train.batch_size, cfg.train.max_valid)

    return fit(model, cfg, 1, named, train_set, batch_loss, validate, run_dir, extra_meta=extra, echo=echo)


# -- stage 2 ----------------------------------------------------------------------------

def pair_split(manifest: Manifest, kinds, split: str) -> SampleSet:
    """Samples from ``kinds`` that hold at least one phantom (negative) branch."""
    entries = []
    for kind in kinds:
        if kind in manifest.kinds():
            entries += [e for e in manifest.entries(kind, split) if e["n_active"] < e["n_branches"]]
    return SampleSet(manifest, entries)


def _pairs(sample: MixtureSample, rng) -> tuple[int, int]:
    pos = [k for k, a in enumerate(sample.active) if a]
    neg = [k for k, a in enumerate(sample.active) if not a]
    return int(rng.choice(pos)), int(rng.choice(neg))


def pair_masks(model: AVFSNet, samples: list[MixtureSample], pairs: list[tuple[int, int]]) -> Tensor:
    """Frozen-backbone masks for (positive, negative) branches, [2B, L, D]."""
    wave, visuals = branch_inputs(samples, [list(p) for p in pairs], model.cfg.np_dtype)
    with no_grad():
        _, masks = model.masks(wave, visuals)
    return Tensor(np.concatenate([masks[0].data, masks[1].data]))


def stage2_validation(model: AVFSNet, valid: SampleSet, batch_size: int, limit: int | None = None):
    n = len(valid) if limit is None else min(limit, len(valid))
    probs, labels = [], []
    for idx in batches(n, batch_size):
        samples = [valid[int(i)] for i in idx]
        pairs = [_pairs(s, np.random.default_rng(s.seed)) for s in samples]
        masks = pair_masks(model, samples, pairs)
        with no_grad():
            probs.append(model.counter(masks).data)
        labels.append(np.r_[np.ones(len(samples)), np.zeros(len(samples))])
    p = np.concatenate(probs).astype(np.float64)
    y = np.concatenate(labels)
    loss = float(bce(Tensor(p), y).item())
    acc = float(np.mean((p >= 0.5) == (y == 1)))
    return loss, {"pair_accuracy": acc, "positive_fraction": float(np.mean(y))}


def train_stage2(cfg: Config, manifest: Manifest, init, run_dir=None, kinds=("2mix", "3mix"),
                 echo=None) -> TrainResult:
    """Counting head on balanced pairs; the backbone must not move."""
    src = require_stage(init, 1, "stage 2")
    model, src_cfg, _ = model_from_checkpoint(src)
    cfg = with_model(cfg, src_cfg)
    before = model.backbone_hash()
    for p in model.backbone_parameters():
        p.requires_grad = False
    train_set = pair_split(manifest, kinds, "train")
    valid_set = pair_split(manifest, kinds, "valid")
    if len(train_set) == 0:
        raise ContractError(f"no samples with phantom branches in {', '.join(kinds)}")

    def batch_loss(samples, rng):
        pairs = [_pairs(s, rng) for s in samples]
        masks = pair_masks(model, samples, pairs)
        labels = np.r_[np.ones(len(samples)), np.zeros(len(samples))]
        return bce(model.counter(masks), labels), {"positive_fraction": float(np.mean(labels))}

    def check_frozen(_stats):
        if model.backbone_hash() != before:
            raise ContractError("backbone parameters changed during stage 2")

    def validate():
        return stage2_validation(model, valid_set, cfg.train.batch_size, cfg.train.max_valid)

    named = list(model.counter.named_parameters("counter."))
    extra = {"kinds": list(kinds), "init": str(init), "stage1_backbone_hash": before}
    res = fit(model, cfg, 2, named, train_set, batch_loss, validate, run_dir, extra_meta=extra,
              echo=echo, after_step=check_frozen)
    if model.backbone_hash() != before:
        raise ContractError("backbone parameters changed during stage 2")
    for p in model.backbone_parameters():
        p.requires_grad = True
    return res


# -- stage 3 ----------------------------------------------------------------------------

def stage3_loss(model: AVFSNet, samples: list[MixtureSample]) -> tuple[Tensor, dict]:
    dtype = model.cfg.np_dtype
    m = samples[0].n_branches
    if any(s.n_branches != m for s in samples):
        raise ContractError("stage-3 batches need a common branch count")
    wave, visuals = branch_inputs(samples, [list(range(m))] * len(samples), dtype)
    out = model.separate(wave, visuals)
    est = ops.stack(out.waveforms, axis=0)                      # [M, B, T]
    jj, bb = zip(*[(k, b) for b, s in enumerate(samples) for k in range(m) if s.active[k]])
    refs = _stack([samples[b].sources[k] for k, b in zip(jj, bb)], dtype)
    l_sep = si_snr_loss(est[np.array(jj), np.array(bb)], refs) + SISNR_OFFSET
    probs = model.counter(ops.concat(out.masks, axis=0))        # [M * B], branch-major
    labels = np.array([float(s.active[k]) for k in range(m) for s in samples])
    l_ce = bce(probs, labels)
    s1, s2 = model.joint.sigmas
    return joint_loss(l_sep, l_ce, model.joint), {
        "si_snr": SISNR_OFFSET - float(l_sep.item()), "bce": float(l_ce.item()), "sigma1": s1, "sigma2": s2}


def train_stage3(cfg: Config, manifest: Manifest, init, run_dir=None, kind: str = "23mix",
                 echo=None) -> TrainResult:
    src = require_stage(init, 2, "stage 3")
    model, src_cfg, _ = model_from_checkpoint(src)
    cfg = with_model(cfg, src_cfg)
    train_set = manifest.split(kind, "train")
    valid_set = manifest.split(kind, "valid")
    named = list(model.named_parameters())

    def batch_loss(samples, rng):
        return stage3_loss(model, samples)

    def validate():
        rec = evaluate(model, valid_set, threshold=0.5, batch_size=cfg.train.batch_size, limit=cfg.train.max_valid)
        agg = rec.aggregate()
        s1, s2 = model.joint.sigmas
        return -agg["si_sdri"], {"si_sdri": agg["si_sdri"], "sdri": agg["sdri"], "sca": agg["sca"],
                                 "log_sigma1": math.log(s1), "log_sigma2": math.log(s2)}

    extra = {"kind": kind, "init": str(init), "stage1_backbone_hash": src.meta.get("stage1_backbone_hash")}
    return fit(model, cfg, 3, named, train_set, batch_loss, validate, run_dir, lr=cfg.train.lr_stage3,
               extra_meta=extra, echo=echo)


# -- evaluation ----------------------------------------------------------------------------

def evaluate(model: AVFSNet, samples: SampleSet, threshold: float = 0.5, batch_size: int = 4,
             limit: int | None = None, oracle: bool = False) -> EvalRecord:
    """Full inference (all cues, thresholding) with the zero-penalty rule.

    ``oracle`` injects p = 1 for active and p = 0 for phantom branches.
    """
    n = len(samples) if limit is None else min(limit, len(samples))
    rec = EvalRecord()
    dtype = model.cfg.np_dtype
    for idx in batches(n, batch_size):
        batch = [samples[int(i)] for i in idx]
        groups: dict[int, list[MixtureSample]] = {}
        for s in batch:
            groups.setdefault(s.n_branches, []).append(s)
        for m, group in sorted(groups.items()):
            wave, visuals = branch_inputs(group, [list(range(m))] * len(group), dtype)
            probs = None
            if oracle:
                probs = np.array([[float(s.active[k]) for s in group] for k in range(m)])
            out = model.infer(wave, visuals, threshold, probabilities=probs)
            for b, s in enumerate(group):
                chosen = set(out.selection[b].selected_indices)
                r = evaluate_with_penalty(
                    s.sample_id, s.speakers, s.active, [k in chosen for k in range(m)],
                    [out.waveforms[k].data[b] for k in range(m)], s.sources, s.mixture)
                for row, p in zip(r.rows, out.probabilities[:, b]):
                    row.probability = float(p)
                rec.extend(r)
    return rec
