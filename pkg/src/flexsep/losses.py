"""Separation/counting losses and evaluation metrics.

dB values are clamped to [-60, 60] and ratio denominators carry eps = 1e-8.
For SI-SNR the eps is scaled by the estimate norm so the value stays exactly
invariant to rescaling the estimate. The SDR here is the plain signal-to-error ratio against the reference,
without a BSS-eval distortion filter.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .numerics import Module, Parameter, Tensor, ops

EPS = 1e-8
DB_CLAMP = 60.0
BCE_EPS = 1e-7
_RATIO_LO = 10.0 ** (-DB_CLAMP / 20.0)
_RATIO_HI = 10.0 ** (DB_CLAMP / 20.0)


class UndefinedReferenceError(ValueError):
    """The reference signal is all zeros, so the metric is undefined."""


def _check_pair(est: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise ValueError(f"estimate length {est.size} != reference length {ref.size}")
    if not np.any(ref):
        raise UndefinedReferenceError("reference signal is all zeros")
    return est, ref


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB (also reported as SI-SDR)."""
    est, ref = _check_pair(est, ref)
    alpha = est @ ref / (ref @ ref)
    target = alpha * ref
    num = np.linalg.norm(target)
    den = np.linalg.norm(est - target) + EPS * np.linalg.norm(est)
    if den == 0.0:
        return -DB_CLAMP
    with np.errstate(divide="ignore"):
        value = 20.0 * np.log10(num / den)
    return float(np.clip(value, -DB_CLAMP, DB_CLAMP))


si_sdr = si_snr


def sdr(est, ref) -> float:
    est, ref = _check_pair(est, ref)
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10((ref @ ref) / ((est - ref) @ (est - ref) + EPS))
    return float(np.clip(value, -DB_CLAMP, DB_CLAMP))


def si_sdri(est, mix, ref) -> float:
    return si_snr(est, ref) - si_snr(mix, ref)


def sdri(est, mix, ref) -> float:
    return sdr(est, ref) - sdr(mix, ref)


def si_snr_tensor(est: Tensor, ref) -> Tensor:
    """Differentiable SI-SNR per row of est [..., T]; ref is a constant array."""
    ref_arr = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=est.dtype)
    if ref_arr.shape != est.shape:
        raise ValueError(f"estimate shape {est.shape} != reference shape {ref_arr.shape}")
    energy = np.sum(ref_arr.astype(np.float64) ** 2, axis=-1, keepdims=True)
    if np.any(energy == 0):
        raise UndefinedReferenceError("reference signal is all zeros")
    r = Tensor(ref_arr)
    alpha = ops.sum(est * r, axis=-1, keepdims=True) * Tensor((1.0 / energy).astype(est.dtype))
    target_norm = ops.abs(alpha)[..., 0] * Tensor(np.sqrt(energy[..., 0]).astype(est.dtype))
    resid = est - alpha * r
    # tiny offset keeps sqrt differentiable at a perfect reconstruction
    resid_norm = ops.sqrt(ops.sum(resid * resid, axis=-1) + 1e-30)
    est_norm = ops.sqrt(ops.sum(est * est, axis=-1) + 1e-30)
    ratio = ops.clip(target_norm / (resid_norm + est_norm * EPS), _RATIO_LO, _RATIO_HI)
    return ops.log(ratio) * (20.0 / np.log(10.0))


def si_snr_loss(est: Tensor, ref) -> Tensor:
    """Negative SI-SNR, averaged over any leading axes; minimise this."""
    return -ops.mean(si_snr_tensor(est, ref))


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    y_arr = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    pc = ops.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    yt = Tensor(y_arr)
    terms = -(yt * ops.log(pc) + (1.0 - yt) * ops.log(1.0 - pc))
    return ops.mean(terms)


class JointLossState(Module):
    """Learnable log-sigmas for the uncertainty-weighted joint loss."""

    def __init__(self, dtype=np.float32):
        self.log_sigma1 = Parameter(np.zeros(()), dtype=dtype)
        self.log_sigma2 = Parameter(np.zeros(()), dtype=dtype)

    @property
    def sigmas(self) -> tuple[float, float]:
        return float(np.exp(self.log_sigma1.data)), float(np.exp(self.log_sigma2.data))


def joint_loss(l_sep: Tensor, l_ce: Tensor, state: JointLossState) -> Tensor:
    """l_sep / (2 s1^2) + l_ce / (2 s2^2) + log s1 + log s2 with s_k = exp(log_sigma_k)."""
    w1 = ops.exp(state.log_sigma1 * -2.0) * 0.5
    w2 = ops.exp(state.log_sigma2 * -2.0) * 0.5
    return w1 * l_sep + w2 * l_ce + state.log_sigma1 + state.log_sigma2


# -- evaluation ------------------------------------------------------------------

CSV_COLUMNS = ("sample_id", "speaker_id", "active", "selected", "si_sdr", "sdr", "si_sdri", "sdri")


@dataclass
class SpeakerResult:
    sample_id: str
    speaker_id: str
    active: bool
    selected: bool
    si_sdr: float | None = None
    sdr: float | None = None
    si_sdri: float | None = None
    sdri: float | None = None
    probability: float | None = None

    @property
    def scored(self) -> bool:
        """Counted in the metric means: every active speaker plus false alarms."""
        return self.active or self.selected


@dataclass
class EvalRecord:
    rows: list[SpeakerResult] = field(default_factory=list)
    sca_correct: int = 0
    sca_total: int = 0

    def extend(self, other: "EvalRecord") -> None:
        self.rows.extend(other.rows)
        self.sca_correct += other.sca_correct
        self.sca_total += other.sca_total

    @property
    def sca(self) -> float:
        return self.sca_correct / self.sca_total if self.sca_total else float("nan")

    def mean(self, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.rows if r.scored]
        return float(np.mean(vals)) if vals else float("nan")

    def aggregate(self) -> dict[str, float]:
        return {
            "si_sdr": self.mean("si_sdr"),
            "sdr": self.mean("sdr"),
            "si_sdri": self.mean("si_sdri"),
            "sdri": self.mean("sdri"),
            "sca": self.sca,
            "n_samples": self.sca_total,
            "n_scored": sum(1 for r in self.rows if r.scored),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.sample_id, r.speaker_id, int(r.active), int(r.selected),
                *("" if v is None else repr(float(v)) for v in (r.si_sdr, r.sdr, r.si_sdri, r.sdri)),
            ])
        return buf.getvalue()


def evaluate_with_penalty(sample_id: str, speaker_ids: list[str], active: list[bool],
                          selected: list[bool], estimates: list[np.ndarray], sources: list[np.ndarray],
                          mixture: np.ndarray) -> EvalRecord:
    """Score one sample with the zero-penalty rule.

    Branch i is paired with speaker i through its visual cue. A missed active
    speaker and a false-alarm branch both score exactly 0 on every metric;
    correctly rejected phantom branches are listed but not scored.
    """
    rec = EvalRecord()
    for i, sid in enumerate(speaker_ids):
        row = SpeakerResult(sample_id, sid, bool(active[i]), bool(selected[i]))
        if row.active and row.selected:
            est, ref = estimates[i], sources[i]
            row.si_sdr = si_snr(est, ref)
            row.sdr = sdr(est, ref)
            row.si_sdri = row.si_sdr - si_snr(mixture, ref)
            row.sdri = row.sdr - sdr(mixture, ref)
        elif row.active or row.selected:
            row.si_sdr = row.sdr = row.si_sdri = row.sdri = 0.0
        rec.rows.append(row)
    rec.sca_total = 1
    rec.sca_correct = int(sum(map(bool, active)) == sum(map(bool, selected)))
    return rec


def recount_from_csv(text: str) -> dict[str, float]:
    """Recompute SCA and metric means from a per-speaker CSV report."""
    reader = csv.DictReader(io.StringIO(text))
    per_sample: dict[str, list[int]] = {}
    sums = {k: [] for k in ("si_sdr", "sdr", "si_sdri", "sdri")}
    for row in reader:
        act, sel = int(row["active"]), int(row["selected"])
        n = per_sample.setdefault(row["sample_id"], [0, 0])
        n[0] += act
        n[1] += sel
        if act or sel:
            for k in sums:
                sums[k].append(float(row[k]))
    correct = sum(1 for a, s in per_sample.values() if a == s)
    out = {k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()}
    out["sca"] = correct / len(per_sample) if per_sample else float("nan")
    return out
