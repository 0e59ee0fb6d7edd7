"""Dataset construction, manifest format and sample loading.

``manifest.json`` is a single JSON document::

    {"format": "flexsep-manifest", "version": 1, "name": ..., "sample_rate": ...,
     "frame_rate": ..., "duration": ..., "seed": ..., "config": {...},
     "datasets": {"2mix": {"train": [sample, ...], "valid": [...], "test": [...]}, ...}}

Each sample lists one entry per branch (visual cue); file paths are relative
to the manifest directory and ``sources[k]`` is null for phantom branches.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..config import ConfigError, DataConfig
from .io import read_visual, read_wav, write_visual, write_wav
from .synth import F0_BANDS, gen_speaker, mix, speaker_profile

SPLITS = ("train", "valid", "test")
MIX_KINDS = {"2mix": (2,), "3mix": (3,), "23mix": (2, 3)}
MANIFEST_FORMAT = "flexsep-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Manifest missing, malformed or inconsistent with the files on disk."""


@dataclass
class MixtureSample:
    sample_id: str
    mixture: np.ndarray
    sources: list[np.ndarray | None]     # per branch; None for phantom speakers
    visuals: list[np.ndarray]            # per branch, [F_v, I_raw]
    active: list[bool]
    speakers: list[str]
    snr_db: list[float]
    noise_snr_db: float | None
    seed: int
    sample_rate: int
    noise: np.ndarray | None = None

    @property
    def n_active(self) -> int:
        return int(sum(self.active))

    @property
    def n_branches(self) -> int:
        return len(self.active)


def speaker_pools(cfg: DataConfig) -> dict[str, list[int]]:
    """Disjoint speaker-seed pools per split."""
    counts = [cfg.speakers_train, cfg.speakers_valid, cfg.speakers_test]
    base = cfg.seed * 1_000_003
    pools, start = {}, 0
    for split, n in zip(SPLITS, counts):
        pools[split] = [base + g for g in range(start, start + n)]
        start += n
    return pools


def _split_size(cfg: DataConfig, kind: str, split: str) -> int:
    suffix = "" if kind == "2mix" else f"_{kind}"
    return int(getattr(cfg, f"n_{split}{suffix}"))


def _pick_speakers(rng: np.random.Generator, pool: list[int], n_active: int, n_branches: int) -> list[int]:
    """Active speakers from distinct F0 bands, phantoms from anyone else."""
    by_band: dict[int, list[int]] = {b: [] for b in range(len(F0_BANDS))}
    for s in pool:
        by_band[speaker_profile(s).band].append(s)
    bands = [b for b in by_band if by_band[b]]
    if len(bands) < n_active:
        raise ValueError(f"speaker pool covers {len(bands)} F0 bands, need {n_active}")
    chosen_bands = rng.choice(bands, size=n_active, replace=False)
    active = [int(rng.choice(by_band[int(b)])) for b in chosen_bands]
    rest = [s for s in pool if s not in active]
    phantoms = [int(s) for s in rng.choice(rest, size=n_branches - n_active, replace=False)]
    return active + phantoms


def make_sample(cfg: DataConfig, kind: str, split: str, index: int, pool: list[int]) -> tuple[MixtureSample, np.ndarray]:
    """Deterministically synthesise one sample; also returns the branch order used."""
    kind_code = list(MIX_KINDS).index(kind)
    seed_seq = np.random.SeedSequence([cfg.seed, kind_code, SPLITS.index(split), index])
    seed = int(seed_seq.generate_state(1)[0])
    rng = np.random.default_rng(seed_seq)
    counts = MIX_KINDS[kind]
    n_active = counts[index % len(counts)]
    n_branches = n_active + 1 if len(counts) == 1 else max(counts)
    spk = _pick_speakers(rng, pool, n_active, n_branches)
    waves, visuals = [], []
    for s in spk:
        w, v = gen_speaker(s, cfg.duration, cfg.sample_rate, utterance_seed=int(rng.integers(2**31)),
                           frame_rate=cfg.frame_rate)
        waves.append(w.samples)
        visuals.append(v)
    snrs = [float(x) for x in rng.uniform(cfg.snr_low, cfg.snr_high, size=n_active - 1)]
    res = mix(waves[:n_active], snrs, cfg.noise_snr, rng=rng)
    order = rng.permutation(n_branches)
    sources = [res.sources[k] if k < n_active else None for k in order]
    sample = MixtureSample(
        sample_id=f"{kind}-{split}-{index:05d}",
        mixture=res.mixture,
        sources=sources,
        visuals=[visuals[k] for k in order],
        active=[bool(k < n_active) for k in order],
        speakers=[f"spk{spk[k]}" for k in order],
        snr_db=snrs,
        noise_snr_db=cfg.noise_snr,
        seed=seed,
        sample_rate=cfg.sample_rate,
        noise=res.noise if cfg.noise_snr is not None else None,
    )
    return sample, order


def _write_sample(root: Path, rel_dir: str, sample: MixtureSample, frame_rate: int) -> dict:
    out = root / rel_dir
    sid = sample.sample_id
    entry = {
        "id": sid,
        "mixture": f"{rel_dir}/{sid}_mix.wav",
        "sources": [],
        "visuals": [],
        "speakers": sample.speakers,
        "active": sample.active,
        "n_active": sample.n_active,
        "n_branches": sample.n_branches,
        "snr_db": sample.snr_db,
        "noise_snr_db": sample.noise_snr_db,
        "seed": sample.seed,
        "noise": None,
    }
    write_wav(out / f"{sid}_mix.wav", sample.mixture, sample.sample_rate)
    if sample.noise is not None:
        write_wav(out / f"{sid}_noise.wav", sample.noise, sample.sample_rate)
        entry["noise"] = f"{rel_dir}/{sid}_noise.wav"
    for k, (src, vis) in enumerate(zip(sample.sources, sample.visuals)):
        if src is None:
            entry["sources"].append(None)
        else:
            write_wav(out / f"{sid}_s{k}.wav", src, sample.sample_rate)
            entry["sources"].append(f"{rel_dir}/{sid}_s{k}.wav")
        write_visual(out / f"{sid}_v{k}.avfs", vis, frame_rate)
        entry["visuals"].append(f"{rel_dir}/{sid}_v{k}.avfs")
    return entry


def build_dataset(cfg: DataConfig, out_dir, progress=None) -> Path:
    """Generate every configured mix kind and split; return the manifest path."""
    root = Path(out_dir)
    pools = speaker_pools(cfg)
    datasets: dict[str, dict[str, list]] = {}
    for kind in cfg.mixes:
        if kind not in MIX_KINDS:
            raise ConfigError(f"unknown mix kind {kind!r}; known: {', '.join(MIX_KINDS)}")
        datasets[kind] = {}
        for split in SPLITS:
            rel = f"{kind}/{split}"
            try:
                (root / rel).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise OSError(f"cannot create {root / rel}: {exc.strerror}") from exc
            entries = []
            for i in range(_split_size(cfg, kind, split)):
                sample, _ = make_sample(cfg, kind, split, i, pools[split])
                entries.append(_write_sample(root, rel, sample, cfg.frame_rate))
                if progress is not None:
                    progress(kind, split, i)
            datasets[kind][split] = entries
    cfg_dict = asdict(cfg)
    cfg_dict["mixes"] = list(cfg.mixes)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": cfg.preset,
        "sample_rate": cfg.sample_rate,
        "frame_rate": cfg.frame_rate,
        "duration": cfg.duration,
        "seed": cfg.seed,
        "config": cfg_dict,
        "datasets": datasets,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


class Manifest:
    def __init__(self, path):
        self.path = Path(path)
        try:
            doc = json.loads(self.path.read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{self.path}: not valid JSON ({exc})") from None
        if doc.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"{self.path}: not a {MANIFEST_FORMAT} document")
        self.doc = doc
        self.root = self.path.parent

    @property
    def sample_rate(self) -> int:
        return int(self.doc["sample_rate"])

    @property
    def frame_rate(self) -> int:
        return int(self.doc["frame_rate"])

    def kinds(self) -> list[str]:
        return list(self.doc["datasets"])

    def entries(self, kind: str, split: str) -> list[dict]:
        try:
            return self.doc["datasets"][kind][split]
        except KeyError:
            raise ManifestError(f"{self.path}: no {kind}/{split} split "
                                f"(has {', '.join(self.kinds()) or 'nothing'})") from None

    def split(self, kind: str, split: str) -> "SampleSet":
        return SampleSet(self, self.entries(kind, split))


class SampleSet:
    """Lazy, indexable view of one split; samples load from disk on access."""

    def __init__(self, manifest: Manifest, entries: list[dict]):
        self.manifest = manifest
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def _wav(self, rel: str) -> np.ndarray:
        w = read_wav(self.manifest.root / rel)
        if w.sample_rate != self.manifest.sample_rate:
            raise ManifestError(f"{rel}: sample rate {w.sample_rate} != manifest {self.manifest.sample_rate}")
        return w.samples

    def __getitem__(self, i: int) -> MixtureSample:
        e = self.entries[i]
        visuals = []
        for rel in e["visuals"]:
            frames, _ = read_visual(self.manifest.root / rel)
            visuals.append(frames)
        return MixtureSample(
            sample_id=e["id"],
            mixture=self._wav(e["mixture"]),
            sources=[None if s is None else self._wav(s) for s in e["sources"]],
            visuals=visuals,
            active=[bool(a) for a in e["active"]],
            speakers=list(e["speakers"]),
            snr_db=list(e["snr_db"]),
            noise_snr_db=e["noise_snr_db"],
            seed=int(e["seed"]),
            sample_rate=self.manifest.sample_rate,
            noise=None if e.get("noise") is None else self._wav(e["noise"]),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
