"""Configuration dataclasses, presets, and the YAML config file format.

A config file is nested key/value YAML with one section per area::

    model:
      dim: 64
      n_intra: 2
    data:
      preset: desk-2mix
    train:
      lr: 0.001

Command-line ``--set section.key=value`` overrides win over file values.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    sample_rate: int = 8000
    kernel: int = 16            # front-end conv kernel K, stride K/2
    dim: int = 64               # feature dim D
    hidden: int = 256           # cgMLP expansion D_hidden
    heads: int = 4              # encoder attention heads N_H
    csgu_kernel: int = 7
    n_blocks: int = 1
    alpha_override: float | None = None   # debug only: pin the branch merge weight
    visual_dim: int = 8         # F_v
    embed_dim: int = 32         # E
    tcn_blocks: int = 3
    tcn_kernel: int = 3
    frame_rate: int = 25
    chunk: int = 80             # C
    n_intra: int = 2
    n_inter: int = 2
    sep_heads: int = 4
    ff_mult: int = 4
    n_repeats: int = 1
    count_dim: int = 64         # D_c
    count_kernel: int = 3
    count_pool: int = 4
    count_heads: int = 4
    mlp_hidden: int = 64
    head_activation: str = "gelu"   # between the two counting linears; "gelu" or "none"
    dtype: str = "float32"

    def validate(self) -> None:
        if self.kernel % 2:
            raise ConfigError(f"model.kernel must be even (stride is K/2), got {self.kernel}")
        if self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} not divisible by model.heads={self.heads}")
        if self.dim % self.sep_heads:
            raise ConfigError(f"model.dim={self.dim} not divisible by model.sep_heads={self.sep_heads}")
        if self.count_dim % self.count_heads:
            raise ConfigError("model.count_dim not divisible by model.count_heads")
        if self.hidden % 2:
            raise ConfigError(f"model.hidden must be even for the gating split, got {self.hidden}")
        if self.csgu_kernel % 2 == 0:
            raise ConfigError(f"model.csgu_kernel must be odd, got {self.csgu_kernel}")
        if self.chunk % 2 or self.chunk < 2:
            raise ConfigError(f"model.chunk must be even and >= 2, got {self.chunk}")
        if self.head_activation not in ("none", "gelu"):
            raise ConfigError(f"model.head_activation must be 'none' or 'gelu', got {self.head_activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def stride(self) -> int:
        return self.kernel // 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def aligned_chunk(self) -> int:
        """Chunk length that makes the chunk hop match one video frame."""
        return 2 * self.sample_rate // (self.stride * self.frame_rate)


@dataclass
class DataConfig:
    preset: str = "desk"
    sample_rate: int = 8000
    duration: float = 2.0
    frame_rate: int = 25
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    n_train_3mix: int = 1000
    n_valid_3mix: int = 200
    n_test_3mix: int = 200
    n_train_23mix: int = 1000
    n_valid_23mix: int = 200
    n_test_23mix: int = 200
    snr_low: float = -10.0
    snr_high: float = 10.0
    noise_snr: float | None = 30.0
    speakers_train: int = 300
    speakers_valid: int = 40
    speakers_test: int = 40
    mixes: tuple[str, ...] = ("2mix", "3mix", "23mix")
    seed: int = 0


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-3
    lr_stage3: float = 3e-4
    batch_size: int = 4
    max_epochs: int = 6
    patience: int = 10
    clip_norm: float = 5.0
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    max_steps_per_epoch: int | None = None
    max_valid: int | None = None
    seed: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["data"]["mixes"] = list(d["data"]["mixes"])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict()["model"], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- presets -------------------------------------------------------------------

DATA_PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "desk-2mix": {"mixes": ("2mix",)},
    "desk-3mix": {"mixes": ("3mix",)},
    "desk-23mix": {"mixes": ("23mix",)},
    "small": {
        "n_train": 400, "n_valid": 60, "n_test": 60,
        "n_train_3mix": 200, "n_valid_3mix": 60, "n_test_3mix": 60,
        "n_train_23mix": 200, "n_valid_23mix": 60, "n_test_23mix": 60,
        "speakers_train": 120, "speakers_valid": 20, "speakers_test": 20,
    },
    "tiny": {
        "duration": 0.8,
        "n_train": 12, "n_valid": 4, "n_test": 4,
        "n_train_3mix": 8, "n_valid_3mix": 4, "n_test_3mix": 4,
        "n_train_23mix": 8, "n_valid_23mix": 4, "n_test_23mix": 6,
        "speakers_train": 24, "speakers_valid": 12, "speakers_test": 12,
    },
    "full": {
        "sample_rate": 16000, "duration": 4.0,
        "n_train": 20000, "n_valid": 5000, "n_test": 3000,
        "n_train_3mix": 20000, "n_valid_3mix": 5000, "n_test_3mix": 3000,
        "n_train_23mix": 20000, "n_valid_23mix": 5000, "n_test_23mix": 3000,
        "speakers_train": 800, "speakers_valid": 59, "speakers_test": 59,
    },
}

MODEL_PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "tiny": {"dim": 16, "hidden": 32, "heads": 2, "csgu_kernel": 3, "embed_dim": 8,
             "sep_heads": 2, "n_intra": 1, "n_inter": 1, "count_dim": 8, "count_heads": 2,
             "mlp_hidden": 8, "ff_mult": 2},
    "full": {"sample_rate": 16000, "dim": 256, "hidden": 2048, "heads": 8, "csgu_kernel": 31,
             "chunk": 160, "n_intra": 8, "n_inter": 7, "sep_heads": 8},
}


def data_preset(name: str, **overrides) -> DataConfig:
    if name not in DATA_PRESETS:
        raise ConfigError(f"unknown data preset {name!r}; known: {', '.join(sorted(DATA_PRESETS))}")
    values = dict(DATA_PRESETS[name])
    values.update(overrides)
    return DataConfig(preset=name, **values)


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in MODEL_PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; known: {', '.join(sorted(MODEL_PRESETS))}")
    values = dict(MODEL_PRESETS[name])
    values.update(overrides)
    cfg = ModelConfig(**values)
    cfg.validate()
    return cfg


# -- file format / overrides -------------------------------------------------------

def _coerce(cls, name: str, raw: Any) -> Any:
    ftype = {f.name: f for f in fields(cls)}[name].type
    if raw is None or not isinstance(raw, str):
        if isinstance(raw, list) and "tuple" in str(ftype):
            return tuple(raw)
        return raw
    text = raw.strip()
    if text.lower() in ("none", "null") and "None" in str(ftype):
        return None
    if "tuple" in str(ftype):
        return tuple(s.strip() for s in text.strip("[]()").split(",") if s.strip())
    if "bool" in str(ftype):
        return text.lower() in ("1", "true", "yes", "on")
    if "int" in str(ftype) and "float" not in str(ftype):
        return int(text)
    if "float" in str(ftype):
        return float(text)
    return text


def _apply(section_obj, section: str, values: dict[str, Any]) -> None:
    known = {f.name for f in fields(section_obj)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {section}.{key}")
        try:
            setattr(section_obj, key, _coerce(type(section_obj), key, raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                base: Config | None = None) -> Config:
    cfg = dataclasses.replace(base) if base is not None else Config()
    cfg = Config(model=dataclasses.replace(cfg.model), data=dataclasses.replace(cfg.data),
                 train=dataclasses.replace(cfg.train))
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in doc.items():
            if section not in ("model", "data", "train"):
                raise ConfigError(f"{path}: unknown section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: section {section!r} must be a mapping")
            _apply(getattr(cfg, section), section, values)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in ("model", "data", "train"):
            raise ConfigError(f"unknown section in override {item!r}")
        _apply(getattr(cfg, section), section, {name: value})
    cfg.model.validate()
    return cfg


def config_from_dict(doc: dict[str, Any]) -> Config:
    cfg = Config()
    for section in ("model", "data", "train"):
        if section in doc:
            _apply(getattr(cfg, section), section, doc[section])
    return cfg
