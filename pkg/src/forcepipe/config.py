"""Experiment configuration (YAML with ``experiment``/``training``/``evaluation`` sections)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from forcepipe.dataset import Condition
from forcepipe.dsp import SegmentSpec
from forcepipe.errors import ConfigError, ForcepipeError, UnsupportedCombination
from forcepipe.model import (
    ALL_MODALITIES,
    IMU_SENSORS,
    Fusion,
    Modality,
    Scheme,
    TrainConfig,
)
from forcepipe.model import parse_choice

SCHEME_DEFAULTS = {
    Scheme.INTRA: {"batch_size": 256, "epochs": 100},
    Scheme.INTER: {"batch_size": 512, "epochs": 230},
}

SECTIONS = {
    "experiment": ("scheme", "condition", "fusion", "segment_ms", "modalities", "imu_channels", "subjects", "width"),
    "training": ("batch_size", "epochs", "pretrain_epochs", "seed", "l2_coeff", "lr",
                 "finetune_learners", "two_stage"),
    "evaluation": ("holdout_fraction", "k_folds", "n_folds_run", "subject_disjoint"),
}


@dataclass
class ExperimentConfig:
    scheme: str = "intra"
    condition: str = "isotonic"
    fusion: str = "feature"
    segment_ms: int = 50
    modalities: tuple[str, ...] = tuple(m.value for m in ALL_MODALITIES)
    imu_channels: tuple[int, ...] | None = None
    subjects: tuple[str, ...] | None = None
    width: float = 1.0
    # None falls back to the scheme default (256/100 intra, 512/230 inter)
    batch_size: int | None = None
    epochs: int | None = None
    pretrain_epochs: int | None = None
    seed: int = 0
    l2_coeff: float = 1e-4
    lr: float = 1e-3
    finetune_learners: bool = True
    two_stage: bool = True
    holdout_fraction: float = 0.10
    k_folds: int = 5
    n_folds_run: int = 1
    subject_disjoint: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.scheme = parse_choice(Scheme, self.scheme, "scheme").value
            self.condition = Condition.parse(self.condition).value
            self.fusion = parse_choice(Fusion, self.fusion, "fusion").value
            SegmentSpec(int(self.segment_ms))
            if isinstance(self.modalities, str):
                self.modalities = tuple(m.strip() for m in self.modalities.split(",") if m.strip())
            self.modalities = tuple(parse_choice(Modality, m, "modality").value for m in self.modalities)
            self.imu_channels = parse_imu_channels(self.imu_channels)
        except (UnsupportedCombination, ConfigError):
            raise
        except ForcepipeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(f"invalid configuration value: {exc}") from None
        self.segment_ms = int(self.segment_ms)
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if self.subjects is not None:
            self.subjects = tuple(str(s) for s in self.subjects)
        for name in ("batch_size", "epochs", "pretrain_epochs"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < (1 if name == "batch_size" else 0)):
                raise ConfigError(f"{name} must be a {'positive' if name == 'batch_size' else 'non-negative'} integer")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        if self.k_folds < 2 or not 1 <= self.n_folds_run <= self.k_folds:
            raise ConfigError("need k_folds >= 2 and 1 <= n_folds_run <= k_folds")
        if self.l2_coeff < 0 or self.lr <= 0 or self.width <= 0:
            raise ConfigError("l2_coeff >= 0, lr > 0 and width > 0 required")

    @property
    def effective_batch_size(self) -> int:
        return int(self.batch_size or SCHEME_DEFAULTS[Scheme(self.scheme)]["batch_size"])

    @property
    def effective_epochs(self) -> int:
        return int(self.epochs if self.epochs is not None else SCHEME_DEFAULTS[Scheme(self.scheme)]["epochs"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.effective_batch_size,
            epochs=self.effective_epochs,
            pretrain_epochs=self.pretrain_epochs,
            seed=self.seed if seed is None else seed,
            l2_coeff=self.l2_coeff,
            lr=self.lr,
            finetune_learners=self.finetune_learners,
            two_stage=self.two_stage,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for section, keys in SECTIONS.items():
            out[section] = {}
            for k in keys:
                v = getattr(self, k)
                out[section][k] = list(v) if isinstance(v, tuple) else v
        return out


def parse_imu_channels(value):
    """``None``, a sensor name (``acc``/``gyro``/``mag``), or a channel index list."""
    if value is None:
        return None
    if isinstance(value, str):
        if value in IMU_SENSORS:
            return IMU_SENSORS[value]
        value = [v for v in value.split(",") if v.strip()]
    chans = tuple(int(c) for c in value)
    if not chans or any(not 0 <= c < 9 for c in chans):
        raise ConfigError(f"IMU channels must be indices 0..8, got {chans}")
    return chans


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from nested sections or flat keys; unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    flat = {}
    known = {k for keys in SECTIONS.values() for k in keys}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for k, v in value.items():
                if k not in SECTIONS[key]:
                    raise ConfigError(f"unknown key {key}.{k}")
                flat[k] = v
        elif key in known:
            flat[key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    for k in ("modalities", "subjects"):
        if isinstance(flat.get(k), list):
            flat[k] = tuple(flat[k])
    try:
        return ExperimentConfig(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
    return path
