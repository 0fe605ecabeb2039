"""On-disk trial format, ingestion, torque conversion and rest masking.

A trial lives in its own directory::

    trial_dir/
        trial.json    # declared sampling rates and metadata
        emg.csv       # 32 monopolar columns, array-major, 2048 Hz
        imu.csv       # accel xyz, gyro xyz, mag xyz, 500 Hz
        biodex.csv    # torque_nm, position_deg, velocity_degps, 1250 Hz

A JSON manifest lists trial directories (relative to the manifest) together
with the subject, condition and lever arm used for force conversion.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from forcepipe import BIODEX_FS, EMG_FS, IMU_FS
from forcepipe.errors import (
    IntervalOutOfRange,
    MalformedFile,
    NonFiniteSample,
    NonPositiveLeverArm,
    RateMismatch,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

EMG_LABELS = tuple(f"A{a}_CH{c}" for a in range(1, 5) for c in range(1, 9))
IMU_LABELS = (
    "acc_x", "acc_y", "acc_z",
    "gyro_x", "gyro_y", "gyro_z",
    "mag_x", "mag_y", "mag_z",
)
BIODEX_LABELS = ("torque_nm", "position_deg", "velocity_degps")

MODALITY_FILES = {
    "emg": ("emg.csv", EMG_LABELS),
    "imu": ("imu.csv", IMU_LABELS),
    "biodex": ("biodex.csv", BIODEX_LABELS),
}


class Condition(str, enum.Enum):
    ISOTONIC = "isotonic"
    ISOKINETIC = "isokinetic"
    DYNAMIC = "dynamic"

    @classmethod
    def parse(cls, value) -> "Condition":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            from forcepipe.errors import UnsupportedCombination

            raise UnsupportedCombination(f"unknown condition {value!r}") from None


@dataclass(frozen=True)
class ChannelStream:
    samples: np.ndarray
    fs: float
    label: str

    def __post_init__(self):
        if not self.fs > 0:
            raise RateMismatch(f"{self.label}: sampling rate must be positive, got {self.fs}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


@dataclass(frozen=True)
class RawTrial:
    """One recording session at native rates; each modality is ``T_m x C_m``."""

    subject_id: str
    condition: Condition
    level: float | None
    emg_monopolar: np.ndarray
    imu: np.ndarray
    biodex: np.ndarray
    lever_arm_m: float
    rest_intervals: tuple[tuple[float, float], ...] = ()
    emg_fs: float = EMG_FS
    imu_fs: float = IMU_FS
    biodex_fs: float = BIODEX_FS

    def __post_init__(self):
        if self.emg_monopolar.ndim != 2 or self.emg_monopolar.shape[1] != len(EMG_LABELS):
            raise MalformedFile(f"EMG must have {len(EMG_LABELS)} channels, got {self.emg_monopolar.shape}")
        if self.imu.ndim != 2 or self.imu.shape[1] != len(IMU_LABELS):
            raise MalformedFile(f"IMU must have {len(IMU_LABELS)} channels, got {self.imu.shape}")
        if self.biodex.ndim != 2 or self.biodex.shape[1] != len(BIODEX_LABELS):
            raise MalformedFile(f"Biodex must have {len(BIODEX_LABELS)} channels, got {self.biodex.shape}")
        if self.lever_arm_m <= 0:
            raise NonPositiveLeverArm(f"lever arm must be positive, got {self.lever_arm_m}")

    @property
    def torque_nm(self) -> np.ndarray:
        return self.biodex[:, 0]

    @property
    def position_deg(self) -> np.ndarray:
        return self.biodex[:, 1]

    @property
    def velocity_degps(self) -> np.ndarray:
        return self.biodex[:, 2]

    @property
    def duration(self) -> float:
        return self.emg_monopolar.shape[0] / self.emg_fs

    def streams(self) -> list[ChannelStream]:
        out = []
        for data, fs, labels in (
            (self.emg_monopolar, self.emg_fs, EMG_LABELS),
            (self.imu, self.imu_fs, IMU_LABELS),
            (self.biodex, self.biodex_fs, BIODEX_LABELS),
        ):
            out.extend(ChannelStream(data[:, i], fs, lab) for i, lab in enumerate(labels))
        return out


@dataclass(frozen=True)
class ProcessedTrial:
    """Aligned streams at the EMG rate, all of length T."""

    emg_diff: np.ndarray
    imu: np.ndarray
    force_n: np.ndarray
    subject_id: str = ""
    condition: Condition | None = None
    level: float | None = None
    fs: float = EMG_FS
    # original sample index of each retained row, kept through masking
    sample_index: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.force_n)
        if self.emg_diff.shape[0] != n or self.imu.shape[0] != n:
            raise ValueError(
                f"stream lengths differ: emg {self.emg_diff.shape[0]}, imu {self.imu.shape[0]}, force {n}"
            )
        if self.sample_index is None:
            object.__setattr__(self, "sample_index", np.arange(n))

    def __len__(self) -> int:
        return len(self.force_n)


@dataclass(frozen=True)
class TrialDescriptor:
    path: str
    subject_id: str
    condition: Condition
    level: float | None
    lever_arm_m: float
    emg_fs: float = EMG_FS
    imu_fs: float = IMU_FS
    biodex_fs: float = BIODEX_FS
    rest_intervals: tuple[tuple[float, float], ...] = ()

    @property
    def trial_id(self) -> str:
        """Manifest path without extension; unique within a manifest."""
        return Path(self.path).with_suffix("").as_posix()

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "subject_id": self.subject_id,
            "condition": self.condition.value,
            "level": self.level,
            "lever_arm_m": self.lever_arm_m,
            "emg_fs": self.emg_fs,
            "imu_fs": self.imu_fs,
            "biodex_fs": self.biodex_fs,
            "rest_intervals": [list(iv) for iv in self.rest_intervals],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrialDescriptor":
        try:
            subject = str(d["subject_id"])
            if not subject:
                raise MalformedFile("manifest entry has an empty subject_id")
            return cls(
                path=str(d["path"]),
                subject_id=subject,
                condition=Condition.parse(d["condition"]),
                level=None if d.get("level") is None else float(d["level"]),
                lever_arm_m=float(d["lever_arm_m"]),
                emg_fs=float(d.get("emg_fs", EMG_FS)),
                imu_fs=float(d.get("imu_fs", IMU_FS)),
                biodex_fs=float(d.get("biodex_fs", BIODEX_FS)),
                rest_intervals=tuple((float(a), float(b)) for a, b in d.get("rest_intervals", [])),
            )
        except KeyError as exc:
            raise MalformedFile(f"manifest entry missing field {exc}") from None


@dataclass
class DatasetManifest:
    trials: list[TrialDescriptor] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    root: Path = Path(".")

    def resolve(self, desc: TrialDescriptor) -> Path:
        p = Path(desc.path)
        return p if p.is_absolute() else self.root / p

    def subjects(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})

    def select(self, condition=None, subjects: Iterable[str] | None = None) -> list[TrialDescriptor]:
        cond = None if condition is None else Condition.parse(condition)
        keep = None if subjects is None else set(subjects)
        return [
            t for t in self.trials
            if (cond is None or t.condition == cond) and (keep is None or t.subject_id in keep)
        ]

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "trials": [t.to_json() for t in self.trials]}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedFile(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict) or "trials" not in data:
            raise MalformedFile(f"{path}: manifest needs a 'trials' array")
        version = int(data.get("format_version", 0))
        if version != FORMAT_VERSION:
            raise MalformedFile(f"{path}: unsupported manifest format_version {version}")
        trials = [TrialDescriptor.from_json(d) for d in data["trials"]]
        return cls(trials=trials, format_version=version, root=path.parent)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def _read_modality(path: Path, labels: Sequence[str]) -> np.ndarray:
    try:
        df = pd.read_csv(path, na_filter=False, float_precision="round_trip", engine="c")
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    header = [str(c).strip() for c in df.columns]
    if len(header) != len(labels):
        raise MalformedFile(f"{path}: expected {len(labels)} columns, found {len(header)}")
    if header != list(labels):
        raise MalformedFile(f"{path}: header {header[:4]}... does not match expected channel labels")
    for col in df.columns:
        if df[col].dtype == object:
            values = df[col].astype(str).str.strip()
            if (values == "").any():
                raise MalformedFile(f"{path}: empty field in column {col}")
            try:
                df[col] = values.map(float)
            except ValueError as exc:
                raise MalformedFile(f"{path}: non-numeric value in column {col} ({exc})") from None
    data = df.to_numpy(dtype=np.float64)
    if not np.isfinite(data).all():
        row, colno = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteSample(f"{path}: non-finite sample at row {row + 1}, column {header[colno]}")
    return data


def _write_modality(path: Path, data: np.ndarray, labels: Sequence[str], float_format: str | None) -> None:
    df = pd.DataFrame(np.asarray(data, dtype=np.float64), columns=list(labels))
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def write_trial(trial: RawTrial, trial_dir, float_format: str | None = None) -> Path:
    """Serialize a trial. ``float_format=None`` writes shortest round-trip reprs."""
    trial_dir = Path(trial_dir)
    trial_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "subject_id": trial.subject_id,
        "condition": trial.condition.value,
        "level": trial.level,
        "emg_fs": trial.emg_fs,
        "imu_fs": trial.imu_fs,
        "biodex_fs": trial.biodex_fs,
    }
    (trial_dir / "trial.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    for name, data in (("emg", trial.emg_monopolar), ("imu", trial.imu), ("biodex", trial.biodex)):
        fname, labels = MODALITY_FILES[name]
        _write_modality(trial_dir / fname, data, labels, float_format)
    return trial_dir


def load_trial(path, descriptor: TrialDescriptor) -> RawTrial:
    """Read and validate one trial directory against its manifest entry."""
    path = Path(path)
    meta_path = path / "trial.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{meta_path}: invalid JSON ({exc})") from None
    for key in ("emg_fs", "imu_fs", "biodex_fs"):
        declared = float(meta.get(key, -1))
        expected = getattr(descriptor, key)
        if declared != expected:
            raise RateMismatch(f"{path}: {key} declared {declared} but manifest says {expected}")

    arrays = {name: _read_modality(path / fname, labels) for name, (fname, labels) in MODALITY_FILES.items()}
    trial = RawTrial(
        subject_id=descriptor.subject_id,
        condition=descriptor.condition,
        level=descriptor.level,
        emg_monopolar=arrays["emg"],
        imu=arrays["imu"],
        biodex=arrays["biodex"],
        lever_arm_m=descriptor.lever_arm_m,
        rest_intervals=descriptor.rest_intervals,
        emg_fs=descriptor.emg_fs,
        imu_fs=descriptor.imu_fs,
        biodex_fs=descriptor.biodex_fs,
    )
    _check_intervals(trial.rest_intervals, trial.duration)
    return trial


# --------------------------------------------------------------------------
# force conversion and masking
# --------------------------------------------------------------------------

def torque_to_force(torque_nm, lever_arm_m: float):
    """Elbow torque to force at the wrist attachment, ``F = tau / r``; sign preserved."""
    if not lever_arm_m > 0:
        raise NonPositiveLeverArm(f"lever arm must be positive, got {lever_arm_m}")
    if np.ndim(torque_nm) == 0:
        return float(torque_nm) / lever_arm_m
    return np.asarray(torque_nm, dtype=np.float64) / lever_arm_m


def _check_intervals(intervals, duration: float) -> None:
    prev_end = -np.inf
    for start, end in intervals:
        if not 0 <= start <= end <= duration + 1e-9:
            raise IntervalOutOfRange(f"rest interval [{start}, {end}) outside [0, {duration}]")
        if start < prev_end:
            raise IntervalOutOfRange("rest intervals must be sorted and non-overlapping")
        prev_end = end


def rest_mask(sample_times, rest_intervals, duration: float | None = None) -> np.ndarray:
    """Boolean keep-mask; a sample at time ``t`` is dropped when ``start <= t < end``."""
    t = np.asarray(sample_times, dtype=np.float64)
    if duration is None:
        duration = float(t[-1]) if t.size else 0.0
    _check_intervals(rest_intervals, duration)
    keep = np.ones(t.shape, dtype=bool)
    for start, end in rest_intervals:
        keep &= ~((t >= start) & (t < end))
    return keep


def apply_rest_mask(trial: ProcessedTrial, rest_intervals, duration: float | None = None) -> ProcessedTrial:
    """Drop rest samples from every stream at once (times taken from ``sample_index``).

    Intervals are validated against ``duration`` (defaults to the span of the
    trial's samples; pass the raw recording length when streams were trimmed).
    """
    if not rest_intervals:
        return trial
    times = trial.sample_index / trial.fs
    if duration is None:
        duration = (trial.sample_index[-1] + 1) / trial.fs if len(trial) else 0.0
    keep = rest_mask(times, rest_intervals, duration)
    return ProcessedTrial(
        emg_diff=trial.emg_diff[keep],
        imu=trial.imu[keep],
        force_n=trial.force_n[keep],
        subject_id=trial.subject_id,
        condition=trial.condition,
        level=trial.level,
        fs=trial.fs,
        sample_index=trial.sample_index[keep],
    )


def iter_trials(manifest: DatasetManifest, descriptors: Iterable[TrialDescriptor] | None = None):
    for desc in manifest.trials if descriptors is None else descriptors:
        yield desc, load_trial(manifest.resolve(desc), desc)


def threads_from_env(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("FORCEPIPE_THREADS", default)))
    except ValueError:
        return default
