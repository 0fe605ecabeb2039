"""Trial conditioning pipeline and the on-disk segment store.

Order of operations per trial: resample Biodex and IMU to the EMG rate,
derive differential EMG, band-pass it, smooth torque (moving average) and IMU
(Savitzky-Golay), convert torque to force, drop rest periods, then cut
windows and compute the per-window periodogram.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from forcepipe import dsp
from forcepipe.dataset import (
    Condition,
    DatasetManifest,
    ProcessedTrial,
    RawTrial,
    TrialDescriptor,
    apply_rest_mask,
    load_trial,
    torque_to_force,
)
from forcepipe.errors import MalformedFile, TooShort

log = logging.getLogger(__name__)

MODALITIES = ("emg_time", "emg_freq", "imu")
STORE_VERSION = 1


@dataclass(frozen=True)
class PreprocessSettings:
    bandpass: dsp.BandpassSpec = dsp.BandpassSpec()
    torque_smoothing_points: int = 300
    imu_window_points: int = 401
    imu_poly_order: int = 3


def condition_trial(raw: RawTrial, settings: PreprocessSettings = PreprocessSettings()) -> ProcessedTrial:
    """Resample, filter and align a raw trial; rest periods are still present."""
    fs = raw.emg_fs
    biodex = dsp.resample_linear(raw.biodex, raw.biodex_fs, fs)
    imu = dsp.resample_linear(raw.imu, raw.imu_fs, fs)
    emg = dsp.differential_channels(raw.emg_monopolar)
    emg = dsp.butterworth_bandpass(emg, settings.bandpass)

    n = min(emg.shape[0], biodex.shape[0], imu.shape[0])
    torque = dsp.moving_average(biodex[:n, 0], settings.torque_smoothing_points)
    imu = dsp.savitzky_golay(imu[:n], settings.imu_window_points, settings.imu_poly_order)
    force = torque_to_force(torque, raw.lever_arm_m)
    return ProcessedTrial(
        emg_diff=emg[:n],
        imu=imu,
        force_n=force,
        subject_id=raw.subject_id,
        condition=raw.condition,
        level=raw.level,
        fs=fs,
    )


def preprocess_trial(raw: RawTrial, settings: PreprocessSettings = PreprocessSettings()) -> ProcessedTrial:
    return apply_rest_mask(condition_trial(raw, settings), raw.rest_intervals, raw.duration)


@dataclass
class TrialSegments:
    """Model-ready windows of one trial."""

    trial_id: str
    subject_id: str
    condition: str
    level: float | None
    emg_time: np.ndarray   # N x w x 28
    emg_freq: np.ndarray   # N x w//2 x 28
    imu: np.ndarray        # N x w x 9
    force: np.ndarray      # N
    time_s: np.ndarray     # N, window centre on the original trial clock
    segment_ms: int = 50

    def __len__(self) -> int:
        return len(self.force)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {m: tuple(getattr(self, m).shape) for m in MODALITIES}


def segment_trial(trial: ProcessedTrial, spec: dsp.SegmentSpec, trial_id: str = "") -> TrialSegments:
    seg = dsp.segment(trial, spec)
    centre = trial.sample_index[seg.start] + spec.window_len / 2.0
    return TrialSegments(
        trial_id=trial_id,
        subject_id=trial.subject_id,
        condition=trial.condition.value if trial.condition is not None else "",
        level=trial.level,
        emg_time=seg.emg,
        emg_freq=dsp.periodogram_psd(seg.emg),
        imu=seg.imu,
        force=seg.force,
        time_s=centre / trial.fs,
        segment_ms=spec.duration_ms,
    )


def segment_manifest(
    manifest: DatasetManifest,
    segment_ms: int = 50,
    condition=None,
    subjects: Iterable[str] | None = None,
    settings: PreprocessSettings = PreprocessSettings(),
    on_skip=None,
) -> list[TrialSegments]:
    """Load, condition and segment every selected trial.

    Trials too short to hold a single window after masking are skipped and
    reported through ``on_skip(descriptor, reason)``.
    """
    spec = dsp.SegmentSpec(segment_ms)
    out = []
    for desc in manifest.select(condition, subjects):
        raw = load_trial(manifest.resolve(desc), desc)
        proc = preprocess_trial(raw, settings)
        try:
            out.append(segment_trial(proc, spec, desc.trial_id))
        except TooShort as exc:
            log.warning("skipping %s: %s", desc.trial_id, exc)
            if on_skip is not None:
                on_skip(desc, str(exc))
    return out


# --------------------------------------------------------------------------
# segment store
# --------------------------------------------------------------------------

def _file_stem(trial_id: str) -> str:
    return trial_id.replace("/", "_")


def write_store(segments: list[TrialSegments], out_dir, skipped: list[str] | None = None) -> Path:
    """One ``.npy`` per (trial, modality) plus a JSON sidecar per trial and an index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for seg in segments:
        stem = _file_stem(seg.trial_id)
        for name in (*MODALITIES, "force", "time_s"):
            np.save(out_dir / f"{stem}.{name}.npy", np.ascontiguousarray(getattr(seg, name)))
        sidecar = {
            "trial_id": seg.trial_id,
            "subject_id": seg.subject_id,
            "condition": seg.condition,
            "level": seg.level,
            "segment_ms": seg.segment_ms,
            "n_segments": len(seg),
            "shapes": {k: list(v) for k, v in seg.shapes().items()},
        }
        (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")
        index.append(stem)
    meta = {
        "store_version": STORE_VERSION,
        "segment_ms": segments[0].segment_ms if segments else None,
        "trials": index,
        "skipped": list(skipped or []),
    }
    path = out_dir / "store.json"
    path.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return path


def read_store(store_dir, condition=None, subjects: Iterable[str] | None = None) -> list[TrialSegments]:
    store_dir = Path(store_dir)
    index_path = store_dir / "store.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no segment store at {store_dir} (missing store.json)")
    meta = json.loads(index_path.read_text(encoding="utf-8"))
    if meta.get("store_version") != STORE_VERSION:
        raise MalformedFile(f"{index_path}: unsupported store_version {meta.get('store_version')}")
    cond = None if condition is None else Condition.parse(condition).value
    keep = None if subjects is None else set(subjects)
    out = []
    for stem in meta["trials"]:
        side = json.loads((store_dir / f"{stem}.json").read_text(encoding="utf-8"))
        if cond is not None and side["condition"] != cond:
            continue
        if keep is not None and side["subject_id"] not in keep:
            continue
        arrays = {name: np.load(store_dir / f"{stem}.{name}.npy") for name in (*MODALITIES, "force", "time_s")}
        out.append(
            TrialSegments(
                trial_id=side["trial_id"],
                subject_id=side["subject_id"],
                condition=side["condition"],
                level=side["level"],
                segment_ms=side["segment_ms"],
                **arrays,
            )
        )
    return out


def descriptor_for(manifest: DatasetManifest, trial_id: str) -> TrialDescriptor:
    for d in manifest.trials:
        if d.trial_id == trial_id:
            return d
    raise KeyError(trial_id)
