"""Seeded synthetic elbow-flexion/extension trials.

Surrogate data only. Signal model:

* kinematics: alternating flexion/extension phases inside the range of
  motion; isotonic trials hold the torque level, isokinetic trials hold the
  angular velocity, dynamic trials use low-pass random angle and torque;
* EMG: per-channel band-limited (10-500 Hz) Gaussian noise whose envelope is
  ``gain * (baseline + (|F_m| / F_ref) ** exponent * f_v(omega) * f_l(theta))``
  where ``F_m`` adds the forearm's gravity load to the measured force.
  Arrays 1-3 (flexors) follow positive ``F_m`` and array 4 (extensor)
  negative ``F_m``. A shared 50 Hz common-mode term cancels in the differential channels;
* IMU on the forearm: accelerometer = gravity projection plus tangential and
  centripetal terms, gyroscope z = angular velocity, magnetometer = rotated
  constant field.

The velocity and length factors tie EMG amplitude to the kinematics, so the
force is only fully recoverable when the IMU is available.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt, sosfiltfilt

from forcepipe import BIODEX_FS, EMG_FS, IMU_FS, dsp
from forcepipe.dataset import (
    Condition,
    DatasetManifest,
    RawTrial,
    TrialDescriptor,
    write_trial,
)
from forcepipe.dsp import CHANNELS_PER_ARRAY, N_ARRAYS
from forcepipe.errors import InvalidProfile

log = logging.getLogger(__name__)

ISOTONIC_LEVELS_NM = (5.0, 8.0, 12.0)
ISOKINETIC_LEVELS_DEGPS = (60.0, 90.0, 180.0)
ROM_RANGE_DEG = (74.0, 86.0)
GRAVITY = 9.81
F_REF_N = 30.0
SENSOR_RADIUS_M = 0.2
# world-frame magnetic field (horizontal, vertical), microtesla
MAG_FIELD = (20.0, -45.0)


@dataclass(frozen=True)
class SynthSubject:
    subject_id: str
    gains: np.ndarray            # 32 monopolar channel gains, > 0
    lever_arm_m: float = 0.4
    emg_snr_db: float = 10.0
    imu_snr_db: float = 20.0
    force_exponent: float = 0.8
    velocity_gain: float = 2.0   # concentric activation increase per 180 deg/s
    length_gain: float = 1.0     # activation increase at the short end of the ROM
    forearm_torque_nm: float = 2.5
    baseline: float = 0.03
    emg_scale_mv: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if np.asarray(self.gains).shape != (N_ARRAYS * CHANNELS_PER_ARRAY,) or np.any(np.asarray(self.gains) <= 0):
            raise InvalidProfile("subject needs 32 positive channel gains")
        if self.lever_arm_m <= 0:
            raise InvalidProfile("lever arm must be positive")


def make_subject(index: int, seed: int = 0, **overrides) -> SynthSubject:
    """Draw subject ``index`` of a seeded population."""
    rng = np.random.default_rng([seed, index, 0x5EED])
    array_gain = rng.lognormal(0.0, 0.35, size=N_ARRAYS)
    chan_gain = rng.lognormal(0.0, 0.15, size=(N_ARRAYS, CHANNELS_PER_ARRAY))
    gains = (array_gain[:, None] * chan_gain).ravel()
    kw = dict(
        subject_id=f"S{index + 1:02d}",
        gains=gains,
        lever_arm_m=float(rng.uniform(0.37, 0.43)),
        force_exponent=float(rng.uniform(0.75, 0.85)),
        seed=int(rng.integers(2**31)),
    )
    kw.update(overrides)
    return SynthSubject(**kw)


@dataclass(frozen=True)
class SynthProfile:
    condition: Condition
    level: float | None = None
    repetitions: int = 3
    rom_deg: float = 80.0
    rest_s: float = 0.5
    ripple_nm: float = 0.1
    seed: int = 0

    def __post_init__(self):
        cond = Condition.parse(self.condition)
        object.__setattr__(self, "condition", cond)
        if self.repetitions < 1:
            raise InvalidProfile("need at least one repetition")
        if not ROM_RANGE_DEG[0] <= self.rom_deg <= ROM_RANGE_DEG[1]:
            raise InvalidProfile(f"ROM {self.rom_deg} outside {ROM_RANGE_DEG}")
        if self.rest_s < 0 or self.ripple_nm < 0:
            raise InvalidProfile("rest and ripple must be non-negative")
        if cond is Condition.ISOTONIC and self.level not in ISOTONIC_LEVELS_NM:
            raise InvalidProfile(f"isotonic level must be one of {ISOTONIC_LEVELS_NM} Nm")
        if cond is Condition.ISOKINETIC and self.level not in ISOKINETIC_LEVELS_DEGPS:
            raise InvalidProfile(f"isokinetic level must be one of {ISOKINETIC_LEVELS_DEGPS} deg/s")
        if cond is Condition.DYNAMIC and self.level is not None:
            raise InvalidProfile("dynamic trials have no level")


# --------------------------------------------------------------------------
# kinematics (on the EMG clock)
# --------------------------------------------------------------------------

def _lowpass_noise(rng, n, fs, cutoff_hz):
    sos = butter(2, cutoff_hz, fs=fs, output="sos")
    x = sosfiltfilt(sos, rng.standard_normal(n + 2 * int(fs)))[int(fs):-int(fs)]
    return x / x.std()


def _cosine_phase(n, rom, direction):
    s = np.arange(n) / n
    return direction * rom * (1.0 - np.cos(np.pi * s)) / 2.0


def _isotonic(profile, rng, fs):
    rom = profile.rom_deg
    # heavier loads move more slowly
    slow = 1.0 + 0.05 * (profile.level - ISOTONIC_LEVELS_NM[0])
    pieces = []
    for _ in range(profile.repetitions):
        for direction in (1.0, -1.0):
            n = int(rng.uniform(0.6, 1.8) * slow * fs)
            pieces.append(_cosine_phase(n, rom, direction) + (0.0 if direction > 0 else rom))
    theta = np.concatenate(pieces)
    omega = np.gradient(theta) * fs
    ripple = profile.ripple_nm * np.sin(2 * np.pi * 3.0 * np.arange(len(theta)) / fs + rng.uniform(0, 2 * np.pi))
    torque = profile.level * np.tanh(omega / 10.0) + ripple * (np.abs(omega) > 1.0)
    return theta, omega, torque


def _isokinetic(profile, rng, fs):
    rom, v = profile.rom_deg, profile.level
    ramp = int(0.08 * fs)
    pieces = []
    for _ in range(profile.repetitions):
        for direction in (1.0, -1.0):
            n_const = max(1, int(round((rom / v - 0.08) * fs)))
            up = (1 - np.cos(np.pi * np.arange(ramp) / ramp)) / 2
            prof = np.concatenate([up, np.ones(n_const), up[::-1]]) * v
            pieces.append(direction * prof)
            # short hold at the reversal
            pieces.append(np.zeros(int(rng.uniform(0.1, 0.3) * fs)))
    omega = np.concatenate(pieces)
    theta = np.cumsum(omega) / fs
    theta = theta - theta.min()
    amp = 4.0 + 10.0 * (0.5 + 0.5 * np.tanh(_lowpass_noise(rng, len(omega), fs, 0.7)))
    torque = amp * np.tanh(omega / 10.0)
    return theta, omega, torque


def _dynamic(profile, rng, fs):
    n = int(profile.repetitions * 2.5 * fs)
    u = _lowpass_noise(rng, n, fs, 1.0)
    theta = profile.rom_deg * (0.5 + 0.5 * np.tanh(0.8 * u))
    omega = np.gradient(theta) * fs
    torque = 12.0 * np.tanh(0.7 * _lowpass_noise(rng, n, fs, 1.0))
    return theta, omega, torque


def kinematics(profile: SynthProfile, rng, fs: float = EMG_FS):
    """Angle (deg, 0 = extended), velocity (deg/s) and torque (Nm) with rests."""
    gen = {Condition.ISOTONIC: _isotonic, Condition.ISOKINETIC: _isokinetic, Condition.DYNAMIC: _dynamic}
    theta, omega, torque = gen[profile.condition](profile, rng, fs)
    n_rest = int(round(profile.rest_s * fs))
    pad = lambda x, a, b: np.concatenate([np.full(n_rest, a), x, np.full(n_rest, b)])
    return (
        pad(theta, theta[0], theta[-1]),
        pad(omega, 0.0, 0.0),
        pad(torque, 0.0, 0.0),
    )


# --------------------------------------------------------------------------
# sensors
# --------------------------------------------------------------------------

def _activation(force, omega, theta, rom, subject: SynthSubject, flexor: bool):
    f = np.maximum(force if flexor else -force, 0.0)
    # shortening velocity of this muscle group: flexors shorten when omega > 0
    shortening = (omega if flexor else -omega) / 180.0
    fv = np.where(shortening >= 0, 1.0 + subject.velocity_gain * shortening, 1.0 + 0.3 * shortening)
    # each group is weakest when short: flexors at full flexion, extensors at full extension
    rel = np.clip(theta / rom, 0.0, 1.0)
    fl = 1.0 + subject.length_gain * (rel if flexor else 1.0 - rel)
    return (f / F_REF_N) ** subject.force_exponent * np.maximum(fv, 0.2) * fl


def synth_emg(force, omega, theta, rom, subject: SynthSubject, rng, fs: float = EMG_FS):
    n = len(force)
    n_ch = N_ARRAYS * CHANNELS_PER_ARRAY
    sos = dsp.butterworth_bandpass_sos(dsp.BandpassSpec(order=4, low_hz=10.0, high_hz=500.0, fs=fs))
    carrier = sosfilt(sos, rng.standard_normal((n + 512, n_ch)), axis=0)[512:]
    carrier /= carrier.std(axis=0)
    # muscles also hold the forearm against gravity, which the dynamometer does not see
    muscle = force + subject.forearm_torque_nm * np.sin(np.deg2rad(theta)) / subject.lever_arm_m
    act_flex = _activation(muscle, omega, theta, rom, subject, True)
    act_ext = _activation(muscle, omega, theta, rom, subject, False)
    env = np.empty((n, n_ch))
    for a in range(N_ARRAYS):
        act = act_ext if a == N_ARRAYS - 1 else act_flex
        cols = slice(a * CHANNELS_PER_ARRAY, (a + 1) * CHANNELS_PER_ARRAY)
        env[:, cols] = (subject.baseline + act)[:, None]
    signal = subject.emg_scale_mv * np.asarray(subject.gains) * env * carrier
    noise_std = np.sqrt(np.mean(signal**2, axis=0) / 10 ** (subject.emg_snr_db / 10))
    noise = rng.standard_normal((n, n_ch)) * noise_std
    t = np.arange(n) / fs
    hum = 0.05 * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
    return signal + noise + hum[:, None]


def synth_imu(theta_deg, omega_degps, subject: SynthSubject, rng, fs: float):
    phi = np.deg2rad(theta_deg)
    w = np.deg2rad(omega_degps)
    alpha = np.gradient(w) * fs
    r = SENSOR_RADIUS_M
    # sensor x along the forearm, y perpendicular in the motion plane
    acc = np.stack([
        GRAVITY * np.cos(phi) - r * w**2,
        -GRAVITY * np.sin(phi) + r * alpha,
        np.zeros_like(phi),
    ], axis=1)
    gyro = np.stack([np.zeros_like(w), np.zeros_like(w), omega_degps], axis=1)
    bh, bv = MAG_FIELD
    mag = np.stack([bh * np.sin(phi) + bv * np.cos(phi), bh * np.cos(phi) - bv * np.sin(phi),
                    np.full_like(phi, 5.0)], axis=1)
    out = []
    for block in (acc, gyro, mag):
        spread = max(float(np.sqrt(np.mean((block - block.mean(axis=0)) ** 2))), 1e-3)
        noise = rng.standard_normal(block.shape) * spread / 10 ** (subject.imu_snr_db / 20)
        out.append(block + noise)
    return np.concatenate(out, axis=1)


def _on_clock(x, fs_src, fs_dst, n_dst):
    return np.interp(np.arange(n_dst) / fs_dst, np.arange(len(x)) / fs_src, x)


def generate_trial(subject: SynthSubject, profile: SynthProfile) -> RawTrial:
    """Synthesize one trial at native rates (EMG 2048, IMU 500, Biodex 1250 Hz)."""
    if not isinstance(profile, SynthProfile):
        raise InvalidProfile(f"expected SynthProfile, got {type(profile).__name__}")
    rng = np.random.default_rng([subject.seed, profile.seed, 0x7A1])
    theta, omega, torque = kinematics(profile, rng)
    n = len(theta)
    duration = n / EMG_FS
    force = torque / subject.lever_arm_m
    emg = synth_emg(force, omega, theta, profile.rom_deg, subject, rng)

    n_imu = int(duration * IMU_FS)
    n_bdx = int(duration * BIODEX_FS)
    th_i, om_i = (_on_clock(x, EMG_FS, IMU_FS, n_imu) for x in (theta, omega))
    imu = synth_imu(th_i, om_i, subject, rng, IMU_FS)
    biodex = np.stack([_on_clock(x, EMG_FS, BIODEX_FS, n_bdx) for x in (torque, theta + 10.0, omega)], axis=1)

    rests = ()
    if profile.rest_s > 0:
        rests = ((0.0, profile.rest_s), (duration - profile.rest_s, duration))
    return RawTrial(
        subject_id=subject.subject_id,
        condition=profile.condition,
        level=profile.level,
        emg_monopolar=emg,
        imu=imu,
        biodex=biodex,
        lever_arm_m=subject.lever_arm_m,
        rest_intervals=rests,
    )


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def trial_profiles(condition, n_trials: int, seed: int, repetitions: int = 3) -> list[SynthProfile]:
    """Profiles for one subject and condition; levels cycle through the protocol values."""
    cond = Condition.parse(condition)
    rng = np.random.default_rng([seed, list(Condition).index(cond), 0xC0DE])
    levels = {
        Condition.ISOTONIC: ISOTONIC_LEVELS_NM,
        Condition.ISOKINETIC: ISOKINETIC_LEVELS_DEGPS,
        Condition.DYNAMIC: (None,),
    }[cond]
    return [
        SynthProfile(cond, levels[k % len(levels)], repetitions=repetitions,
                     rom_deg=float(np.round(rng.uniform(*ROM_RANGE_DEG), 1)), seed=int(rng.integers(2**31)))
        for k in range(n_trials)
    ]


def generate_dataset(out_dir, n_subjects: int = 16, trials_per_condition: int = 12, seed: int = 0,
                     conditions=tuple(Condition), repetitions: int = 3,
                     float_format: str | None = "%.6g") -> DatasetManifest:
    """Write a synthetic dataset and its ``manifest.json``; returns the manifest.

    Dynamic trials are three times as many as the other conditions.
    """
    if n_subjects < 1 or trials_per_condition < 1:
        raise InvalidProfile("need at least one subject and one trial per condition")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    descriptors = []
    for i in range(n_subjects):
        subject = make_subject(i, seed)
        for cond in (Condition.parse(c) for c in conditions):
            n_trials = trials_per_condition * (3 if cond is Condition.DYNAMIC else 1)
            for k, profile in enumerate(trial_profiles(cond, n_trials, subject.seed, repetitions)):
                trial = generate_trial(subject, profile)
                rel = Path(subject.subject_id) / f"{cond.value}_{k + 1:02d}"
                write_trial(trial, out_dir / rel, float_format=float_format)
                descriptors.append(TrialDescriptor(
                    path=rel.as_posix(),
                    subject_id=subject.subject_id,
                    condition=cond,
                    level=profile.level,
                    lever_arm_m=subject.lever_arm_m,
                    rest_intervals=trial.rest_intervals,
                ))
        log.info("generated subject %s", subject.subject_id)
    manifest = DatasetManifest(trials=descriptors, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
