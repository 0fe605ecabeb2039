"""Signal conditioning and feature-domain transforms.

Everything here is a pure function of numpy arrays. Multi-channel signals are
laid out time-major (``T x C``); 1-D inputs are treated as a single channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from scipy import signal as sps

from forcepipe.errors import (
    Downsample,
    EvenWindow,
    InvalidSpec,
    OrderTooHigh,
    TooShort,
    WrongChannelCount,
)

N_ARRAYS = 4
CHANNELS_PER_ARRAY = 8
N_DIFF = N_ARRAYS * (CHANNELS_PER_ARRAY - 1)


@dataclass(frozen=True)
class BandpassSpec:
    """Band-pass design request. ``order`` is the total filter order."""

    order: int = 8
    low_hz: float = 10.0
    high_hz: float = 500.0
    fs: float = 2048.0

    def validate(self) -> None:
        if self.order <= 0 or self.order % 2:
            raise InvalidSpec(f"band-pass order must be a positive even integer, got {self.order}")
        if not 0 < self.low_hz < self.high_hz < self.fs / 2:
            raise InvalidSpec(
                f"need 0 < low < high < fs/2, got low={self.low_hz} high={self.high_hz} fs={self.fs}"
            )


@dataclass(frozen=True)
class SegmentSpec:
    duration_ms: int = 50
    fs: float = 2048.0

    def __post_init__(self):
        if self.duration_ms not in (50, 100, 150):
            raise InvalidSpec(f"segment duration must be 50, 100 or 150 ms, got {self.duration_ms}")
        if self.fs <= 0:
            raise InvalidSpec("fs must be positive")

    @property
    def window_len(self) -> int:
        # duration_ms * fs / 1000 computed exactly: 0.05 * 2048 is 102.4 -> 102
        return int(Fraction(self.duration_ms) * Fraction(self.fs) / 1000)

    @property
    def hop(self) -> int:
        return self.window_len // 2

    @property
    def psd_bins(self) -> int:
        return self.window_len // 2


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D (T x C) signal, got shape {x.shape}")
    return x, False


def _restore(y, was_1d):
    return y[:, 0] if was_1d else y


# --------------------------------------------------------------------------
# resampling and channel derivation
# --------------------------------------------------------------------------

def resampled_length(n: int, fs: float, fs_out: float) -> int:
    """Number of output samples at ``fs_out`` whose time is <= the last input time."""
    return int((n - 1) * Fraction(fs_out) / Fraction(fs)) + 1


def resample_linear(samples, fs: float, fs_out: float) -> np.ndarray:
    """Linearly interpolate ``samples`` (T or T x C) from ``fs`` onto a ``fs_out`` grid.

    Output sample ``j`` sits at time ``j / fs_out``. The grid stops at the last
    input time, so nothing is extrapolated.
    """
    x, was_1d = _as_2d(samples)
    if fs_out < fs:
        raise Downsample(f"fs_out={fs_out} is below the input rate {fs}")
    n = x.shape[0]
    if n < 2:
        raise TooShort("need at least two samples to interpolate")
    n_out = resampled_length(n, fs, fs_out)
    if fs_out == fs:
        return _restore(x.copy(), was_1d)
    pos = np.arange(n_out) * (fs / fs_out)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo)[:, None]
    y = x[lo] * (1.0 - frac) + x[lo + 1] * frac
    return _restore(y, was_1d)


def differential_channels(emg_monopolar) -> np.ndarray:
    """Single-differential derivation: neighbour subtraction within each 8-contact array."""
    x = np.asarray(emg_monopolar, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_ARRAYS * CHANNELS_PER_ARRAY:
        raise WrongChannelCount(
            f"expected T x {N_ARRAYS * CHANNELS_PER_ARRAY} monopolar EMG, got shape {x.shape}"
        )
    arrays = x.reshape(x.shape[0], N_ARRAYS, CHANNELS_PER_ARRAY)
    return np.diff(arrays, axis=2).reshape(x.shape[0], N_DIFF)


# --------------------------------------------------------------------------
# Butterworth band-pass
# --------------------------------------------------------------------------

def butterworth_bandpass_sos(spec: BandpassSpec) -> np.ndarray:
    """Design a digital Butterworth band-pass as second-order sections.

    The analog low-pass prototype of order ``spec.order // 2`` is shifted to a
    band-pass around the pre-warped edges and mapped with the bilinear
    transform. Returns an ``(order // 2) x 6`` array of ``[b0 b1 b2 1 a1 a2]``
    rows, ordered with the poles closest to the unit circle last.
    """
    spec.validate()
    n_proto = spec.order // 2
    fs2 = 2.0 * spec.fs
    w_lo = fs2 * np.tan(np.pi * spec.low_hz / spec.fs)
    w_hi = fs2 * np.tan(np.pi * spec.high_hz / spec.fs)
    bw = w_hi - w_lo
    w0_sq = w_lo * w_hi

    k = np.arange(n_proto)
    proto = np.exp(1j * np.pi * (2 * k + n_proto + 1) / (2 * n_proto))

    # each prototype pole p maps to the two roots of s^2 - p*bw*s + w0^2
    half = proto * bw / 2.0
    disc = np.sqrt(half**2 - w0_sq + 0j)
    poles_a = np.concatenate([half + disc, half - disc])

    poles_d = (fs2 + poles_a) / (fs2 - poles_a)
    # n_proto analog zeros at s=0 go to z=1; the ones at infinity go to z=-1
    gain = bw**n_proto * np.real(fs2**n_proto / np.prod(fs2 - poles_a))

    upper = poles_d[poles_d.imag > 0]
    if upper.size != n_proto:
        raise InvalidSpec("band-pass design produced real poles; edges too close")
    upper = upper[np.argsort(np.abs(upper))]

    sos = np.zeros((n_proto, 6))
    sos[:, 0] = 1.0
    sos[:, 2] = -1.0
    sos[:, 3] = 1.0
    sos[:, 4] = -2.0 * upper.real
    sos[:, 5] = np.abs(upper) ** 2
    sos[0, :3] *= gain
    return sos


def sos_frequency_response(sos, freqs_hz, fs: float) -> np.ndarray:
    """Complex response of a biquad cascade evaluated directly at ``freqs_hz``."""
    sos = np.asarray(sos, dtype=np.float64)
    zinv = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
    h = np.ones_like(zinv)
    for b0, b1, b2, a0, a1, a2 in sos:
        h = h * (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
    return h


def sos_poles(sos) -> np.ndarray:
    sos = np.asarray(sos, dtype=np.float64)
    return np.concatenate([np.roots(row[3:]) for row in sos])


def butterworth_bandpass(samples, spec: BandpassSpec = BandpassSpec()) -> np.ndarray:
    """Causal band-pass filtering along time (zero initial state)."""
    x, was_1d = _as_2d(samples)
    if x.shape[0] < 3 * spec.order:
        raise TooShort(f"signal of {x.shape[0]} samples is shorter than 3x order ({3 * spec.order})")
    sos = butterworth_bandpass_sos(spec)
    return _restore(sps.sosfilt(sos, x, axis=0), was_1d)


# --------------------------------------------------------------------------
# smoothing
# --------------------------------------------------------------------------

def moving_average(samples, window_points: int = 300) -> np.ndarray:
    """Centered running mean; windows are truncated at the signal edges.

    For even windows the extra sample is taken on the left, i.e. sample ``i``
    averages ``[i - w//2, i + w - 1 - w//2]`` clipped to the signal.
    """
    if window_points < 1:
        raise ValueError("window_points must be >= 1")
    x, was_1d = _as_2d(samples)
    if window_points == 1:
        return _restore(x.copy(), was_1d)
    n = x.shape[0]
    left = window_points // 2
    right = window_points - 1 - left
    idx = np.arange(n)
    start = np.clip(idx - left, 0, n)
    stop = np.clip(idx + right + 1, 0, n)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    y = (csum[stop] - csum[start]) / (stop - start)[:, None]
    return _restore(y, was_1d)


def _lsq_eval_weights(n_points: int, at: int, poly_order: int, half: int) -> np.ndarray:
    """Weights w such that w @ y is the order-``poly_order`` LSQ fit of y evaluated at index ``at``."""
    order = min(poly_order, n_points - 1)
    t = (np.arange(n_points) - at) / max(half, 1)
    vander = np.vander(t, order + 1, increasing=True)
    # the fitted value at t=0 is the constant coefficient
    return np.linalg.pinv(vander)[0]


def savitzky_golay(samples, window_points: int = 401, poly_order: int = 3) -> np.ndarray:
    """Savitzky-Golay smoothing with truncated one-sided fits near the edges.

    Interior samples use the centered least-squares polynomial; within
    ``window_points // 2`` of either end the window is clipped to the
    available samples and the fit is evaluated at the sample's own position.
    """
    if window_points % 2 == 0:
        raise EvenWindow(f"window must be odd, got {window_points}")
    if poly_order >= window_points:
        raise OrderTooHigh(f"poly_order {poly_order} must be below window {window_points}")
    x, was_1d = _as_2d(samples)
    n = x.shape[0]
    half = window_points // 2
    y = np.empty_like(x)

    if n > 2 * half:
        center = _lsq_eval_weights(window_points, half, poly_order, half)
        windows = np.lib.stride_tricks.sliding_window_view(x, window_points, axis=0)
        y[half:n - half] = np.einsum("tcw,w->tc", windows, center)
        edge = range(half)
    else:
        edge = range(n)

    for i in edge:
        for j in {i, n - 1 - i}:
            lo = max(0, j - half)
            hi = min(n, j + half + 1)
            w = _lsq_eval_weights(hi - lo, j - lo, poly_order, half)
            y[j] = w @ x[lo:hi]
    return _restore(y, was_1d)


# --------------------------------------------------------------------------
# segmentation and spectra
# --------------------------------------------------------------------------

class Segments(NamedTuple):
    emg: np.ndarray     # N x w x 28
    imu: np.ndarray     # N x w x 9
    force: np.ndarray   # N, window-mean force
    start: np.ndarray   # N, first sample index of each window


def segment_starts(n_samples: int, spec: SegmentSpec) -> np.ndarray:
    w, hop = spec.window_len, spec.hop
    if n_samples < w:
        raise TooShort(f"{n_samples} samples cannot hold one {w}-sample window")
    count = (n_samples - w) // hop + 1
    return np.arange(count) * hop


def segment(trial, spec: SegmentSpec) -> Segments:
    """Cut half-overlapping windows from a processed trial.

    ``trial`` needs ``emg_diff`` (T x 28), ``imu`` (T x 9) and ``force_n`` (T).
    """
    emg = np.asarray(trial.emg_diff, dtype=np.float64)
    imu = np.asarray(trial.imu, dtype=np.float64)
    force = np.asarray(trial.force_n, dtype=np.float64)
    starts = segment_starts(emg.shape[0], spec)
    idx = starts[:, None] + np.arange(spec.window_len)[None, :]
    return Segments(emg[idx], imu[idx], force[idx].mean(axis=1), starts)


def periodogram_psd(window) -> np.ndarray:
    """Rectangular-window periodogram ``|DFT|^2 / w`` of each column, DC dropped.

    Returns ``floor(w/2)`` rows (bins 1..floor(w/2)). Accepts ``w x C`` or a
    stacked ``N x w x C`` batch.
    """
    x = np.asarray(window, dtype=np.float64)
    axis = x.ndim - 2 if x.ndim >= 2 else 0
    w = x.shape[axis]
    if w < 4:
        raise TooShort(f"periodogram needs w >= 4, got {w}")
    spec = np.fft.rfft(x, axis=axis)
    power = (spec.real**2 + spec.imag**2) / w
    return np.take(power, np.arange(1, w // 2 + 1), axis=axis)
