"""Signal conditioning and per-band differential-entropy features.

All operations are pure: filters are zero-phase (forward-backward), feature
windows are non-overlapping, and per-trial processing can run in parallel
across trials.  Filtering uses 4th-order Butterworth band-pass sections and a
Q=30 IIR notch from scipy.signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .montage import ChannelMontage, nearest_neighbor

VAR_FLOOR = 1e-12
NOTCH_Q = 30.0
BUTTER_ORDER = 4

FLATLINE_SECONDS = 5.0
CHANNEL_STD_FACTOR = 4.0
NEIGHBOR_CORR_MIN = 0.6
SEGMENT_VAR_FACTOR = 7.0
INTERP_NEIGHBORS = 4

DEFAULT_TAIL_SECONDS = 30.0


class DspError(ValueError):
    pass


@dataclass
class RawTrial:
    """One continuous recording: channels x samples in microvolts."""

    subject_id: int
    session_id: int
    trial_id: int
    label: int
    fs: float
    data: np.ndarray  # (channels, samples)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        if self.fs <= 0:
            raise DspError(f"sampling rate must be positive, got {self.fs}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DspError(f"trial data must be (channels, samples), got {self.data.shape}")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class BandSpec:
    """Ordered (name, low Hz, high Hz) frequency bands."""

    bands: tuple[tuple[str, float, float], ...] = (
        ("delta", 0.1, 4.0),
        ("theta", 4.0, 8.0),
        ("alpha", 8.0, 13.0),
        ("beta", 13.0, 31.0),
        ("gamma", 31.0, 50.0),
    )

    def __post_init__(self):
        object.__setattr__(self, "bands",
                           tuple((str(n), float(lo), float(hi)) for n, lo, hi in self.bands))
        for name, lo, hi in self.bands:
            if not 0 < lo < hi:
                raise DspError(f"band {name}: need 0 < low < high, got ({lo}, {hi})")

    @property
    def names(self):
        return tuple(b[0] for b in self.bands)

    def __len__(self):
        return len(self.bands)

    def validate_for_fs(self, fs):
        for name, lo, hi in self.bands:
            if hi >= fs / 2:
                raise DspError(f"band {name} upper edge {hi} Hz >= Nyquist ({fs / 2} Hz)")


DEFAULT_BANDS = BandSpec()


@dataclass
class FeatureSample:
    """Differential entropy of one window: channels x bands, in nats."""

    subject_id: int
    session_id: int
    trial_id: int
    window_index: int
    label: int
    de: np.ndarray  # (channels, n_bands) float32

    def __post_init__(self):
        self.de = np.asarray(self.de, dtype=np.float32)
        if self.de.ndim != 2:
            raise DspError(f"de must be 2-D, got shape {self.de.shape}")
        if not np.all(np.isfinite(self.de)):
            raise DspError("de contains non-finite values")


# -- filtering -------------------------------------------------------------

def _check_band(low, high, fs):
    if not 0 < low < high < fs / 2:
        raise DspError(f"band ({low}, {high}) Hz invalid for fs={fs} Hz")


def bandpass(data, low, high, fs):
    """Zero-phase 4th-order Butterworth band-pass, per channel."""
    data = np.asarray(data, dtype=np.float64)
    _check_band(low, high, fs)
    if not np.all(np.isfinite(data)):
        raise DspError("bandpass input contains non-finite values")
    sos = signal.butter(BUTTER_ORDER, [low, high], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, data, axis=-1)


def notch(data, f0, fs):
    """Zero-phase second-order IIR notch at f0 with quality factor 30."""
    data = np.asarray(data, dtype=np.float64)
    if not 0 < f0 < fs / 2:
        raise DspError(f"notch frequency {f0} Hz outside (0, {fs / 2}) Hz")
    b, a = signal.iirnotch(f0, NOTCH_Q, fs=fs)
    return signal.filtfilt(b, a, data, axis=-1)


# -- differential entropy ---------------------------------------------------

def differential_entropy(window):
    """0.5 * ln(2*pi*e * var) with a 1e-12 variance floor, in nats.

    Variance uses the N denominator; the floor keeps constant windows finite.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1 or window.size < 2:
        raise DspError("differential entropy needs a 1-D window of length >= 2")
    var = float(np.var(window))
    return 0.5 * math.log(2.0 * math.pi * math.e * max(var, VAR_FLOOR))


def _window_de(filtered, n_windows, win):
    """(channels, n_windows) DE over consecutive windows of filtered data."""
    c = filtered.shape[0]
    segs = filtered[:, : n_windows * win].reshape(c, n_windows, win)
    var = segs.var(axis=-1)
    return 0.5 * np.log(2.0 * math.pi * math.e * np.maximum(var, VAR_FLOOR))


def trial_tail(trial: RawTrial, tail_s=DEFAULT_TAIL_SECONDS) -> RawTrial:
    """The last `tail_s` seconds of a trial (whole trial if shorter or None)."""
    if tail_s is None:
        return trial
    n_tail = int(round(tail_s * trial.fs))
    if n_tail >= trial.n_samples:
        return trial
    return RawTrial(trial.subject_id, trial.session_id, trial.trial_id,
                    trial.label, trial.fs, trial.data[:, -n_tail:])


def extract_de(trial: RawTrial, bands: BandSpec = DEFAULT_BANDS,
               window_s=1.0, tail_s=DEFAULT_TAIL_SECONDS) -> list[FeatureSample]:
    """Band-filter the trial tail and emit one DE sample per window.

    Filtering runs over the full tail (so band transients settle across
    window edges) before slicing into non-overlapping `window_s` windows;
    the sample count is exactly floor(tail_length / window).
    """
    bands.validate_for_fs(trial.fs)
    tail = trial_tail(trial, tail_s)
    win = int(round(window_s * trial.fs))
    if win < 2:
        raise DspError(f"window of {window_s} s is too short at fs={trial.fs}")
    n_windows = tail.n_samples // win
    if n_windows < 1:
        raise DspError(
            f"trial has {tail.n_samples} samples, shorter than one {window_s} s window")
    de = np.empty((tail.n_channels, n_windows, len(bands)))
    for b, (_, lo, hi) in enumerate(bands.bands):
        filtered = bandpass(tail.data, lo, hi, trial.fs)
        de[:, :, b] = _window_de(filtered, n_windows, win)
    return [
        FeatureSample(trial.subject_id, trial.session_id, trial.trial_id,
                      w, trial.label, de[:, w, :])
        for w in range(n_windows)
    ]


# -- temporal smoothing ------------------------------------------------------

def lds_smooth(sequence, q_ratio=0.01):
    """Random-walk Kalman filter + RTS smoother over a feature sequence.

    Each scalar dimension is smoothed independently with observation noise
    r = population variance of that dimension across the sequence and process
    noise q = `q_ratio` * r.  The filter is initialized at the first
    observation with P = r.  Constant dimensions (r = 0) pass through
    unchanged.
    """
    if len(sequence) == 0:
        raise DspError("cannot smooth an empty sequence")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in sequence])
    shape = stack.shape[1:]
    if any(np.asarray(m).shape != shape for m in sequence):
        raise DspError("inconsistent shapes in sequence")
    n = stack.shape[0]
    if n == 1:
        return [stack[0].copy()]
    y = stack.reshape(n, -1)
    r = y.var(axis=0)
    active = r > 0.0
    out = y.copy()
    if np.any(active):
        ya = y[:, active]
        ra = r[active]
        qa = q_ratio * ra
        x_filt = np.empty_like(ya)
        p_filt = np.empty_like(ya)
        x_pred = np.empty_like(ya)
        p_pred = np.empty_like(ya)
        x_filt[0] = ya[0]
        p_filt[0] = ra
        for t in range(1, n):
            x_pred[t] = x_filt[t - 1]
            p_pred[t] = p_filt[t - 1] + qa
            gain = p_pred[t] / (p_pred[t] + ra)
            x_filt[t] = x_pred[t] + gain * (ya[t] - x_pred[t])
            p_filt[t] = (1.0 - gain) * p_pred[t]
        x_smooth = x_filt.copy()
        for t in range(n - 2, -1, -1):
            c = p_filt[t] / p_pred[t + 1]
            x_smooth[t] = x_filt[t] + c * (x_smooth[t + 1] - x_pred[t + 1])
        out[:, active] = x_smooth
    return [out[t].reshape(shape) for t in range(n)]


def smooth_samples(samples: list[FeatureSample], q_ratio=0.01) -> list[FeatureSample]:
    """LDS-smooth a trial's DE sequence, keeping metadata and window order."""
    smoothed = lds_smooth([s.de for s in samples], q_ratio=q_ratio)
    return [
        FeatureSample(s.subject_id, s.session_id, s.trial_id, s.window_index,
                      s.label, m)
        for s, m in zip(samples, smoothed)
    ]


# -- artifact heuristics ------------------------------------------------------

def _max_run_length(x):
    """Longest run of identical consecutive values in a 1-D array."""
    change = np.flatnonzero(np.diff(x) != 0)
    edges = np.concatenate(([-1], change, [x.size - 1]))
    return int(np.max(np.diff(edges)))


def detect_bad_channels(trial: RawTrial, montage: ChannelMontage) -> set[int]:
    """Union of three rejection criteria.

    (a) a flatline (identical consecutive values) longer than 5 s;
    (b) channel std above 4x the mean channel std;
    (c) Pearson correlation with the nearest-neighbor channel below 0.6.
    """
    if trial.n_channels != len(montage):
        raise DspError(
            f"trial has {trial.n_channels} channels, montage has {len(montage)}")
    data = trial.data
    bad: set[int] = set()

    flat_limit = FLATLINE_SECONDS * trial.fs
    for c in range(trial.n_channels):
        if _max_run_length(data[c]) > flat_limit:
            bad.add(c)

    stds = data.std(axis=1)
    mean_std = stds.mean()
    if mean_std > 0:
        bad.update(np.flatnonzero(stds > CHANNEL_STD_FACTOR * mean_std).tolist())

    if trial.n_channels >= 2:
        for c in range(trial.n_channels):
            nb = nearest_neighbor(montage, c)
            x, y = data[c], data[nb]
            sx, sy = x.std(), y.std()
            if sx == 0.0 or sy == 0.0:
                corr = 0.0
            else:
                corr = float(np.corrcoef(x, y)[0, 1])
            if corr < NEIGHBOR_CORR_MIN:
                bad.add(c)
    return bad


def reject_bad_segments(trial: RawTrial, window_s) -> np.ndarray:
    """Keep-mask over consecutive windows; a window is dropped when any
    channel's in-window variance exceeds 7x that channel's trial variance."""
    win = int(round(window_s * trial.fs))
    if win > trial.n_samples:
        raise DspError("window longer than trial")
    if win < 1:
        raise DspError("window too short")
    n_windows = trial.n_samples // win
    segs = trial.data[:, : n_windows * win].reshape(trial.n_channels, n_windows, win)
    win_var = segs.var(axis=-1)
    trial_var = trial.data.var(axis=1, keepdims=True)
    bad = (win_var > SEGMENT_VAR_FACTOR * trial_var).any(axis=0)
    return ~bad


def interpolate_channels(trial: RawTrial, bad: set, montage: ChannelMontage) -> RawTrial:
    """Replace each bad channel by an inverse-distance-weighted average of
    its 4 nearest good channels (weights normalized to sum to 1)."""
    if trial.n_channels != len(montage):
        raise DspError("trial/montage channel mismatch")
    bad = {int(b) for b in bad}
    if any(not 0 <= b < trial.n_channels for b in bad):
        raise DspError("bad-channel index out of range")
    good = [c for c in range(trial.n_channels) if c not in bad]
    if not good:
        raise DspError("cannot interpolate: all channels are bad")
    if not bad:
        return trial
    data = trial.data.copy()
    pos = montage.positions
    for c in sorted(bad):
        d = np.linalg.norm(pos[good] - pos[c], axis=1)
        order = np.argsort(d, kind="stable")[:INTERP_NEIGHBORS]
        dd = np.maximum(d[order], 1e-12)
        w = 1.0 / dd
        w /= w.sum()
        src = np.array(good)[order]
        data[c] = w @ trial.data[src]
    return RawTrial(trial.subject_id, trial.session_id, trial.trial_id,
                    trial.label, trial.fs, data)


def rereference_mean(trial: RawTrial) -> RawTrial:
    """Subtract the instantaneous across-channel mean (idempotent)."""
    data = trial.data - trial.data.mean(axis=0, keepdims=True)
    return RawTrial(trial.subject_id, trial.session_id, trial.trial_id,
                    trial.label, trial.fs, data)


def preprocess_trial(trial: RawTrial, montage: ChannelMontage,
                     band=(0.01, 48.0), notch_hz=50.0) -> RawTrial:
    """Conditioning chain: band-pass, notch, bad-channel interpolation,
    mean re-reference.  Segment rejection is applied separately so its
    windows can align with feature windows."""
    data = bandpass(trial.data, band[0], band[1], trial.fs)
    if notch_hz is not None and 0 < notch_hz < trial.fs / 2:
        data = notch(data, notch_hz, trial.fs)
    cleaned = RawTrial(trial.subject_id, trial.session_id, trial.trial_id,
                       trial.label, trial.fs, data)
    bad = detect_bad_channels(cleaned, montage)
    if bad and len(bad) < trial.n_channels:
        cleaned = interpolate_channels(cleaned, bad, montage)
    return rereference_mean(cleaned)
