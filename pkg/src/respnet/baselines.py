"""Classical respiration surrogates from PPG beat morphology.

WAM tracks the per-beat pulse amplitude (peak minus preceding trough); WFM
tracks the instantaneous pulse rate. Both are spline-interpolated onto a
uniform grid and band-passed to the breathing band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline
from scipy.ndimage import maximum_filter1d

from respnet.errors import InvalidConfig, NoBeats, RespNetError, TooFewBeats, TooFewPoints
from respnet.metrics import EVAL_FS, EvalReport, downsample_for_eval, evaluate_method
from respnet.signalio import WindowedDataset

PULSE_BAND_HZ = (0.5, 8.0)
RESP_BAND_HZ = (0.067, 1.0)
REFRACTORY_S = 0.4
ENVELOPE_S = 2.0
THRESHOLD_FRAC = 0.3


@dataclass
class BeatSeries:
    peak_times: np.ndarray
    peak_values: np.ndarray
    trough_times: np.ndarray
    trough_values: np.ndarray

    def __post_init__(self):
        if len({len(self.peak_times), len(self.peak_values), len(self.trough_times), len(self.trough_values)}) != 1:
            raise ValueError("beat arrays must have equal length")
        if np.any(np.diff(self.peak_times) <= 0):
            raise ValueError("peak times must be strictly increasing")
        if np.any(self.trough_times >= self.peak_times):
            raise ValueError("each trough must precede its peak")

    def __len__(self) -> int:
        return len(self.peak_times)


@dataclass
class IrregularSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def _bandpass(x: np.ndarray, fs: float, band: tuple[float, float], order: int = 2) -> np.ndarray:
    hi = min(band[1], 0.45 * fs)
    sos = signal.butter(order, [band[0], hi], btype="bandpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, x, padlen=min(x.size - 1, int(3 * fs / band[0])))


def _refine(f: np.ndarray, i: int) -> tuple[float, float]:
    """Parabolic vertex around sample ``i``; returns (fractional index, value)."""
    if i <= 0 or i >= f.size - 1:
        return float(i), float(f[i])
    a, b, c = f[i - 1], f[i], f[i + 1]
    den = a - 2 * b + c
    if den >= 0:
        return float(i), float(b)
    off = 0.5 * (a - c) / den
    return i + off, float(b - 0.25 * (a - c) * off)


def detect_beats(
    ppg,
    fs: float,
    refractory_s: float = REFRACTORY_S,
    threshold_frac: float = THRESHOLD_FRAC,
    envelope_s: float = ENVELOPE_S,
) -> BeatSeries:
    """Pulse peaks on the band-passed PPG, each paired with its preceding trough.

    Local maxima must exceed ``threshold_frac`` of a rolling maximum envelope.
    A candidate inside the refractory period of the last accepted peak
    replaces it only when strictly higher.
    """
    x = np.asarray(ppg, dtype=np.float64)
    if fs < 25:
        raise InvalidConfig(f"beat detection needs fs >= 25 Hz, got {fs}")
    if x.size / fs < 2.0:
        raise InvalidConfig("beat detection needs at least 2 s of signal")
    f = _bandpass(x, fs, PULSE_BAND_HZ)
    scale = max(1.0, float(np.max(np.abs(x))))
    if np.ptp(f) <= 1e-9 * scale:
        raise NoBeats("flat pulse signal")
    env = maximum_filter1d(f, size=max(3, int(round(envelope_s * fs))), mode="nearest")
    cand = np.flatnonzero((f[1:-1] > f[:-2]) & (f[1:-1] >= f[2:])) + 1
    cand = cand[(f[cand] > 0) & (f[cand] >= threshold_frac * env[cand])]
    refractory = refractory_s * fs
    peaks: list[int] = []
    for i in cand:
        if not peaks or i - peaks[-1] >= refractory:
            peaks.append(int(i))
        elif f[i] > f[peaks[-1]]:
            peaks[-1] = int(i)
    if len(peaks) < 3:
        raise NoBeats(f"only {len(peaks)} pulse peaks found")
    gap = int(np.median(np.diff(peaks)))
    pt, pv, tt, tv = [], [], [], []
    prev = None
    for i in peaks:
        start = prev if prev is not None else max(0, i - gap)
        prev = i
        if i - start < 1:
            continue
        j = start + int(np.argmin(f[start:i]))
        pi, pval = _refine(f, i)
        pt.append(pi / fs)
        pv.append(pval)
        tt.append(j / fs)
        tv.append(float(f[j]))
    if len(pt) < 3:
        raise NoBeats(f"only {len(pt)} complete beats found")
    return BeatSeries(np.asarray(pt), np.asarray(pv), np.asarray(tt), np.asarray(tv))


def interpolate_to_rate(series: IrregularSeries, out_fs: float, duration: float) -> np.ndarray:
    """Natural cubic spline inside the knot hull, held constant outside.

    Returns ``floor(duration * out_fs) + 1`` samples at ``k / out_fs``.
    """
    if series.times.size < 2:
        raise TooFewPoints("interpolation needs at least 2 points")
    n = int(np.floor(duration * out_fs + 1e-9)) + 1
    t = np.arange(n) / out_fs
    spline = CubicSpline(series.times, series.values, bc_type="natural")
    out = spline(np.clip(t, series.times[0], series.times[-1]))
    out[t < series.times[0]] = series.values[0]
    out[t > series.times[-1]] = series.values[-1]
    return out


def extract_wam(beats: BeatSeries, out_fs: float = EVAL_FS, duration: float = None) -> np.ndarray:
    """Amplitude-modulation surrogate: peak-minus-trough height per beat."""
    if len(beats) < 3:
        raise TooFewBeats(f"WAM needs at least 3 beats, got {len(beats)}")
    if duration is None:
        duration = float(beats.peak_times[-1])
    amp = IrregularSeries(beats.peak_times, beats.peak_values - beats.trough_values)
    return _bandpass(interpolate_to_rate(amp, out_fs, duration), out_fs, RESP_BAND_HZ)


def extract_wfm(beats: BeatSeries, out_fs: float = EVAL_FS, duration: float = None) -> np.ndarray:
    """Frequency-modulation surrogate: instantaneous pulse rate (beats/min) per beat pair.

    Each value sits at the midpoint between its two peaks. Rate rather than
    interval is used so the surrogate rises with inspiration, like heart rate.
    """
    if len(beats) < 4:
        raise TooFewBeats(f"WFM needs at least 4 beats, got {len(beats)}")
    if duration is None:
        duration = float(beats.peak_times[-1])
    t = beats.peak_times
    rate = IrregularSeries(0.5 * (t[1:] + t[:-1]), 60.0 / np.diff(t))
    return _bandpass(interpolate_to_rate(rate, out_fs, duration), out_fs, RESP_BAND_HZ)


EXTRACTORS = {"WAM": extract_wam, "WFM": extract_wfm}


def estimate(ppg, fs: float, method: str, out_fs: float = EVAL_FS, n_out: int = None) -> np.ndarray:
    """Run beat detection and one extractor over a PPG segment.

    The result covers ``[0, len(ppg)/fs)`` at ``out_fs`` and is trimmed or
    edge-padded to ``n_out`` samples when given.
    """
    method = method.upper()
    if method not in EXTRACTORS:
        raise InvalidConfig(f"unknown baseline method {method!r}")
    ppg = np.asarray(ppg, dtype=np.float64)
    duration = ppg.size / fs
    out = EXTRACTORS[method](detect_beats(ppg, fs), out_fs, duration)
    if n_out is None:
        n_out = int(round(duration * out_fs))
    if out.size >= n_out:
        return out[:n_out]
    return np.pad(out, (0, n_out - out.size), mode="edge")


def evaluate_baseline(
    ds: WindowedDataset, method: str, dataset_id: str = "", out_fs: float = EVAL_FS
) -> EvalReport:
    """Score a baseline on the test split at ``out_fs`` against the downsampled reference.

    Windows where beat detection fails get a constant estimate and are
    therefore excluded as degenerate.
    """
    preds, refs = baseline_test_predictions(ds, method, out_fs)
    return evaluate_method(preds, refs, out_fs, method.upper(), dataset_id)


def baseline_test_predictions(ds: WindowedDataset, method: str, out_fs: float = EVAL_FS):
    if method.upper() not in EXTRACTORS:
        raise InvalidConfig(f"unknown baseline method {method!r}")
    x, y = ds.subset(train=False)
    preds, refs = [], []
    for xi, yi in zip(x, y):
        ref = downsample_for_eval(yi.astype(np.float64), ds.fs, out_fs)
        try:
            p = estimate(xi, ds.fs, method, out_fs, n_out=ref.size)
        except RespNetError:
            p = np.zeros(ref.size)
        preds.append(p)
        refs.append(ref)
    return preds, refs
