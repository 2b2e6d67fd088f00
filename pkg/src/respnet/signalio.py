"""Record ingestion, resampling, windowing, splitting and synthetic records."""

from __future__ import annotations

import csv
import enum
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from respnet.errors import (
    EmptyInput,
    FormatError,
    InvalidConfig,
    IoError,
    NonMonotonicTime,
    RecordTooShort,
    TooFewWindows,
)

WINDOW_S = 8
TARGET_FS = 256
WINDOW_LEN = WINDOW_S * TARGET_FS
KAISER_BETA = 8.0


class Modality(str, enum.Enum):
    CAPNOMETRY = "capnometry"
    IMPEDANCE_PNEUMOGRAPHY = "impedance_pneumography"
    ORAL_NASAL_PRESSURE = "oral_nasal_pressure"
    SYNTHETIC = "synthetic"


@dataclass
class SignalRecord:
    record_id: str
    ppg: np.ndarray
    fs_ppg: float
    resp: np.ndarray
    fs_resp: float
    modality: Modality = Modality.SYNTHETIC

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.resp = np.asarray(self.resp, dtype=np.float64)
        self.modality = Modality(self.modality)
        if self.fs_ppg <= 0 or self.fs_resp <= 0:
            raise FormatError("sampling rates must be positive")
        if self.ppg.ndim != 1 or self.resp.ndim != 1 or not self.ppg.size or not self.resp.size:
            raise FormatError("ppg and resp must be non-empty 1D arrays")
        if np.isnan(self.ppg).any() or np.isnan(self.resp).any():
            raise FormatError(f"record {self.record_id!r} contains NaN samples")
        tol = max(1.0 / self.fs_ppg, 1.0 / self.fs_resp)
        if abs(self.ppg_duration - self.resp_duration) > tol + 1e-9:
            raise FormatError(
                f"record {self.record_id!r}: ppg lasts {self.ppg_duration:.3f} s, "
                f"resp {self.resp_duration:.3f} s"
            )

    @property
    def ppg_duration(self) -> float:
        return self.ppg.size / self.fs_ppg

    @property
    def resp_duration(self) -> float:
        return self.resp.size / self.fs_resp

    @property
    def duration(self) -> float:
        return min(self.ppg_duration, self.resp_duration)


# ---------------------------------------------------------------------------
# record CSV + manifest

CSV_HEADER = ["t_s", "ppg", "resp"]
MANIFEST_NAME = "manifest.json"


def _infer_fs(times: np.ndarray) -> float:
    if times.size < 2:
        raise FormatError("cannot infer a sampling rate from fewer than 2 samples")
    return (times.size - 1) / (times[-1] - times[0])


def load_record(
    path,
    fs_ppg: Optional[float] = None,
    fs_resp: Optional[float] = None,
    record_id: Optional[str] = None,
    modality: Modality | str = Modality.SYNTHETIC,
) -> SignalRecord:
    """Parse a ``t_s,ppg,resp`` CSV. Blank cells mark off-grid samples of the slower channel.

    Sampling rates not given explicitly are inferred from the timestamps of
    the non-blank cells of each channel.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not rows or [h.strip() for h in rows[0]] != CSV_HEADER:
        raise FormatError(f"{path}: header must be {','.join(CSV_HEADER)}")
    t, ppg, t_ppg, resp, t_resp = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        try:
            ti = float(row[0])
            if row[1].strip():
                ppg.append(float(row[1]))
                t_ppg.append(ti)
            if row[2].strip():
                resp.append(float(row[2]))
                t_resp.append(ti)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        t.append(ti)
    if not t:
        raise FormatError(f"{path}: no samples")
    if np.any(np.diff(t) <= 0):
        raise NonMonotonicTime(f"{path}: timestamps are not strictly increasing")
    if not ppg or not resp:
        raise FormatError(f"{path}: both ppg and resp need at least one sample")
    fs_ppg = fs_ppg or _infer_fs(np.asarray(t_ppg))
    fs_resp = fs_resp or _infer_fs(np.asarray(t_resp))
    return SignalRecord(record_id or path.stem, np.asarray(ppg), fs_ppg, np.asarray(resp), fs_resp, Modality(modality))


def write_record(record: SignalRecord, path) -> None:
    """Write ``record`` as CSV on the faster channel's time grid.

    The slower channel's rate must divide the faster one's.
    """
    fast_is_ppg = record.fs_ppg >= record.fs_resp
    fs_fast = record.fs_ppg if fast_is_ppg else record.fs_resp
    fs_slow = record.fs_resp if fast_is_ppg else record.fs_ppg
    ratio = fs_fast / fs_slow
    step = int(round(ratio))
    if abs(ratio - step) > 1e-9:
        raise FormatError("slower channel's sampling rate must divide the faster one's")
    fast = record.ppg if fast_is_ppg else record.resp
    slow = record.resp if fast_is_ppg else record.ppg
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for i, v in enumerate(fast):
                s = ""
                if i % step == 0 and i // step < slow.size:
                    s = repr(float(slow[i // step]))
                cells = (repr(float(v)), s) if fast_is_ppg else (s, repr(float(v)))
                w.writerow([repr(i / fs_fast), *cells])
    except OSError as exc:
        raise IoError(str(exc)) from exc


def write_manifest(directory, records: Sequence[SignalRecord], files: Sequence[str]) -> Path:
    entries = [
        {
            "record_id": r.record_id,
            "file": f,
            "fs_ppg": r.fs_ppg,
            "fs_resp": r.fs_resp,
            "modality": r.modality.value,
        }
        for r, f in zip(records, files)
    ]
    path = Path(directory) / MANIFEST_NAME
    try:
        path.write_text(json.dumps({"records": entries}, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def load_manifest(directory) -> list[SignalRecord]:
    """Load every record listed in ``<directory>/manifest.json``."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"missing manifest {path}")
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))["records"]
        return [
            load_record(
                directory / e["file"],
                fs_ppg=float(e["fs_ppg"]),
                fs_resp=float(e["fs_resp"]),
                record_id=str(e["record_id"]),
                modality=e.get("modality", Modality.SYNTHETIC.value),
            )
            for e in entries
        ]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# resampling and windowing


def _polyphase_filter(up: int, down: int, half_len: int) -> np.ndarray:
    taps = signal.firwin(2 * half_len + 1, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))
    return taps


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Band-limited rational resampling with a Kaiser windowed-sinc polyphase filter.

    Output length is ``round(len(x) * fs_out / fs_in)``. Each polyphase branch
    is normalised to unit DC gain and the signal is edge-extended, so
    constants pass through exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise EmptyInput("resample needs at least 2 samples")
    if fs_in <= 0 or fs_out <= 0:
        raise InvalidConfig("sampling rates must be positive")
    n_out = int(round(x.size * fs_out / fs_in))
    ratio = Fraction(fs_out / fs_in).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    if up == down:
        return x.copy()
    half_len = 10 * max(up, down)
    h = _polyphase_filter(up, down, half_len)
    n_pad = half_len // up + 2
    # shift so the filter centre of output 0 lands on an upfirdn output sample
    centre = n_pad * up + half_len
    shift = (-centre) % down
    h = np.concatenate([np.zeros(shift), h])
    for phase in range(up):
        h[phase::up] /= h[phase::up].sum()
    first = (centre + shift) // down
    tail = n_pad + int(math.ceil(n_out * down / up)) - x.size + 2
    xp = np.pad(x, (n_pad, max(n_pad, tail)), mode="edge")
    y = signal.upfirdn(h, xp, up, down)
    return y[first : first + n_out]


def make_windows(record: SignalRecord, window_s: float = WINDOW_S, fs: float = TARGET_FS) -> list[tuple[np.ndarray, np.ndarray]]:
    """Resample both channels to ``fs`` and cut non-overlapping windows; the remainder is dropped."""
    win = int(round(window_s * fs))
    if record.duration + 1e-9 < window_s:
        raise RecordTooShort(f"record {record.record_id!r} lasts {record.duration:.3f} s < {window_s} s")
    ppg = resample(record.ppg, record.fs_ppg, fs) if record.fs_ppg != fs else record.ppg.copy()
    resp = resample(record.resp, record.fs_resp, fs) if record.fs_resp != fs else record.resp.copy()
    n = min(ppg.size, resp.size) // win
    if n == 0:
        raise RecordTooShort(f"record {record.record_id!r} yields no full window")
    return [(ppg[i * win : (i + 1) * win], resp[i * win : (i + 1) * win]) for i in range(n)]


# ---------------------------------------------------------------------------
# windowed dataset


@dataclass
class WindowedDataset:
    """Aligned PPG/respiration windows with a train/test assignment.

    Sample values are held as float32, matching the on-disk format.
    """

    x: np.ndarray
    y: np.ndarray
    record_ids: list
    is_train: np.ndarray
    fs: int = TARGET_FS
    seed: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        self.is_train = np.asarray(self.is_train, dtype=bool)
        self.record_ids = [str(r) for r in self.record_ids]
        n = len(self.record_ids)
        if self.x.shape != self.y.shape or self.x.ndim != 2 or self.x.shape[0] != n or self.is_train.shape != (n,):
            raise FormatError("inconsistent windowed dataset arrays")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def window_len(self) -> int:
        return self.x.shape[1]

    @property
    def n_train(self) -> int:
        return int(self.is_train.sum())

    @property
    def n_test(self) -> int:
        return len(self) - self.n_train

    def subset(self, train: bool) -> tuple[np.ndarray, np.ndarray]:
        mask = self.is_train if train else ~self.is_train
        return self.x[mask], self.y[mask]

    def summary(self) -> str:
        return f"{len(self)} windows, {self.n_train} train, {self.n_test} test"

    def __eq__(self, other) -> bool:
        if not isinstance(other, WindowedDataset):
            return NotImplemented
        return (
            self.fs == other.fs
            and self.seed == other.seed
            and self.record_ids == other.record_ids
            and np.array_equal(self.is_train, other.is_train)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


def n_train_windows(n: int, train_frac: float) -> int:
    return math.floor(Fraction(str(train_frac)) * n)


def split_train_test(
    windows: Sequence[tuple],
    record_ids: Sequence[str],
    train_frac: float = 0.8,
    seed: int = 0,
    by_subject: bool = False,
    fs: int = TARGET_FS,
) -> WindowedDataset:
    """Seeded shuffle, first ``floor(train_frac * n)`` windows to train.

    With ``by_subject`` whole records are assigned to one side, filling the
    train side in shuffled record order until it holds at least the
    window-level quota.
    """
    n = len(windows)
    if n < 2:
        raise TooFewWindows(f"need at least 2 windows to split, got {n}")
    if len(record_ids) != n:
        raise FormatError("one record id per window required")
    rng = np.random.default_rng(seed)
    quota = n_train_windows(n, train_frac)
    is_train = np.zeros(n, dtype=bool)
    if by_subject:
        ids = list(dict.fromkeys(record_ids))
        order = rng.permutation(len(ids))
        ids_arr = np.asarray(record_ids)
        for i in order:
            if is_train.sum() >= quota:
                break
            is_train |= ids_arr == ids[i]
    else:
        is_train[rng.permutation(n)[:quota]] = True
    x = np.stack([w[0] for w in windows])
    y = np.stack([w[1] for w in windows])
    return WindowedDataset(x, y, list(record_ids), is_train, fs=fs, seed=seed)


def build_dataset(
    records: Sequence[SignalRecord],
    train_frac: float = 0.8,
    seed: int = 0,
    by_subject: bool = False,
    window_s: float = WINDOW_S,
    fs: int = TARGET_FS,
) -> WindowedDataset:
    windows, ids = [], []
    for rec in records:
        w = make_windows(rec, window_s, fs)
        windows.extend(w)
        ids.extend([rec.record_id] * len(w))
    return split_train_test(windows, ids, train_frac, seed, by_subject, fs)


RSPW_MAGIC = b"RSPW"
RSPW_VERSION = 1


def write_windowed(ds: WindowedDataset, path) -> None:
    """Binary layout (little-endian): magic, u16 version, u32 n_windows, u32
    window_len, u16 fs, u64 split seed, then per window a u16-length-prefixed
    UTF-8 record id, u8 split flag (1 = train) and float32 x then y values.
    """
    if len(ds) == 0:
        raise FormatError("refusing to write an empty dataset")
    chunks = [
        RSPW_MAGIC,
        struct.pack("<HIIHQ", RSPW_VERSION, len(ds), ds.window_len, int(ds.fs), int(ds.seed)),
    ]
    for i in range(len(ds)):
        rid = ds.record_ids[i].encode("utf-8")
        chunks.append(struct.pack("<H", len(rid)) + rid + struct.pack("<B", int(ds.is_train[i])))
        chunks.append(ds.x[i].astype("<f4").tobytes())
        chunks.append(ds.y[i].astype("<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_windowed(path) -> WindowedDataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    head = struct.calcsize("<HIIHQ")
    if blob[:4] != RSPW_MAGIC:
        raise FormatError("bad windowed-dataset magic")
    if len(blob) < 4 + head:
        raise FormatError("windowed dataset truncated")
    version, n, win, fs, seed = struct.unpack("<HIIHQ", blob[4 : 4 + head])
    if version != RSPW_VERSION:
        raise FormatError(f"unsupported windowed-dataset version {version}")
    if n == 0 or win == 0:
        raise FormatError("windowed dataset is empty")
    pos = 4 + head
    x = np.empty((n, win), dtype=np.float32)
    y = np.empty((n, win), dtype=np.float32)
    ids, flags = [], np.empty(n, dtype=bool)
    nbytes = 4 * win
    try:
        for i in range(n):
            (rlen,) = struct.unpack("<H", blob[pos : pos + 2])
            pos += 2
            ids.append(blob[pos : pos + rlen].decode("utf-8"))
            pos += rlen
            flag = blob[pos]
            if flag not in (0, 1):
                raise FormatError(f"bad split flag {flag}")
            flags[i] = bool(flag)
            pos += 1
            if pos + 2 * nbytes > len(blob):
                raise FormatError("windowed dataset truncated")
            x[i] = np.frombuffer(blob, dtype="<f4", count=win, offset=pos)
            y[i] = np.frombuffer(blob, dtype="<f4", count=win, offset=pos + nbytes)
            pos += 2 * nbytes
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"windowed dataset corrupt: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes in windowed dataset")
    return WindowedDataset(x, y, ids, flags, fs=fs, seed=seed)


# ---------------------------------------------------------------------------
# normalisation


def minmax_normalize(x) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1]. Returns ``(scaled, degenerate)``; a constant input maps to 0.5."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("cannot normalise an empty signal")
    lo, hi = x.min(), x.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full_like(x, 0.5), True
    return (x - lo) / (hi - lo), False


def zscore(x, eps: float = 1e-12) -> np.ndarray:
    """Zero-mean, unit-variance scaling along the last axis (constant rows become zero)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.maximum(sd, eps)


# ---------------------------------------------------------------------------
# synthetic records


@dataclass(frozen=True)
class SynthConfig:
    duration: float = 480.0
    fs: float = 100.0
    heart_rate: float = 70.0
    resp_rate: float = 15.0
    am_depth: float = 0.0
    fm_depth: float = 0.0
    bw_depth: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.duration <= 0 or self.fs <= 0:
            raise InvalidConfig("duration and fs must be positive")
        if self.heart_rate <= 0 or self.resp_rate <= 0:
            raise InvalidConfig("heart_rate and resp_rate must be positive")
        if not self.resp_rate / 60.0 < self.heart_rate / 120.0:
            raise InvalidConfig("respiration must be slower than half the pulse rate")
        for name in ("am_depth", "fm_depth", "bw_depth"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1), got {v}")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be non-negative")


# pulse template: systolic and diastolic gaussians (cycle position, width, height)
_PULSE_COMPONENTS = ((0.25, 0.07, 1.0), (0.55, 0.10, 0.4))


def pulse_template(phase: np.ndarray) -> np.ndarray:
    """Asymmetric double-gaussian pulse as a 1-periodic function of beat phase."""
    u = np.mod(phase, 1.0)
    out = np.zeros_like(u)
    for centre, width, height in _PULSE_COMPONENTS:
        for wrap in (-1.0, 0.0, 1.0):
            out += height * np.exp(-0.5 * ((u - centre + wrap) / width) ** 2)
    return out


def synth_record(cfg: SynthConfig, record_id: str = "synth") -> SignalRecord:
    """PPG with respiratory amplitude, frequency and baseline modulation plus noise.

    The beat phase is the closed-form integral of the modulated instantaneous
    heart rate; the reference channel is the clean respiratory sinusoid.
    """
    cfg.validate()
    n = int(round(cfg.duration * cfg.fs))
    if n < 2:
        raise InvalidConfig("record would have fewer than 2 samples")
    t = np.arange(n) / cfg.fs
    f_r = cfg.resp_rate / 60.0
    f_h = cfg.heart_rate / 60.0
    r = np.sin(2 * np.pi * f_r * t)
    phase = f_h * (t + cfg.fm_depth * (1.0 - np.cos(2 * np.pi * f_r * t)) / (2 * np.pi * f_r))
    ppg = (1.0 + cfg.am_depth * r) * pulse_template(phase) + cfg.bw_depth * r
    if cfg.noise_std > 0:
        ppg = ppg + np.random.default_rng(cfg.seed).normal(0.0, cfg.noise_std, size=n)
    return SignalRecord(record_id, ppg, cfg.fs, r, cfg.fs, Modality.SYNTHETIC)


def synth_cohort(
    n: int,
    duration: float,
    fs: float = 100.0,
    seed: int = 0,
    resp_range: tuple = (6.0, 30.0),
    hr_range: tuple = (65.0, 100.0),
    am_range: tuple = (0.1, 0.4),
    fm_range: tuple = (0.03, 0.1),
    bw_range: tuple = (0.05, 0.2),
    noise_std: float = 0.02,
) -> list[SignalRecord]:
    """``n`` synthetic records with per-record rates and depths drawn uniformly from the ranges.

    A range with equal ends pins that parameter.
    """
    if n < 1:
        raise InvalidConfig("need at least one record")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        cfg = SynthConfig(
            duration=duration,
            fs=fs,
            heart_rate=float(rng.uniform(*hr_range)),
            resp_rate=float(rng.uniform(*resp_range)),
            am_depth=float(rng.uniform(*am_range)),
            fm_depth=float(rng.uniform(*fm_range)),
            bw_depth=float(rng.uniform(*bw_range)),
            noise_std=noise_std,
            seed=int(rng.integers(2**31)),
        )
        records.append(synth_record(cfg, record_id=f"synth_{i:04d}"))
    return records
