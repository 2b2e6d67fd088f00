"""Waveform similarity metrics and tabular evaluation reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from respnet.errors import DegenerateSignal, EmptyEvaluation, InvalidConfig, LengthMismatch
from respnet.signalio import minmax_normalize, resample

EVAL_FS = 60
MAX_LAG_S = 2.0
REPORT_COLUMNS = ["method", "dataset", "mean_mse", "mean_xcorr", "mean_abs_lag_s", "n_windows"]
METHODS = ("WAM", "WFM", "RespNet")


@dataclass(frozen=True)
class WindowMetrics:
    mse: float
    xcorr: float
    lag_s: float


@dataclass(frozen=True)
class EvalReport:
    method: str
    dataset_id: str
    mean_mse: float
    mean_xcorr: float
    mean_abs_lag_s: float
    n_windows: int
    n_excluded: int = 0

    def row(self) -> list:
        return [
            self.method,
            self.dataset_id,
            f"{self.mean_mse:.6f}",
            f"{self.mean_xcorr:.6f}",
            f"{self.mean_abs_lag_s:.6f}",
            str(self.n_windows),
        ]


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def xcorr_with_lag(a, b, fs: float, max_lag_s: float = MAX_LAG_S) -> tuple[float, float]:
    """Peak Pearson correlation of ``a[t]`` with ``b[t + lag]`` over bounded integer lags.

    A positive lag means ``b`` is delayed relative to ``a``. Ties go to the
    smallest ``|lag|``, then to the negative lag.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"lengths differ: {a.shape} vs {b.shape}")
    n = a.size
    max_lag = int(round(max_lag_s * fs))
    if not max_lag < n / 2:
        raise InvalidConfig(f"max lag {max_lag} samples must be below half the length {n}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateSignal("cross-correlation of a constant signal is undefined")
    best = (-np.inf, 0)
    # candidates ordered so that the first maximum wins the tie-break rule
    lags = sorted(range(-max_lag, max_lag + 1), key=lambda k: (abs(k), k))
    for k in lags:
        if k >= 0:
            sa, sb = a[: n - k], b[k:]
        else:
            sa, sb = a[-k:], b[: n + k]
        sa = sa - sa.mean()
        sb = sb - sb.mean()
        den = np.sqrt(np.dot(sa, sa) * np.dot(sb, sb))
        if den == 0:
            continue
        c = float(np.dot(sa, sb) / den)
        if c > best[0]:
            best = (c, k)
    if not np.isfinite(best[0]):
        raise DegenerateSignal("no lag with non-constant overlap")
    return best[0], best[1] / fs


def downsample_for_eval(pred, fs_in: float = 256, fs_out: float = EVAL_FS) -> np.ndarray:
    if not fs_in > fs_out:
        raise InvalidConfig(f"fs_in {fs_in} must exceed fs_out {fs_out}")
    return resample(pred, fs_in, fs_out)


def window_metrics(pred, ref, fs: float, max_lag_s: float = MAX_LAG_S) -> WindowMetrics:
    """Min-max normalise both signals, then MSE and peak cross-correlation."""
    p, p_deg = minmax_normalize(pred)
    r, r_deg = minmax_normalize(ref)
    if p_deg or r_deg:
        raise DegenerateSignal("constant window")
    c, lag = xcorr_with_lag(p, r, fs, max_lag_s)
    return WindowMetrics(mse(p, r), c, lag)


def evaluate_method(
    preds: Sequence,
    refs: Sequence,
    fs: float = EVAL_FS,
    method: str = "RespNet",
    dataset_id: str = "",
    max_lag_s: float = MAX_LAG_S,
) -> EvalReport:
    """Average per-window metrics; degenerate windows are skipped and counted."""
    if len(preds) != len(refs):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(refs)} references")
    rows = []
    excluded = 0
    for p, r in zip(preds, refs):
        try:
            rows.append(window_metrics(p, r, fs, max_lag_s))
        except DegenerateSignal:
            excluded += 1
    if not rows:
        raise EmptyEvaluation("no valid windows to evaluate")
    return EvalReport(
        method=method,
        dataset_id=dataset_id,
        mean_mse=float(np.mean([m.mse for m in rows])),
        mean_xcorr=float(np.mean([m.xcorr for m in rows])),
        mean_abs_lag_s=float(np.mean([abs(m.lag_s) for m in rows])),
        n_windows=len(rows),
        n_excluded=excluded,
    )


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def read_reports_csv(text: str) -> list[EvalReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise ValueError("not an evaluation report CSV")
    return [
        EvalReport(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), int(r[5]))
        for r in rows[1:]
        if r
    ]


def format_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text table: one row per (dataset, method) with MSE, cross-correlation and lag."""
    header = ["Dataset", "Method", "MSE", "Cross-Correlation", "Lag", "N"]
    body = [
        [r.dataset_id, r.method, f"{r.mean_mse:.3f}", f"{r.mean_xcorr:.3f}", f"{r.mean_abs_lag_s:.3f}", str(r.n_windows)]
        for r in reports
    ]
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line, "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |", line]
    for row in body:
        out.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
    out.append(line)
    return "\n".join(out)
