import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respnet.errors import DegenerateSignal, EmptyEvaluation, InvalidConfig, LengthMismatch
from respnet.metrics import (
    EvalReport,
    evaluate_method,
    format_table,
    mse,
    read_reports_csv,
    reports_to_csv,
    window_metrics,
    xcorr_with_lag,
)

FS = 60


def _sine(n=480, f=0.25, shift_s=0.0):
    t = np.arange(n) / FS
    return np.sin(2 * np.pi * f * (t - shift_s))


def _brute_xcorr(a, b, max_lag):
    """Pearson of a[t] with b[t + k] by explicit index lists."""
    n = len(a)
    best = None
    for k in range(-max_lag, max_lag + 1):
        pairs = [(a[t], b[t + k]) for t in range(n) if 0 <= t + k < n]
        c = np.corrcoef(*zip(*pairs))[0, 1]
        key = (c, -abs(k), -k)
        if best is None or key > best[0]:
            best = (key, k)
    return best[0][0], best[1]


def test_mse_values():
    assert mse([0, 0], [1, 3]) == 5.0
    with pytest.raises(LengthMismatch):
        mse([1, 2], [1])


def test_identical_signals():
    x = _sine()
    c, lag = xcorr_with_lag(x, x, FS)
    assert c == pytest.approx(1.0) and lag == 0.0


def test_delayed_reference_gives_positive_lag():
    a = _sine(f=0.2)
    b = _sine(f=0.2, shift_s=0.25)
    c, lag = xcorr_with_lag(a, b, FS)
    assert lag == pytest.approx(0.25)
    assert c > 0.999


def test_lag_is_antisymmetric():
    a, b = _sine(f=0.2), _sine(f=0.2, shift_s=0.5)
    assert xcorr_with_lag(a, b, FS)[1] == -xcorr_with_lag(b, a, FS)[1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_xcorr_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(40)
    b = np.roll(a, int(rng.integers(-3, 4))) + 0.5 * rng.standard_normal(40)
    c, lag = xcorr_with_lag(a, b, fs=10, max_lag_s=0.5)
    c_ref, k_ref = _brute_xcorr(a, b, 5)
    assert c == pytest.approx(c_ref, abs=1e-12)
    assert lag == k_ref / 10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_xcorr_is_affine_invariant(seed, scale, offset):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(100), rng.standard_normal(100)
    c1, l1 = xcorr_with_lag(a, b, FS, 0.5)
    c2, l2 = xcorr_with_lag(scale * a + offset, b, FS, 0.5)
    assert c1 == pytest.approx(c2, abs=1e-9) and l1 == l2


def test_tie_prefers_zero_lag():
    # period-2 signal correlates perfectly at every even lag
    a = np.tile([0.0, 1.0], 50)
    assert xcorr_with_lag(a, a, fs=10, max_lag_s=0.4) == (pytest.approx(1.0), 0.0)


def test_xcorr_errors():
    with pytest.raises(DegenerateSignal):
        xcorr_with_lag(np.ones(480), _sine(480), FS)
    with pytest.raises(InvalidConfig):
        xcorr_with_lag(_sine(100), _sine(100), FS, max_lag_s=2.0)


def test_window_metrics_normalise_first():
    x = _sine()
    m = window_metrics(3 * x + 10, x, FS)
    assert m.mse == pytest.approx(0.0, abs=1e-20) and m.xcorr == pytest.approx(1.0)


def test_evaluate_method_excludes_constant_windows():
    preds = [_sine(), np.zeros(480), -_sine()]
    refs = [_sine()] * 3
    rep = evaluate_method(preds, refs, FS, "WAM", "demo")
    assert rep.n_windows == 2 and rep.n_excluded == 1
    with pytest.raises(EmptyEvaluation):
        evaluate_method([np.zeros(480)], [_sine()], FS)


def test_report_csv_round_trip_and_table():
    reps = [EvalReport("WAM", "synth", 0.1, 0.9, 0.05, 10), EvalReport("RespNet", "synth", 0.02, 0.97, 0.01, 10)]
    back = read_reports_csv(reports_to_csv(reps))
    assert [r.method for r in back] == ["WAM", "RespNet"]
    assert back[1].mean_xcorr == pytest.approx(0.97)
    table = format_table(reps)
    assert "Cross-Correlation" in table and "RespNet" in table
