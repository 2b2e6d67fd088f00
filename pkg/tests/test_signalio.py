import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respnet.errors import (
    EmptyInput,
    FormatError,
    IoError,
    NonMonotonicTime,
    RecordTooShort,
    TooFewWindows,
)
from respnet.signalio import (
    SignalRecord,
    SynthConfig,
    WindowedDataset,
    build_dataset,
    load_manifest,
    load_record,
    make_windows,
    minmax_normalize,
    n_train_windows,
    read_windowed,
    resample,
    split_train_test,
    synth_cohort,
    synth_record,
    write_manifest,
    write_record,
    write_windowed,
    zscore,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# CSV records


def test_load_record_with_blank_slow_channel(tmp_path):
    rows = ["t_s,ppg,resp"]
    for i in range(8):
        resp = f"{i // 2}" if i % 2 == 0 else ""
        rows.append(f"{i / 4},{i},{resp}")
    rec = load_record(_write(tmp_path / "r1.csv", "\n".join(rows) + "\n"))
    assert rec.record_id == "r1"
    assert rec.fs_ppg == pytest.approx(4.0) and rec.fs_resp == pytest.approx(2.0)
    assert np.array_equal(rec.ppg, np.arange(8.0))
    assert np.array_equal(rec.resp, [0.0, 1.0, 2.0, 3.0])


def test_load_record_errors(tmp_path):
    with pytest.raises(FormatError):
        load_record(_write(tmp_path / "a.csv", "time,ppg,resp\n0,1,2\n1,1,2\n"))
    with pytest.raises(NonMonotonicTime):
        load_record(_write(tmp_path / "b.csv", "t_s,ppg,resp\n0,1,2\n0.5,1,2\n0.5,1,2\n"))
    with pytest.raises(FormatError):
        load_record(_write(tmp_path / "c.csv", "t_s,ppg,resp\n0,x,2\n1,1,2\n"))
    with pytest.raises(FormatError):
        load_record(_write(tmp_path / "d.csv", "t_s,ppg,resp\n0,1\n"))
    with pytest.raises(IoError):
        load_record(tmp_path / "missing.csv")


def test_record_rejects_mismatched_durations():
    with pytest.raises(FormatError):
        SignalRecord("r", np.zeros(100), 10.0, np.zeros(50), 10.0)


def test_write_and_load_round_trip(tmp_path):
    rec = SignalRecord("r", np.sin(np.arange(300) / 7.0), 30.0, np.cos(np.arange(100) / 5.0), 10.0)
    write_record(rec, tmp_path / "r.csv")
    write_manifest(tmp_path, [rec], ["r.csv"])
    (back,) = load_manifest(tmp_path)
    assert back.fs_ppg == 30.0 and back.fs_resp == 10.0
    assert np.array_equal(back.ppg, rec.ppg) and np.array_equal(back.resp, rec.resp)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_manifest(tmp_path)


# ---------------------------------------------------------------------------
# resampling


def test_resample_lengths():
    assert resample(np.zeros(800), 100, 256).size == 2048
    assert resample(np.zeros(2048), 256, 60).size == 480
    assert resample(np.zeros(1000), 125, 256).size == 2048


def test_resample_preserves_constants_exactly():
    y = resample(np.full(500, 3.25), 100, 256)
    assert np.max(np.abs(y - 3.25)) < 1e-12


def test_resample_matches_analytic_sine():
    fs_in, fs_out = 100, 256
    t_in = np.arange(1000) / fs_in
    y = resample(np.sin(2 * np.pi * 1.0 * t_in), fs_in, fs_out)
    t_out = np.arange(y.size) / fs_out
    inner = slice(fs_out, -fs_out)
    assert np.max(np.abs(y[inner] - np.sin(2 * np.pi * 1.0 * t_out[inner]))) < 1e-3


def test_resample_downsample_sine():
    t_in = np.arange(2048) / 256
    y = resample(np.sin(2 * np.pi * 0.5 * t_in), 256, 60)
    t_out = np.arange(y.size) / 60
    assert np.max(np.abs(y[60:-60] - np.sin(2 * np.pi * 0.5 * t_out[60:-60]))) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_resample_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, z = rng.standard_normal(300), rng.standard_normal(300)
    lhs = resample(a * x + b * z, 100, 256)
    rhs = a * resample(x, 100, 256) + b * resample(z, 100, 256)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_resample_rejects_tiny_input():
    with pytest.raises(EmptyInput):
        resample(np.zeros(1), 100, 256)


# ---------------------------------------------------------------------------
# windows and splits


def test_eight_minute_record_gives_sixty_windows():
    rec = synth_record(SynthConfig(duration=480, fs=100))
    windows = make_windows(rec)
    assert len(windows) == 60
    assert all(x.shape == (2048,) and y.shape == (2048,) for x, y in windows)


def test_short_record_rejected():
    with pytest.raises(RecordTooShort):
        make_windows(synth_record(SynthConfig(duration=7.9, fs=100)))


@pytest.mark.parametrize("n,expected", [(2520, 2016), (10443, 8354), (5, 4), (2, 1)])
def test_train_count_floor(n, expected):
    assert n_train_windows(n, 0.8) == expected


def test_split_counts_and_determinism():
    windows = [(np.full(4, i, float), np.full(4, -i, float)) for i in range(2520)]
    ids = [f"r{i // 60}" for i in range(2520)]
    a = split_train_test(windows, ids, seed=3)
    b = split_train_test(windows, ids, seed=3)
    assert (a.n_train, a.n_test) == (2016, 504)
    assert a == b
    assert a != split_train_test(windows, ids, seed=4)
    assert a.summary() == "2520 windows, 2016 train, 504 test"


def test_split_by_subject_keeps_records_together():
    windows = [(np.zeros(4), np.zeros(4))] * 100
    ids = [f"r{i // 10}" for i in range(100)]
    ds = split_train_test(windows, ids, seed=1, by_subject=True)
    for rid in set(ids):
        flags = {bool(f) for r, f in zip(ds.record_ids, ds.is_train) if r == rid}
        assert len(flags) == 1
    assert ds.n_train == 80


def test_split_needs_two_windows():
    with pytest.raises(TooFewWindows):
        split_train_test([(np.zeros(4), np.zeros(4))], ["r"])


# ---------------------------------------------------------------------------
# binary dataset


def _small_ds():
    records = [synth_record(SynthConfig(duration=24, fs=64, am_depth=0.2, seed=i), f"rec{i}") for i in range(2)]
    return build_dataset(records, seed=7)


def test_windowed_round_trip(tmp_path):
    ds = _small_ds()
    assert len(ds) == 6
    write_windowed(ds, tmp_path / "w.rspw")
    assert read_windowed(tmp_path / "w.rspw") == ds


def test_windowed_rejects_corruption(tmp_path):
    ds = _small_ds()
    path = tmp_path / "w.rspw"
    write_windowed(ds, path)
    blob = path.read_bytes()
    for bad in (blob[:-1], b"NOPE" + blob[4:], blob + b"x"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            read_windowed(path)


def test_empty_dataset_not_written(tmp_path):
    empty = WindowedDataset(np.zeros((0, 4)), np.zeros((0, 4)), [], np.zeros(0, bool))
    with pytest.raises(FormatError):
        write_windowed(empty, tmp_path / "e.rspw")


# ---------------------------------------------------------------------------
# normalisation


def test_minmax_normalize():
    y, degenerate = minmax_normalize([2.0, 4.0, 3.0])
    assert np.array_equal(y, [0.0, 1.0, 0.5]) and not degenerate
    y, degenerate = minmax_normalize([5.0, 5.0])
    assert np.array_equal(y, [0.5, 0.5]) and degenerate


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100), st.floats(-100, 100))
def test_minmax_is_affine_invariant(seed, scale, offset):
    x = np.random.default_rng(seed).standard_normal(50)
    np.testing.assert_allclose(minmax_normalize(scale * x + offset)[0], minmax_normalize(x)[0], atol=1e-9)


def test_zscore_rows():
    z = zscore(np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]))
    np.testing.assert_allclose(z[0], [-np.sqrt(1.5), 0, np.sqrt(1.5)])
    assert np.array_equal(z[1], np.zeros(3))


# ---------------------------------------------------------------------------
# synthetic records


def test_synth_reference_has_expected_breaths():
    rec = synth_record(SynthConfig(duration=60, fs=100, resp_rate=15, am_depth=0.2))
    rising = np.flatnonzero((rec.resp[:-1] < 0) & (rec.resp[1:] >= 0))
    assert len(rising) in (14, 15)


def test_synth_beat_count_tracks_heart_rate():
    rec = synth_record(SynthConfig(duration=60, fs=100, heart_rate=72))
    p = rec.ppg
    peaks = np.flatnonzero((p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:]) & (p[1:-1] > 0.8))
    assert abs(len(peaks) - 72) <= 1


def test_synth_is_seeded():
    cfg = SynthConfig(duration=10, noise_std=0.1, seed=5)
    assert np.array_equal(synth_record(cfg).ppg, synth_record(cfg).ppg)
    a = synth_cohort(3, 10, seed=1)
    b = synth_cohort(3, 10, seed=1)
    assert all(np.array_equal(x.ppg, y.ppg) for x, y in zip(a, b))


def test_synth_rejects_bad_config():
    with pytest.raises(ValueError):
        synth_record(SynthConfig(am_depth=1.5))
    with pytest.raises(ValueError):
        synth_record(SynthConfig(heart_rate=40, resp_rate=30))
