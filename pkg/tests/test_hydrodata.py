import numpy as np
import pandas as pd
import pytest

from conftest import hourly
from flooddan.config import SeriesSchema, WindowConfig
from flooddan.errors import ConfigurationError, DataError, IntegrityError, SchemaError, SizeError
from flooddan.hydrodata import (
    HydroSeries,
    Normalizer,
    fit_normalizer,
    load_series,
    make_windows,
    save_series,
    split_chronological,
)


def _series(L: int, d: int = 1, name: str = "w") -> HydroSeries:
    rng = np.random.default_rng(L)
    return HydroSeries(name=name, rainfall=rng.uniform(0, 5, size=(L, d)),
                       runoff=np.arange(L, dtype=float), timestamps=hourly(L))


def _write(tmp_path, rows, columns=("timestamp", "rain_01", "rain_02", "runoff")):
    path = tmp_path / "w.csv"
    pd.DataFrame(rows, columns=list(columns)).to_csv(path, index=False)
    return path


# ── load_series ────────────────────────────────────────────────────────────
def test_load_well_formed_file(tmp_path):
    path = _write(tmp_path, [
        ("2020-01-01T00:00:00", 0.0, 1.0, 10.0),
        ("2020-01-01T01:00:00", 0.5, 0.0, 11.0),
        ("2020-01-01T02:00:00", 0.0, 0.0, 12.0),
    ])
    series = load_series(path)
    assert len(series) == 3
    assert series.station_count == 2
    np.testing.assert_array_equal(series.runoff, [10.0, 11.0, 12.0])


def test_load_sorts_rows_by_timestamp(tmp_path):
    path = _write(tmp_path, [
        ("2020-01-01T02:00:00", 0.0, 0.0, 12.0),
        ("2020-01-01T00:00:00", 0.0, 1.0, 10.0),
        ("2020-01-01T01:00:00", 0.5, 0.0, 11.0),
    ])
    series = load_series(path)
    np.testing.assert_array_equal(series.runoff, [10.0, 11.0, 12.0])
    assert series.timestamps.is_monotonic_increasing


def test_gap_is_integrity_error_at_offending_instant(tmp_path):
    path = _write(tmp_path, [
        ("2020-01-01T01:00:00", 0.0, 0.0, 1.0),
        ("2020-01-01T03:00:00", 0.0, 0.0, 1.0),
    ])
    with pytest.raises(IntegrityError, match="03:00"):
        load_series(path)


def test_duplicate_timestamp_is_integrity_error(tmp_path):
    path = _write(tmp_path, [
        ("2020-01-01T01:00:00", 0.0, 0.0, 1.0),
        ("2020-01-01T01:00:00", 0.0, 0.0, 1.0),
    ])
    with pytest.raises(IntegrityError, match="duplicate"):
        load_series(path)


def test_negative_rainfall_reports_row(tmp_path):
    rows = [(ts.isoformat(), 0.0, 0.0, 1.0) for ts in hourly(8)]
    rows[5] = (rows[5][0], -0.1, 0.0, 1.0)
    with pytest.raises(DataError, match="row 5"):
        load_series(_write(tmp_path, rows))


def test_missing_runoff_column_named(tmp_path):
    path = _write(tmp_path, [("2020-01-01T00:00:00", 0.0, 1.0)],
                  columns=("timestamp", "rain_01", "rain_02"))
    with pytest.raises(SchemaError, match="runoff"):
        load_series(path)


def test_explicit_schema_columns(tmp_path):
    path = _write(tmp_path, [
        ("2020-01-01T00:00:00", 1.0, 2.0, 3.0),
        ("2020-01-01T01:00:00", 1.0, 2.0, 3.0),
    ], columns=("time", "a", "b", "flow"))
    schema = SeriesSchema(timestamp="time", runoff="flow", rainfall=("b",))
    series = load_series(path, schema)
    assert series.station_count == 1
    np.testing.assert_array_equal(series.rainfall[:, 0], [2.0, 2.0])


def test_save_then_load_preserves_values(tmp_path, source_series):
    path = save_series(source_series, tmp_path / "s.csv")
    loaded = load_series(path)
    assert loaded.station_count == source_series.station_count
    np.testing.assert_allclose(loaded.runoff, source_series.runoff, rtol=1e-9)
    assert loaded.timestamps.equals(source_series.timestamps)


# ── split ──────────────────────────────────────────────────────────────────
def test_split_floor_arithmetic():
    train, test = split_chronological(_series(10), 0.7)
    assert (len(train), len(test)) == (7, 3)


def test_split_large_series():
    train, test = split_chronological(_series(43435), 0.7)
    assert (len(train), len(test)) == (30404, 13031)


def test_split_preserves_rows_in_order():
    series = _series(50)
    train, test = split_chronological(series, 0.6)
    np.testing.assert_array_equal(np.concatenate([train.runoff, test.runoff]), series.runoff)


def test_split_short_test_segment_is_size_error():
    with pytest.raises(SizeError, match="test"):
        split_chronological(_series(30), 0.9, WindowConfig(24, 6))


@pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
def test_split_bad_fraction(fraction):
    with pytest.raises(ConfigurationError):
        split_chronological(_series(10), fraction)


# ── normalization ──────────────────────────────────────────────────────────
def test_normalizer_endpoints_and_constant_channel():
    series = HydroSeries(
        name="n",
        rainfall=np.array([[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]),
        runoff=np.array([0.0, 1.0, 10.0]),
        timestamps=hourly(3),
    )
    normalizer = fit_normalizer(series)
    scaled = normalizer.apply(series)
    np.testing.assert_allclose(scaled.rainfall[:, 0], [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(scaled.rainfall[:, 1], [0.0, 0.0, 0.0])
    assert normalizer.invert(0.0, channel=1) == 5.0


def test_no_clipping_above_training_max():
    normalizer = Normalizer(minima=np.array([0.0, 0.0]), maxima=np.array([1.0, 10.0]))
    test = HydroSeries(name="t", rainfall=np.zeros((1, 1)), runoff=np.array([12.0]),
                       timestamps=hourly(1))
    assert normalizer.apply(test).runoff[0] == pytest.approx(1.2)


def test_apply_then_invert_is_identity():
    series = _series(200, d=3)
    normalizer = fit_normalizer(series)
    scaled = normalizer.apply(series)
    np.testing.assert_allclose(normalizer.invert(scaled.runoff), series.runoff, rtol=1e-9)
    for k in range(3):
        np.testing.assert_allclose(normalizer.invert(scaled.rainfall[:, k], channel=k),
                                   series.rainfall[:, k], rtol=1e-9, atol=1e-12)


def test_normalizer_dict_round_trip():
    normalizer = fit_normalizer(_series(20, d=2))
    again = Normalizer.from_dict(normalizer.to_dict())
    np.testing.assert_array_equal(again.minima, normalizer.minima)
    np.testing.assert_array_equal(again.maxima, normalizer.maxima)


def test_apply_rejects_station_mismatch():
    normalizer = fit_normalizer(_series(20, d=2))
    with pytest.raises(ConfigurationError):
        normalizer.apply(_series(20, d=3))


# ── windows ────────────────────────────────────────────────────────────────
def test_window_count_labeled():
    assert len(make_windows(_series(40), WindowConfig(24, 6))) == 11


def test_single_labeled_window_target():
    series = _series(30)
    windows = make_windows(series, WindowConfig(24, 6))
    assert len(windows) == 1
    assert windows[0].y == series.runoff[29]


def test_single_unlabeled_window():
    windows = make_windows(_series(24), WindowConfig(24, 6), labeled=False)
    assert len(windows) == 1
    assert windows.y is None and windows[0].y is None


@pytest.mark.parametrize("T", [4, 8, 24])
@pytest.mark.parametrize("t", [1, 6])
def test_window_contents_match_enumeration(T, t):
    for L in (T + t, T + t + 17, T + t + 50):
        series = _series(L, d=2)
        windows = make_windows(series, WindowConfig(T, t))
        starts = [k for k in range(L) if k + T + t - 1 < L]
        assert len(windows) == len(starts)
        for k in (starts[0], starts[-1]):
            np.testing.assert_array_equal(windows.x[k], series.rainfall[k:k + T].T)
            np.testing.assert_array_equal(windows.y_history[k], series.runoff[k:k + T])
            assert windows.y[k] == series.runoff[k + T + t - 1]


def test_short_series_is_size_error():
    with pytest.raises(SizeError, match="minimum 30"):
        make_windows(_series(29), WindowConfig(24, 6))


def test_poisoned_labels_leave_rainfall_intact():
    windows = make_windows(_series(40), WindowConfig(24, 6))
    poisoned = windows.with_poisoned_labels()
    assert np.isnan(poisoned.y).all() and np.isnan(poisoned.y_history).all()
    np.testing.assert_array_equal(poisoned.x, windows.x)


def test_subset_keeps_source_index():
    windows = make_windows(_series(40), WindowConfig(24, 6))
    sub = windows.subset([2, 5])
    assert list(sub.source_index) == [2, 5]
    assert sub[1].y == windows[5].y
