import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dstgraph.data import (
    DataError,
    NormalizationStats,
    SplitConfig,
    TableSchema,
    TimeSeriesTable,
    count_windows,
    destandardize,
    impute_missing,
    load_table,
    make_time_features,
    prepare,
    split_windows,
    standardize,
    window_samples,
)

HOURLY = TableSchema(resolution="1h")


def _write(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _table(values, start="2020-01-06 00:00:00", freq="h"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    stamps = pd.date_range(start, periods=len(values), freq=freq)
    return TimeSeriesTable(stamps, values, tuple(f"c{i}" for i in range(values.shape[1])))


def test_load_three_hourly_rows(tmp_path):
    path = _write(tmp_path, "date,x\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n2020-01-01 02:00:00,3\n")
    table = load_table(path, HOURLY)
    assert table.n_steps == 3 and table.n_channels == 1
    np.testing.assert_array_equal(table.values[:, 0], [1, 2, 3])


def test_load_inserts_missing_row_for_gap(tmp_path):
    path = _write(tmp_path, "date,x\n2020-01-01 00:00:00,1\n2020-01-01 02:00:00,3\n")
    table = load_table(path, HOURLY)
    assert table.n_steps == 3
    assert table.timestamps[1] == pd.Timestamp("2020-01-01 01:00:00")
    assert np.isnan(table.values[1, 0])


def test_load_rejects_off_grid_stamp(tmp_path):
    path = _write(tmp_path, "date,x\n2020-01-01 00:00:00,1\n2020-01-01 00:30:00,2\n2020-01-01 02:00:00,3\n")
    with pytest.raises(DataError, match="non-constant resolution"):
        load_table(path, HOURLY)


def test_load_rejects_bad_input(tmp_path):
    dup = _write(tmp_path, "date,x\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n", "dup.csv")
    with pytest.raises(DataError, match="duplicate"):
        load_table(dup, HOURLY)
    bad = _write(tmp_path, "date,x\nyesterday,1\n", "bad.csv")
    with pytest.raises(DataError, match="unparseable"):
        load_table(bad, HOURLY)
    empty = _write(tmp_path, "date\n2020-01-01 00:00:00\n", "empty.csv")
    with pytest.raises(DataError, match="zero channels"):
        load_table(empty, HOURLY)


def test_impute_bucket_mean():
    # three Mondays in January at 14:00: observed 4 and 6, missing in between
    stamps = pd.DatetimeIndex(["2020-01-06 14:00", "2020-01-13 14:00", "2020-01-20 14:00", "2020-01-07 09:00"])
    table = TimeSeriesTable(stamps, np.array([[4.0], [np.nan], [6.0], [100.0]]), ("x",))
    out = impute_missing(table)
    assert out.values[1, 0] == 5.0
    np.testing.assert_array_equal(out.values[[0, 2, 3], 0], [4, 6, 100])


def test_impute_identity_without_gaps():
    table = _table([1.0, 2.0, 3.0])
    assert impute_missing(table) is table


def test_impute_channel_mean_fallback():
    # five consecutive hours: each sits alone in its (month, weekday, hour) bucket
    table = _table([1.0, 2.0, np.nan, 4.0, 8.0])
    out = impute_missing(table)
    assert out.values[2, 0] == pytest.approx((1 + 2 + 4 + 8) / 4)


def test_impute_idempotent():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(24 * 30, 2))
    values[rng.random(values.shape) < 0.2] = np.nan
    once = impute_missing(_table(values))
    twice = impute_missing(once)
    assert not once.has_missing()
    np.testing.assert_array_equal(once.values, twice.values)


def test_standardize_population_std():
    table = _table([1.0, 2.0, 3.0])
    stats = NormalizationStats.fit(table.values)
    assert stats.mean[0] == 2.0
    assert stats.std[0] == pytest.approx(np.sqrt(2 / 3))
    np.testing.assert_allclose(standardize(table, stats).values[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)


def test_standardize_identity_stats_and_mismatch():
    table = _table(np.arange(6.0).reshape(3, 2))
    unit = NormalizationStats(np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(standardize(table, unit).values, table.values)
    with pytest.raises(DataError):
        standardize(table, NormalizationStats(np.zeros(3), np.ones(3)))


def test_zero_variance_channel_rejected():
    with pytest.raises(DataError, match="zero variance"):
        NormalizationStats.fit(np.array([[1.0, 2.0], [1.0, 3.0]]))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_standardize_round_trip(seed):
    rng = np.random.default_rng(seed)
    table = _table(rng.normal(scale=rng.uniform(0.1, 100), size=(4, 3)) + rng.normal(size=3) * 50)
    stats = NormalizationStats.fit(table.values)
    back = destandardize(standardize(table, stats), stats)
    np.testing.assert_allclose(back.values, table.values, rtol=0, atol=1e-12 * max(1.0, np.abs(table.values).max()))


def test_time_features_monday_midnight():
    feats = make_time_features(pd.DatetimeIndex(["2020-01-06 00:00:00"]))
    np.testing.assert_allclose(feats[:, 0], [-0.5, -0.5, 5 / 30 - 0.5, -0.5])


def test_time_features_upper_bounds():
    # 2017-12-31 is a Sunday
    feats = make_time_features(pd.DatetimeIndex(["2017-12-31 23:00:00"]))
    np.testing.assert_allclose(feats[:, 0], [0.5, 0.5, 0.5, 0.5])


def test_time_features_interior_and_bounded():
    feats = make_time_features(pd.DatetimeIndex(["2021-06-16 12:00:00"]))
    assert np.all(np.abs(feats) < 0.5)
    many = make_time_features(pd.date_range("2020-01-01", periods=24 * 400, freq="h"))
    assert many.shape == (4, 24 * 400)
    assert many.min() >= -0.5 and many.max() <= 0.5


@pytest.mark.parametrize("n_steps,expected", [(10, 6), (5, 1)])
def test_window_counts(n_steps, expected):
    windows = window_samples(_table(np.arange(float(n_steps))), 3, 2, 1)
    assert len(windows) == expected


def test_window_too_short():
    with pytest.raises(DataError):
        window_samples(_table(np.arange(4.0)), 3, 2)


def test_window_count_formula_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        lookback, horizon, stride = (int(v) for v in rng.integers(1, 12, size=3))
        n_steps = int(rng.integers(lookback + horizon, 80))
        windows = window_samples(_table(np.arange(float(n_steps))), lookback, horizon, stride)
        assert len(windows) == count_windows(n_steps, lookback, horizon, stride)
        assert len(windows) == (n_steps - lookback - horizon) // stride + 1


def test_window_slices_match_table():
    rng = np.random.default_rng(2)
    table = _table(rng.normal(size=(40, 3)))
    windows = window_samples(table, 7, 4, 3)
    for sample in windows:
        t = sample.t_end
        np.testing.assert_array_equal(sample.lookback, table.values[t - 6:t + 1].T)
        np.testing.assert_array_equal(sample.target, table.values[t + 1:t + 5].T)
        assert sample.time_features.shape == (4, 7)
        assert sample.target_time_features.shape == (4, 4)
    x, y, tf = windows.batch([0, 2])
    np.testing.assert_array_equal(x[1], windows[2].lookback)
    np.testing.assert_array_equal(y[1], windows[2].target)
    np.testing.assert_array_equal(tf[0], windows[0].time_features)


def test_split_windows_no_leakage():
    rng = np.random.default_rng(3)
    data = prepare(_table(rng.normal(size=(500, 2))), SplitConfig())
    lookback, horizon = 24, 12
    sets = split_windows(data, lookback, horizon)
    for name, (lo, hi) in data.boundaries.items():
        ends = sets[name].t_ends
        assert (ends - lookback + 1 >= max(lo - lookback, 0)).all()
        assert (ends + 1 >= lo).all()
        assert (ends + horizon < hi).all()
    assert data.boundaries["train"][1] == data.boundaries["val"][0]
    assert data.boundaries["val"][1] == data.boundaries["test"][0]


def test_stats_from_training_split_only():
    values = np.concatenate([np.arange(70.0), 1000 + np.arange(30.0)])
    data = prepare(_table(values), SplitConfig())
    assert data.stats.mean[0] == pytest.approx(34.5)


def test_split_config_validation():
    with pytest.raises(DataError):
        SplitConfig(0.5, 0.5, 0.5)
