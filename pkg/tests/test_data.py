import numpy as np
import pandas as pd
import pytest

from marsrl import data as md
from marsrl.errors import (DataError, DegenerateFeature, DuplicateDateSymbol, IncompleteCoverage,
                           InsufficientHistory, InvalidBar, MissingColumn, NonPositivePrice,
                           OverlappingSpans, SpanOutOfRange)

from oracles import oracle_adx, oracle_cci, oracle_ema, oracle_rsi


def _write(tmp_path, rows, header="date,symbol,open,high,low,close,volume"):
    p = tmp_path / "prices.csv"
    p.write_text(header + "\n" + "\n".join(rows) + "\n")
    return p


GOOD_ROWS = [
    "2020-01-02,AAA,10,11,9,10.5,100",
    "2020-01-02,BBB,20,21,19,20.5,200",
    "2020-01-03,AAA,10.5,12,10,11,110",
    "2020-01-03,BBB,20.5,21,20,20,210",
    "2020-01-06,AAA,11,11.5,10.5,11.2,120",
    "2020-01-06,BBB,20,20.5,19.5,20.1,220",
]


def test_load_two_symbols_three_days(tmp_path):
    t = md.load_ohlcv(_write(tmp_path, GOOD_ROWS))
    assert t.n_assets == 2 and t.n_dates == 3
    assert t.close.size == 6
    assert t.symbols == ("AAA", "BBB")
    assert t.close[1, 1] == 20.0


def test_load_rejects_negative_close(tmp_path):
    rows = GOOD_ROWS[:-1] + ["2020-01-06,BBB,20,20.5,-1,-1,220"]
    with pytest.raises(NonPositivePrice):
        md.load_ohlcv(_write(tmp_path, rows))


def test_load_incomplete_coverage(tmp_path):
    rows = GOOD_ROWS[:-1]
    with pytest.raises(IncompleteCoverage):
        md.load_ohlcv(_write(tmp_path, rows))
    t = md.load_ohlcv(_write(tmp_path, rows), on_incomplete="drop")
    assert t.symbols == ("AAA",) and t.n_dates == 3


def test_load_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        md.load_ohlcv(_write(tmp_path, ["2020-01-02,AAA,10,11,9,10.5"],
                             header="date,symbol,open,high,low,close"))


def test_load_duplicate_and_bad_bar(tmp_path):
    with pytest.raises(DuplicateDateSymbol):
        md.load_ohlcv(_write(tmp_path, GOOD_ROWS + [GOOD_ROWS[0]]))
    bad = GOOD_ROWS[:-1] + ["2020-01-06,BBB,20,19,19.5,20.1,220"]
    with pytest.raises(InvalidBar):
        md.load_ohlcv(_write(tmp_path, bad))


def test_load_span_restricts_before_coverage_check(tmp_path):
    rows = GOOD_ROWS + ["2020-01-07,AAA,11,11.5,10.5,11.2,120"]
    with pytest.raises(IncompleteCoverage):
        md.load_ohlcv(_write(tmp_path, rows))
    t = md.load_ohlcv(_write(tmp_path, rows), end="2020-01-06")
    assert t.n_dates == 3


def test_csv_roundtrip(tmp_path):
    t = md.synthetic_market(seed=3, n_assets=3, n_days=40)
    path = tmp_path / "syn.csv"
    md.write_ohlcv(t, path)
    back = md.load_ohlcv(path)
    np.testing.assert_array_equal(back.close, t.close)
    np.testing.assert_array_equal(back.dates, t.dates)
    assert back.fingerprint() == t.fingerprint()


# indicators ---------------------------------------------------------------

def _reversal_series():
    """30 bars: 15 days up, then 15 days down, with uneven steps."""
    steps = [0.8, 1.1, 0.4, 0.9, 1.3, 0.2, 0.7, 1.0, 0.5, 1.2, 0.6, 0.9, 0.3, 1.1, 0.8,
             -0.9, -1.2, -0.4, -1.0, -0.6, -1.4, -0.3, -0.8, -1.1, -0.5, -0.7, -1.3, -0.2, -0.9, -0.6]
    close = [100.0]
    for s in steps[1:]:
        close.append(close[-1] + s)
    high = [c + 0.5 + 0.1 * (i % 3) for i, c in enumerate(close)]
    low = [c - 0.4 - 0.1 * (i % 4) for i, c in enumerate(close)]
    return high, low, close


def _compare(ours, oracle):
    checked = 0
    for a, b in zip(ours, oracle):
        if b is None:
            assert np.isnan(a)
        else:
            assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
            checked += 1
    assert checked > 0


@pytest.mark.parametrize("period", [5, 14])
def test_rsi_matches_hand_oracle(period):
    _, _, c = _reversal_series()
    _compare(md.rsi(np.array(c), period), oracle_rsi(c, period))


@pytest.mark.parametrize("period", [5, 20])
def test_cci_matches_hand_oracle(period):
    h, l, c = _reversal_series()
    _compare(md.cci(np.array(h), np.array(l), np.array(c), period), oracle_cci(h, l, c, period))


@pytest.mark.parametrize("period", [5, 14])
def test_adx_matches_hand_oracle(period):
    h, l, c = _reversal_series()
    _compare(md.adx(np.array(h), np.array(l), np.array(c), period), oracle_adx(h, l, c, period))


def test_macd_matches_hand_oracle():
    _, _, c = _reversal_series()
    expect = [f - s for f, s in zip(oracle_ema(c, 12), oracle_ema(c, 26))]
    _compare(md.macd(np.array(c)), expect)


def test_indicators_vectorise_over_assets():
    h, l, c = (np.array(v) for v in _reversal_series())
    H, L, C = (np.stack([v, v * 1.5], axis=1) for v in (h, l, c))
    np.testing.assert_allclose(md.adx(H, L, C, 5)[:, 1], md.adx(h * 1.5, l * 1.5, c * 1.5, 5),
                               rtol=1e-12, equal_nan=True)


def _table_from_close(close_cols, spread=0.5, dates=None):
    close = np.asarray(close_cols, dtype=float)
    t = close.shape[0]
    if dates is None:
        dates = np.busday_offset(np.datetime64("2020-01-01"), np.arange(t), roll="forward")
    return md.MarketTable(dates, tuple(f"S{i}" for i in range(close.shape[1])),
                          close, close + spread, close - spread, close, np.ones_like(close))


def test_rising_series_rsi_is_100():
    close = np.linspace(10, 30, 60)[:, None]
    out = md.compute_indicators(_table_from_close(close))
    assert np.all(out.features[:, 0, 2] == 100.0)


def test_constant_series_macd_and_cci_zero():
    close = np.full((50, 2), 42.0)
    out = md.compute_indicators(_table_from_close(close))
    assert np.all(out.features[:, :, 1] == 0.0)
    assert np.all(out.features[:, :, 3] == 0.0)


def test_warmup_trim_and_history_requirement():
    p = md.IndicatorParams()
    assert p.min_history == 34
    t = md.synthetic_market(seed=1, n_assets=2, n_days=34)
    out = md.compute_indicators(t)
    assert out.n_dates == 1 and out.dates[0] == t.dates[33]
    with pytest.raises(InsufficientHistory):
        md.compute_indicators(t.take(slice(0, 33)))


def test_indicator_bounds_and_purity():
    t = md.synthetic_market(seed=9, n_assets=4, n_days=300,
                            regimes=[(0, 0.001, 0.01), (150, -0.002, 0.03)])
    a = md.compute_indicators(t)
    b = md.compute_indicators(t)
    assert np.array_equal(a.features, b.features)
    assert np.all(np.isfinite(a.features))
    for k in (2, 4):
        assert a.features[..., k].min() >= 0 and a.features[..., k].max() <= 100
    assert np.all(np.diff(a.dates.astype(int)) > 0)
    assert a.features.shape == (300 - 33, 4, 5)


# normalisation -------------------------------------------------------------

def _feat_table(values):
    values = np.asarray(values, dtype=float)
    t = _table_from_close(np.ones((values.shape[0], values.shape[1])) * 5)
    return md.MarketTable(t.dates, t.symbols, t.open, t.high, t.low, t.close, t.volume, values)


def test_fit_normalizer_population_std():
    feats = np.zeros((3, 1, 5))
    feats[:, 0, :] = np.array([1.0, 2.0, 3.0])[:, None] * np.arange(1, 6)
    stats = md.fit_normalizer(_feat_table(feats))
    assert stats.mean[0] == 2.0
    assert stats.std[0] == pytest.approx(np.sqrt(2 / 3), rel=1e-15)


def test_fit_normalizer_degenerate():
    feats = np.ones((4, 2, 5))
    feats[:, :, 1] = np.arange(8).reshape(4, 2)
    with pytest.raises(DegenerateFeature):
        md.fit_normalizer(_feat_table(feats))


def test_normalised_train_moments_and_test_uses_train_stats():
    t = md.compute_indicators(md.synthetic_market(seed=4, n_assets=3, n_days=200))
    tr, te = t.take(slice(0, 120)), t.take(slice(120, None))
    stats = md.fit_normalizer(tr)
    z = stats.transform(tr.features).reshape(-1, 5)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(z.std(axis=0) - 1) < 1e-9)
    zt = stats.transform(te.features)
    np.testing.assert_array_equal(zt, (te.features - stats.mean) / stats.std)
    assert not np.allclose(zt.reshape(-1, 5).mean(axis=0), 0, atol=1e-6)


# splits ----------------------------------------------------------------------

def _calendar_table(start="2016-01-01", end="2022-12-31"):
    days = np.arange(np.datetime64(start), np.datetime64(end) + 1)
    days = days[np.is_busday(days)]
    return _table_from_close(np.linspace(10, 20, len(days))[:, None], dates=days)


def test_split_table1_2022_row():
    t = _calendar_table()
    s = md.split(t, ("2016-01-01", "2020-12-31"), ("2021-01-01", "2021-12-31"),
                 ("2022-01-01", "2022-12-31"))
    assert s.train.dates[-1] <= np.datetime64("2020-12-31")
    assert s.validation.dates[0] >= np.datetime64("2021-01-01")
    assert s.validation.dates[-1] <= np.datetime64("2021-12-31")
    assert s.test.dates[0] >= np.datetime64("2022-01-01")
    assert s.train.n_dates + s.validation.n_dates + s.test.n_dates == t.n_dates
    assert not set(s.train.dates) & set(s.test.dates)


def test_split_ordering_and_range_errors():
    t = _calendar_table()
    with pytest.raises(OverlappingSpans):
        md.split(t, ("2022-01-01", "2022-12-31"), ("2021-01-01", "2021-12-31"),
                 ("2016-01-01", "2020-12-31"))
    with pytest.raises(SpanOutOfRange):
        md.split(t, ("2016-01-01", "2020-12-31"), ("2021-01-01", "2021-12-31"),
                 ("2022-01-01", "2023-06-30"))


def test_split_by_fraction_is_chronological():
    t = _calendar_table("2020-01-01", "2020-12-31")
    s = md.split_by_fraction(t)
    assert s.train.dates[-1] < s.validation.dates[0] < s.test.dates[0]


# synthetic generator ---------------------------------------------------------

def test_synthetic_is_seeded_and_valid():
    a = md.synthetic_ohlcv(seed=7, n_assets=3, n_days=50)
    b = md.synthetic_ohlcv(seed=7, n_assets=3, n_days=50)
    pd.testing.assert_frame_equal(a, b)
    t = md.table_from_frame(a)
    assert t.n_assets == 3 and t.n_dates == 50
    assert not md.synthetic_ohlcv(seed=8, n_assets=3, n_days=50).equals(a)


def test_regime_labels():
    lab = md.regime_labels(10, [(0, 0.0, 0.01), (4, 0.0, 0.02), (7, 0.0, 0.01)])
    assert lab.tolist() == [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
    with pytest.raises(ValueError):
        md.regime_labels(5, [(2, 0.0, 0.01)])


def test_nonfinite_rejected():
    f = md.synthetic_ohlcv(seed=1, n_assets=2, n_days=5)
    f.loc[3, "close"] = np.nan
    with pytest.raises(DataError):
        md.table_from_frame(f)
