"""Market data: OHLCV ingestion, technical indicators, scaling and splits.

A :class:`MarketTable` stores one ``(n_dates, n_assets)`` array per OHLCV
field plus, once :func:`compute_indicators` has run, a feature cube of shape
``(n_dates, n_assets, 5)`` holding ``close, macd, rsi, cci, adx``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (DataError, DegenerateFeature, DuplicateDateSymbol, IncompleteCoverage,
                     InsufficientHistory, InvalidBar, MissingColumn, NonPositivePrice,
                     OverlappingSpans, ShapeMismatch, SpanOutOfRange)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("date", "symbol", "open", "high", "low", "close", "volume")
FEATURE_NAMES = ("close", "macd", "rsi", "cci", "adx")
N_FEATURES = len(FEATURE_NAMES)


@dataclass(frozen=True)
class IndicatorParams:
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    rsi_period: int = 14
    cci_period: int = 20
    cci_constant: float = 0.015
    adx_period: int = 14

    @property
    def warmup(self) -> int:
        """Leading rows dropped so every indicator is defined and settled."""
        return max(self.macd_slow + self.macd_signal - 2,
                   self.rsi_period,
                   self.cci_period - 1,
                   2 * self.adx_period - 1)

    @property
    def min_history(self) -> int:
        return self.warmup + 1


@dataclass(frozen=True)
class MarketTable:
    dates: np.ndarray            # datetime64[D], strictly increasing
    symbols: tuple[str, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.dates), len(self.symbols))
        for name in ("open", "high", "low", "close", "volume"):
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.features is not None and self.features.shape != shape + (N_FEATURES,):
            raise ShapeMismatch(f"features have shape {self.features.shape}")
        if len(self.dates) > 1 and not np.all(np.diff(self.dates.astype("int64")) > 0):
            raise DataError("dates must be strictly increasing")

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.symbols)

    def take(self, rows) -> "MarketTable":
        """Row subset (by integer index array or slice)."""
        return MarketTable(
            self.dates[rows], self.symbols, self.open[rows], self.high[rows], self.low[rows],
            self.close[rows], self.volume[rows],
            None if self.features is None else self.features[rows],
        )

    def between(self, start, end) -> "MarketTable":
        """Rows with ``start <= date <= end`` (inclusive, ISO strings or datetime64)."""
        lo, hi = np.datetime64(start, "D"), np.datetime64(end, "D")
        mask = (self.dates >= lo) & (self.dates <= hi)
        return self.take(np.flatnonzero(mask))

    def to_frame(self) -> pd.DataFrame:
        """Long-format OHLCV frame in the CSV column order."""
        t, d = self.close.shape
        return pd.DataFrame({
            "date": np.repeat(self.dates, d),
            "symbol": np.tile(np.array(self.symbols, dtype=object), t),
            "open": self.open.ravel(), "high": self.high.ravel(), "low": self.low.ravel(),
            "close": self.close.ravel(), "volume": self.volume.ravel(),
        })

    def feature_frame(self) -> pd.DataFrame:
        if self.features is None:
            raise DataError("indicators have not been computed for this table")
        t, d = self.close.shape
        cols = {"date": np.repeat(self.dates, d),
                "symbol": np.tile(np.array(self.symbols, dtype=object), t)}
        for k, name in enumerate(FEATURE_NAMES):
            cols[name] = self.features[:, :, k].ravel()
        return pd.DataFrame(cols)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.dates.astype("int64").tobytes())
        h.update("\x1f".join(self.symbols).encode())
        for arr in (self.open, self.high, self.low, self.close, self.volume):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


# ingestion ------------------------------------------------------------------

def table_from_frame(frame: pd.DataFrame, on_incomplete: str = "raise") -> MarketTable:
    """Validate a long OHLCV frame and pivot it into a :class:`MarketTable`.

    ``on_incomplete`` is ``"raise"`` (default) or ``"drop"``; with ``"drop"``
    symbols missing any date are excluded instead of raising
    :class:`IncompleteCoverage`. Missing days are never forward-filled.
    """
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    df = frame.loc[:, list(CSV_COLUMNS)].copy()
    df["date"] = pd.to_datetime(df["date"]).dt.normalize()
    df["symbol"] = df["symbol"].astype(str)
    prices = df[["open", "high", "low", "close"]].to_numpy(dtype=np.float64)
    volume = df["volume"].to_numpy(dtype=np.float64)
    if not (np.all(np.isfinite(prices)) and np.all(np.isfinite(volume))):
        raise DataError("non-numeric or missing OHLCV values")
    bad = np.flatnonzero(np.any(prices <= 0, axis=1))
    if bad.size:
        row = df.iloc[bad[0]]
        raise NonPositivePrice(f"non-positive price for {row['symbol']} on {row['date'].date()}")
    o, h, l, c = prices.T
    bad = np.flatnonzero((h < np.maximum(o, c)) | (l > np.minimum(o, c)) | (volume < 0))
    if bad.size:
        row = df.iloc[bad[0]]
        raise InvalidBar(f"inconsistent bar for {row['symbol']} on {row['date'].date()}")
    dup = df.duplicated(["date", "symbol"])
    if dup.any():
        row = df[dup].iloc[0]
        raise DuplicateDateSymbol(f"duplicate row for {row['symbol']} on {row['date'].date()}")

    dates = np.sort(df["date"].unique())
    counts = df.groupby("symbol")["date"].nunique()
    partial = sorted(counts.index[counts < len(dates)])
    if partial:
        if on_incomplete != "drop":
            raise IncompleteCoverage(
                f"symbol(s) {', '.join(partial)} do not cover all {len(dates)} dates")
        logger.warning("dropping symbols with incomplete coverage: %s", partial)
        df = df[~df["symbol"].isin(partial)]
        if df.empty:
            raise IncompleteCoverage("no symbol covers every date")
        dates = np.sort(df["date"].unique())
    symbols = tuple(sorted(df["symbol"].unique()))
    wide = df.pivot(index="date", columns="symbol").sort_index()
    arrays = {name: wide[name][list(symbols)].to_numpy(dtype=np.float64)
              for name in ("open", "high", "low", "close", "volume")}
    return MarketTable(wide.index.to_numpy().astype("datetime64[D]"), symbols, **arrays)


def load_ohlcv(path, start=None, end=None, on_incomplete: str = "raise") -> MarketTable:
    """Read an OHLCV CSV with header ``date,symbol,open,high,low,close,volume``.

    Rows outside ``[start, end]`` are discarded before the coverage check, so
    a symbol only has to be complete over the requested span.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().lstrip("﻿").split(",")
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"{path}: missing column(s): {', '.join(missing)}")
    if tuple(header) != CSV_COLUMNS:
        raise DataError(f"{path}: header must be exactly {','.join(CSV_COLUMNS)}")
    frame = pd.read_csv(path, dtype={"symbol": str}, encoding="utf-8", float_precision="round_trip")
    frame["date"] = pd.to_datetime(frame["date"], format="ISO8601")
    if start is not None:
        frame = frame[frame["date"] >= pd.Timestamp(start)]
    if end is not None:
        frame = frame[frame["date"] <= pd.Timestamp(end)]
    if frame.empty:
        raise SpanOutOfRange(f"{path}: no rows inside the requested span")
    return table_from_frame(frame, on_incomplete=on_incomplete)


def write_ohlcv(table_or_frame, path) -> None:
    frame = table_or_frame.to_frame() if isinstance(table_or_frame, MarketTable) else table_or_frame
    out = frame.loc[:, list(CSV_COLUMNS)].copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False, lineterminator="\n")


# indicators -----------------------------------------------------------------

def ema(x: np.ndarray, span: int) -> np.ndarray:
    """Recursive EMA with ``alpha = 2 / (span + 1)`` seeded at the first value."""
    x = np.asarray(x, dtype=np.float64)
    alpha = 2.0 / (span + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


def macd(close, fast: int = 12, slow: int = 26) -> np.ndarray:
    """MACD line: fast EMA minus slow EMA."""
    return ema(close, fast) - ema(close, slow)


def rsi(close, period: int = 14) -> np.ndarray:
    """Wilder RSI; NaN for the first ``period`` rows.

    Flat windows (no gains, no losses) read 50; windows with no losses read 100.
    """
    c = np.asarray(close, dtype=np.float64)
    out = np.full(c.shape, np.nan)
    if len(c) <= period:
        return out
    delta = np.diff(c, axis=0)
    gain = np.maximum(delta, 0.0)
    loss = np.maximum(-delta, 0.0)
    avg_g = gain[:period].mean(axis=0)
    avg_l = loss[:period].mean(axis=0)
    out[period] = _rsi_value(avg_g, avg_l)
    for t in range(period + 1, len(c)):
        avg_g = (avg_g * (period - 1) + gain[t - 1]) / period
        avg_l = (avg_l * (period - 1) + loss[t - 1]) / period
        out[t] = _rsi_value(avg_g, avg_l)
    return out


def _rsi_value(avg_g, avg_l):
    avg_g = np.asarray(avg_g, dtype=np.float64)
    avg_l = np.asarray(avg_l, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 100.0 - 100.0 / (1.0 + avg_g / avg_l)
    val = np.where(avg_l == 0.0, np.where(avg_g == 0.0, 50.0, 100.0), val)
    return val


def cci(high, low, close, period: int = 20, constant: float = 0.015) -> np.ndarray:
    """Commodity channel index on the typical price; 0 when the mean deviation is 0."""
    tp = (np.asarray(high, float) + np.asarray(low, float) + np.asarray(close, float)) / 3.0
    out = np.full(tp.shape, np.nan)
    for t in range(period - 1, len(tp)):
        win = tp[t - period + 1:t + 1]
        sma = win.mean(axis=0)
        md = np.abs(win - sma).mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = (tp[t] - sma) / (constant * md)
        out[t] = np.where(md > 0.0, val, 0.0)
    return out


def adx(high, low, close, period: int = 14) -> np.ndarray:
    """Wilder ADX; NaN for the first ``2 * period - 1`` rows."""
    h = np.asarray(high, dtype=np.float64)
    l = np.asarray(low, dtype=np.float64)
    c = np.asarray(close, dtype=np.float64)
    out = np.full(c.shape, np.nan)
    n = len(c)
    if n < 2 * period:
        return out
    up = h[1:] - h[:-1]
    down = l[:-1] - l[1:]
    plus_dm = np.where((up > down) & (up > 0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0), down, 0.0)
    tr = np.maximum.reduce([h[1:] - l[1:], np.abs(h[1:] - c[:-1]), np.abs(l[1:] - c[:-1])])
    # index i of these arrays corresponds to day i + 1
    s_tr = tr[:period].sum(axis=0)
    s_p = plus_dm[:period].sum(axis=0)
    s_m = minus_dm[:period].sum(axis=0)
    dx = [_dx(s_p, s_m, s_tr)]
    for i in range(period, n - 1):
        s_tr = s_tr - s_tr / period + tr[i]
        s_p = s_p - s_p / period + plus_dm[i]
        s_m = s_m - s_m / period + minus_dm[i]
        dx.append(_dx(s_p, s_m, s_tr))
    dx = np.asarray(dx)                  # dx[j] belongs to day period + j
    first = 2 * period - 1
    val = dx[:period].mean(axis=0)
    out[first] = val
    for t in range(first + 1, n):
        val = (val * (period - 1) + dx[t - period]) / period
        out[t] = val
    return out


def _dx(s_p, s_m, s_tr):
    with np.errstate(divide="ignore", invalid="ignore"):
        pdi = np.where(s_tr > 0, 100.0 * s_p / s_tr, 0.0)
        mdi = np.where(s_tr > 0, 100.0 * s_m / s_tr, 0.0)
        tot = pdi + mdi
        return np.where(tot > 0, 100.0 * np.abs(pdi - mdi) / tot, 0.0)


def compute_indicators(table: MarketTable, params: IndicatorParams = IndicatorParams()) -> MarketTable:
    """Attach the ``close, macd, rsi, cci, adx`` feature cube and trim the warm-up."""
    if table.n_dates < params.min_history:
        raise InsufficientHistory(
            f"{table.n_dates} dates available, indicators need at least {params.min_history}")
    feats = np.stack([
        table.close,
        macd(table.close, params.macd_fast, params.macd_slow),
        rsi(table.close, params.rsi_period),
        cci(table.high, table.low, table.close, params.cci_period, params.cci_constant),
        adx(table.high, table.low, table.close, params.adx_period),
    ], axis=-1)
    out = replace(table, features=feats).take(slice(params.warmup, None))
    assert np.all(np.isfinite(out.features)), "indicator warm-up too short"
    return out


# scaling --------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    names: tuple[str, ...] = field(default=FEATURE_NAMES)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"features": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(np.asarray(doc["mean"], float), np.asarray(doc["std"], float),
                   tuple(doc["features"]))


def fit_normalizer(train: MarketTable) -> NormStats:
    """Per-feature mean and population std over every (date, asset) of ``train``."""
    if train.features is None:
        raise DataError("compute indicators before fitting the normalizer")
    if train.n_dates == 0:
        raise DataError("cannot fit a normalizer on an empty table")
    flat = train.features.reshape(-1, train.features.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    dead = [FEATURE_NAMES[k] for k in np.flatnonzero(~(std > 0))]
    if dead:
        raise DegenerateFeature(f"zero variance in training span for: {', '.join(dead)}")
    return NormStats(mean, std)


# splits ---------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplits:
    train: MarketTable
    validation: MarketTable
    test: MarketTable


def split(table: MarketTable, train: Sequence, validation: Sequence, test: Sequence,
          slack_days: int = 7) -> DatasetSplits:
    """Cut ``table`` into three chronologically ordered, disjoint date spans.

    Each span is an inclusive ``(start, end)`` pair. A span may overhang the
    table by at most ``slack_days`` calendar days (weekends and holidays at
    the edges); beyond that :class:`SpanOutOfRange` is raised.
    """
    spans = []
    for name, (start, end) in (("train", train), ("validation", validation), ("test", test)):
        lo, hi = np.datetime64(start, "D"), np.datetime64(end, "D")
        if hi < lo:
            raise OverlappingSpans(f"{name} span ends before it starts")
        spans.append((name, lo, hi))
    for (n1, _, hi1), (n2, lo2, _) in zip(spans, spans[1:]):
        if not hi1 < lo2:
            raise OverlappingSpans(f"{n1} span must end before the {n2} span starts")
    first, last = table.dates[0], table.dates[-1]
    slack = np.timedelta64(slack_days, "D")
    parts = []
    for name, lo, hi in spans:
        if lo < first - slack or hi > last + slack:
            raise SpanOutOfRange(f"{name} span {lo}..{hi} outside table range {first}..{last}")
        part = table.between(lo, hi)
        if part.n_dates == 0:
            raise SpanOutOfRange(f"{name} span {lo}..{hi} contains no trading dates")
        parts.append(part)
    return DatasetSplits(*parts)


def split_by_fraction(table: MarketTable, train: float = 0.7, validation: float = 0.15) -> DatasetSplits:
    n = table.n_dates
    a = int(round(n * train))
    b = int(round(n * (train + validation)))
    if not 0 < a < b < n:
        raise SpanOutOfRange(f"fractions {train}/{validation} leave an empty split of {n} dates")
    return DatasetSplits(table.take(slice(0, a)), table.take(slice(a, b)), table.take(slice(b, n)))


# synthetic market -------------------------------------------------------------

DEFAULT_REGIMES = ((0, 0.0004, 0.012),)


def regime_labels(n_days: int, regimes=DEFAULT_REGIMES) -> np.ndarray:
    """Index of the active regime for each day."""
    starts = [int(r[0]) for r in regimes]
    if not starts or starts[0] != 0 or sorted(starts) != starts:
        raise ValueError("regime schedule must start at day 0 and be sorted")
    return np.searchsorted(np.asarray(starts), np.arange(n_days), side="right") - 1


def synthetic_ohlcv(seed: int = 42, n_assets: int = 5, n_days: int = 500,
                    regimes=DEFAULT_REGIMES, start_date: str = "2016-01-04",
                    market_correlation: float = 0.5) -> pd.DataFrame:
    """Seeded GBM market with a piecewise-constant (drift, volatility) schedule.

    ``regimes`` is a list of ``(start_day, daily_drift, daily_volatility)``.
    Each asset's daily log-return mixes a common market shock with an
    idiosyncratic one at correlation ``market_correlation``.
    """
    rng = np.random.default_rng(seed)
    labels = regime_labels(n_days, regimes)
    drift = np.array([float(regimes[k][1]) for k in labels])[:, None]
    vol = np.array([float(regimes[k][2]) for k in labels])[:, None]
    scale = rng.uniform(0.8, 1.2, size=n_assets)
    start = rng.uniform(20.0, 200.0, size=n_assets)
    rho = market_correlation
    z = rho * rng.standard_normal((n_days, 1)) + np.sqrt(1 - rho ** 2) * rng.standard_normal((n_days, n_assets))
    sig = vol * scale
    logret = drift - 0.5 * sig ** 2 + sig * z
    logret[0] = 0.0
    close = start * np.exp(np.cumsum(logret, axis=0))
    prev = np.vstack([close[:1], close[:-1]])
    open_ = prev * np.exp(0.25 * sig * rng.standard_normal((n_days, n_assets)))
    high = np.maximum(open_, close) * np.exp(0.5 * sig * np.abs(rng.standard_normal((n_days, n_assets))))
    low = np.minimum(open_, close) * np.exp(-0.5 * sig * np.abs(rng.standard_normal((n_days, n_assets))))
    volume = np.round(rng.lognormal(13.0, 0.3, size=(n_days, n_assets)))
    dates = np.busday_offset(np.datetime64(start_date, "D"), np.arange(n_days), roll="forward")
    symbols = [f"SYN{i:03d}" for i in range(n_assets)]
    return pd.DataFrame({
        "date": np.repeat(dates, n_assets),
        "symbol": np.tile(np.array(symbols, dtype=object), n_days),
        "open": open_.ravel(), "high": high.ravel(), "low": low.ravel(),
        "close": close.ravel(), "volume": volume.ravel(),
    })


def synthetic_market(seed: int = 42, n_assets: int = 5, n_days: int = 500,
                     regimes=DEFAULT_REGIMES, start_date: str = "2016-01-04",
                     market_correlation: float = 0.5) -> MarketTable:
    return table_from_frame(synthetic_ohlcv(seed, n_assets, n_days, regimes, start_date,
                                            market_correlation))
