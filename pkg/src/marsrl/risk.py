"""Environmental risk score and the rule-based compliance overlay.

The risk score combines three components, each in ``[0, 1]``:

* concentration: normalised Herfindahl index of the post-trade allocation,
  with cash counted as one bucket;
* leverage: how close gross exposure comes to exhausting the cash buffer;
* simulated volatility: realised volatility of the post-trade weights over
  the recent return window, relative to a daily cap.

The overlay maps an aggregated action to the closest compliant one by
applying, in order, the no-short rule, the per-asset concentration cap and
the cash buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import PortfolioState
from .errors import NegativeWeight, NonFiniteAction, ShapeMismatch


@dataclass(frozen=True)
class RiskConfig:
    concentration_cap: float = 0.20
    cash_buffer: float = 0.05
    sigma_cap_daily: float = 0.025
    component_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.concentration_cap <= 1.0:
            raise ValueError("concentration_cap must lie in (0, 1]")
        if not 0.0 <= self.cash_buffer < 1.0:
            raise ValueError("cash_buffer must lie in [0, 1)")
        if not self.sigma_cap_daily > 0:
            raise ValueError("sigma_cap_daily must be positive")
        w = tuple(float(x) for x in self.component_weights)
        if len(w) != 3 or min(w) < 0 or sum(w) <= 0:
            raise ValueError("component_weights must be three non-negative numbers, not all zero")
        object.__setattr__(self, "component_weights", w)


@dataclass(frozen=True)
class RiskScore:
    total: float
    concentration: float
    leverage: float
    simulated_volatility: float


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def concentration_score(weights) -> float:
    """Normalised HHI over the invested weights plus the cash remainder.

    An all-cash book scores 0: holding only cash carries no market
    concentration.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise NegativeWeight("portfolio weights must be non-negative")
    invested = w.sum()
    if invested == 0.0:
        return 0.0
    cash = max(0.0, 1.0 - invested)
    hhi = float(w @ w) + cash * cash
    floor = 1.0 / (len(w) + 1)
    return _clamp01((hhi - floor) / (1.0 - floor))


def leverage_score(gross_exposure: float, equity: float, cash_buffer: float = 0.05) -> float:
    """0 while the book keeps its cash buffer, rising linearly to 1 when fully invested."""
    ratio = gross_exposure / equity
    if cash_buffer == 0.0:
        return 1.0 if ratio >= 1.0 else 0.0
    return _clamp01(max(0.0, ratio - (1.0 - cash_buffer)) / cash_buffer)


def simulated_volatility_score(weights, asset_returns, sigma_cap: float = 0.025) -> float:
    """Population std of ``asset_returns @ weights`` divided by ``sigma_cap``, clamped."""
    w = np.asarray(weights, dtype=np.float64)
    r = np.asarray(asset_returns, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != len(w):
        raise ShapeMismatch(f"returns {r.shape} do not match {len(w)} weights")
    if r.shape[0] < 2:
        return 0.0
    return _clamp01(float(np.std(r @ w)) / sigma_cap)


def post_trade_positions(p: PortfolioState, action, max_trade_fraction: float) -> np.ndarray:
    """Notional positions after ``action`` at current prices, frictionless and unrounded.

    Sells cannot take a position below zero.
    """
    action = np.asarray(action, dtype=np.float64)
    return np.maximum(p.positions + action * max_trade_fraction * p.value, 0.0)


def env_risk(p: PortfolioState, action, asset_returns, config: RiskConfig = RiskConfig(),
             max_trade_fraction: float = 0.10) -> RiskScore:
    """Risk of taking ``action`` from portfolio ``p`` given the recent asset returns."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != p.holdings.shape:
        raise ShapeMismatch(f"action {action.shape} for {p.holdings.shape} holdings")
    if not np.all(np.isfinite(action)):
        raise NonFiniteAction("action contains NaN or inf")
    v = p.value
    pos = post_trade_positions(p, action, max_trade_fraction)
    gross = float(pos.sum())
    # buys beyond available cash are funded notionally; weights then sum above 1
    conc = concentration_score(pos / max(v, gross))
    lev = leverage_score(gross, v, config.cash_buffer)
    vol = simulated_volatility_score(pos / v, asset_returns, config.sigma_cap_daily)
    comps = np.array([conc, lev, vol])
    weights = np.asarray(config.component_weights)
    total = _clamp01(float(weights @ comps / weights.sum()))
    return RiskScore(total, conc, lev, vol)


def combine_components(concentration: float, leverage: float, volatility: float,
                       weights=(1.0, 1.0, 1.0)) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return _clamp01(float(w @ np.array([concentration, leverage, volatility]) / w.sum()))


# overlay ------------------------------------------------------------------------

def overlay_validate(action, p: PortfolioState, config: RiskConfig = RiskConfig(),
                     max_trade_fraction: float = 0.10, cost_rate: float = 0.0) -> np.ndarray:
    """Return the executed action ``A'`` for an aggregated action ``A``.

    Rules, in order, all judged at the current prices and current value V:

    1. sells are clipped so no holding goes negative;
    2. each buy is clipped so the position stays within ``cap * V``;
    3. all buys are scaled by one common factor so that cash after the trade
       (whole-share sale proceeds net of costs, purchases including costs)
       stays at or above ``buffer * V``.

    Entries that already comply are passed through untouched, which makes
    the map idempotent.
    """
    a = np.asarray(action, dtype=np.float64)
    if a.shape != p.holdings.shape:
        raise ShapeMismatch(f"action {a.shape} for {p.holdings.shape} holdings")
    if not np.all(np.isfinite(a)):
        raise NonFiniteAction("action contains NaN or inf")
    a = np.clip(a, -1.0, 1.0)
    v = p.value
    unit = max_trade_fraction * v          # notional per unit of action
    if unit <= 0:
        return np.zeros_like(a)
    pos = p.positions
    lo = -pos / unit
    hi = np.maximum(config.concentration_cap * v - pos, 0.0) / unit
    a = np.minimum(np.maximum(a, lo), hi)

    buy = a > 0
    # sells fill in whole shares (truncated), so count only the proceeds that will arrive
    sold = np.minimum(np.trunc(np.round(np.maximum(-a, 0.0) * unit / p.prices, 9)), p.holdings)
    sells = float(sold @ p.prices)
    buys = float(a[buy].sum()) * unit
    cash_after = p.cash + sells * (1.0 - cost_rate) - buys * (1.0 + cost_rate)
    floor = config.cash_buffer * v
    if buys > 0 and cash_after < floor - 1e-9 * v:
        room = p.cash + sells * (1.0 - cost_rate) - floor
        scale = max(room, 0.0) / (buys * (1.0 + cost_rate))
        a = np.where(buy, a * scale, a)
    return a


def is_compliant(action, p: PortfolioState, config: RiskConfig = RiskConfig(),
                 max_trade_fraction: float = 0.10, cost_rate: float = 0.0) -> bool:
    a = np.asarray(action, dtype=np.float64)
    return bool(np.array_equal(overlay_validate(a, p, config, max_trade_fraction, cost_rate), a))
