"""Portfolio MDP: state vectors, trade execution and the penalised reward.

Timing convention: the agent observes day ``t`` and sizes its trades with
day-``t`` closes; orders fill at the day ``t + 1`` close, which is also the
price used to value the portfolio at ``t + 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientData, NonFiniteAction, ShapeMismatch

TRACE_COLUMNS = ("step", "date", "V", "R", "C", "rho", "cash")


@dataclass(frozen=True)
class EnvConfig:
    initial_cash: float = 1_000_000.0
    cost_rate: float = 0.001            # fraction of traded notional
    max_trade_fraction: float = 0.10    # of V_t, per asset per step
    w_vol: float = 0.5
    w_dd: float = 2.0
    window: int = 30                    # days of portfolio values for the penalty

    def __post_init__(self):
        if not self.initial_cash > 0:
            raise ValueError("initial_cash must be positive")
        if not 0.0 <= self.cost_rate <= 0.05:
            raise ValueError("cost_rate must lie in [0, 0.05]")
        if not 0.0 < self.max_trade_fraction <= 1.0:
            raise ValueError("max_trade_fraction must lie in (0, 1]")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.w_vol < 0 or self.w_dd < 0:
            raise ValueError("penalty weights must be non-negative")


@dataclass
class PortfolioState:
    cash: float
    holdings: np.ndarray      # whole shares, >= 0
    prices: np.ndarray        # close prices of day t
    t: int
    values: list[float]       # most recent portfolio values, oldest first
    initial_value: float

    @property
    def value(self) -> float:
        return float(self.cash + self.holdings @ self.prices)

    @property
    def positions(self) -> np.ndarray:
        """Position notionals at the current prices."""
        return self.holdings * self.prices

    def copy(self) -> "PortfolioState":
        return replace(self, holdings=self.holdings.copy(), prices=self.prices.copy(),
                       values=list(self.values))


@dataclass
class StepOutcome:
    state: np.ndarray          # next state vector
    reward: float
    cost: float                # transaction cost as a fraction of V_t
    risk_penalty: float
    value: float               # V_{t+1}
    prev_value: float          # V_t
    trades: np.ndarray         # executed shares, signed
    portfolio: PortfolioState  # post-step portfolio
    done: bool = False


# penalty ----------------------------------------------------------------------

def window_volatility(values) -> float:
    """Population std of the simple returns inside ``values`` (not annualised)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.std(v[1:] / v[:-1] - 1.0))


def window_drawdown(values) -> float:
    """Largest peak-to-trough decline inside ``values`` as a positive fraction."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    return float(np.max(1.0 - v / np.maximum.accumulate(v)))


def risk_penalty(values, w_vol: float = 0.5, w_dd: float = 2.0) -> float:
    return w_vol * window_volatility(values) + w_dd * window_drawdown(values)


# state ------------------------------------------------------------------------

def state_dim(n_assets: int, n_features: int = 5) -> int:
    return 1 + n_assets + n_assets * n_features


def build_state(p: PortfolioState, features: np.ndarray) -> np.ndarray:
    """``[cash / V0, position_i / V0 for each asset, features row-major by asset]``."""
    features = np.asarray(features, dtype=np.float64)
    d = len(p.holdings)
    if features.ndim != 2 or features.shape[0] != d:
        raise ShapeMismatch(f"feature block {features.shape} does not match {d} assets")
    v0 = p.initial_value
    return np.concatenate(([p.cash / v0], p.positions / v0, features.ravel()))


# execution --------------------------------------------------------------------

def order_shares(action: np.ndarray, p: PortfolioState, max_trade_fraction: float) -> np.ndarray:
    """Signed whole-share orders for ``action`` sized at the day-``t`` prices."""
    raw = action * max_trade_fraction * p.value / p.prices
    # rounding first keeps exact multiples (e.g. full liquidation) from losing a share
    return np.trunc(np.round(raw, 9))


def execute(p: PortfolioState, action, prices_next, config: EnvConfig) -> StepOutcome:
    """Fill ``action`` at ``prices_next`` and return the post-trade outcome.

    Sells settle before buys. If the buys would overdraw cash they are all
    scaled by the same factor and truncated to whole shares. Transaction
    costs are paid in cash and also enter the reward as ``C_t`` (a fraction
    of ``V_t``).
    """
    action = np.asarray(action, dtype=np.float64)
    prices_next = np.asarray(prices_next, dtype=np.float64)
    d = len(p.holdings)
    if action.shape != (d,) or prices_next.shape != (d,):
        raise ShapeMismatch(f"expected {d}-vectors, got {action.shape} and {prices_next.shape}")
    if not np.all(np.isfinite(action)):
        raise NonFiniteAction("action contains NaN or inf")
    if not np.all(prices_next > 0):
        raise ValueError("fill prices must be positive")
    c = config.cost_rate
    v_t = p.value
    orders = order_shares(np.clip(action, -1.0, 1.0), p, config.max_trade_fraction)

    sells = np.minimum(np.maximum(-orders, 0.0), p.holdings)
    proceeds = sells * prices_next
    cash = p.cash + proceeds.sum() * (1.0 - c)

    buys = np.maximum(orders, 0.0)
    need = (buys * prices_next).sum() * (1.0 + c)
    if need > cash:
        buys = np.floor(buys * (cash / need))
        while (buys * prices_next).sum() * (1.0 + c) > cash:
            buys[np.argmax(buys * prices_next)] -= 1.0
    spend = buys * prices_next
    cash = cash - spend.sum() * (1.0 + c)

    holdings = p.holdings - sells + buys
    traded = proceeds.sum() + spend.sum()
    cost = c * traded / v_t
    v_next = float(cash + holdings @ prices_next)
    values = (p.values + [v_next])[-config.window:]
    rho = risk_penalty(values, config.w_vol, config.w_dd)
    reward = (v_next - v_t) / v_t - cost - rho
    nxt = PortfolioState(float(cash), holdings, prices_next.copy(), p.t + 1, values, p.initial_value)
    return StepOutcome(np.empty(0), float(reward), float(cost), float(rho), v_next, v_t,
                       buys - sells, nxt)


class PortfolioEnv:
    """Sequential trading environment over a price matrix and a feature cube.

    ``prices`` is ``(T, D)`` and ``features`` ``(T, D, K)`` (already
    normalised). The first ``window`` rows only supply return history; trading
    starts at row ``window`` so the simulated-volatility risk always has a
    full look-back.
    """

    def __init__(self, prices, features, config: EnvConfig = EnvConfig(), dates=None):
        self.prices = np.asarray(prices, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        if self.prices.ndim != 2 or self.features.shape[:2] != self.prices.shape:
            raise ShapeMismatch(f"prices {self.prices.shape} vs features {self.features.shape}")
        self.config = config
        self.dates = None if dates is None else np.asarray(dates)
        self.n_assets = self.prices.shape[1]
        self.n_features = self.features.shape[2]
        self.portfolio: PortfolioState | None = None
        self.trace: list[dict] = []

    @classmethod
    def from_table(cls, table, norm, config: EnvConfig = EnvConfig()) -> "PortfolioEnv":
        return cls(table.close, norm.transform(table.features), config, table.dates)

    @property
    def state_dim(self) -> int:
        return state_dim(self.n_assets, self.n_features)

    @property
    def first_step(self) -> int:
        return self.config.window

    @property
    def n_steps(self) -> int:
        return self.prices.shape[0] - 1 - self.first_step

    def reset(self) -> np.ndarray:
        if self.prices.shape[0] < self.config.window + 2:
            raise InsufficientData(f"{self.prices.shape[0]} dates; need at least "
                                   f"{self.config.window + 2} for a {self.config.window}-day window")
        t = self.first_step
        v0 = self.config.initial_cash
        self.portfolio = PortfolioState(v0, np.zeros(self.n_assets), self.prices[t].copy(), t, [v0], v0)
        self.trace = []
        return self.state()

    def state(self) -> np.ndarray:
        return build_state(self.portfolio, self.features[self.portfolio.t])

    def asset_returns(self, lookback: int | None = None) -> np.ndarray:
        """Daily simple returns of every asset over the last ``lookback`` days up to ``t``."""
        lookback = lookback or self.config.window
        t = self.portfolio.t
        px = self.prices[max(0, t - lookback):t + 1]
        return px[1:] / px[:-1] - 1.0

    @property
    def done(self) -> bool:
        return self.portfolio.t >= self.prices.shape[0] - 1

    def step(self, action) -> StepOutcome:
        if self.portfolio is None:
            raise RuntimeError("call reset() first")
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        p = self.portfolio
        out = execute(p, action, self.prices[p.t + 1], self.config)
        self.portfolio = out.portfolio
        out.state = self.state()
        out.done = self.done
        self.trace.append({
            "step": len(self.trace),
            "date": "" if self.dates is None else str(self.dates[self.portfolio.t]),
            "V": out.value, "R": out.reward, "C": out.cost, "rho": out.risk_penalty,
            "cash": self.portfolio.cash,
        })
        return out

    def write_trace(self, path) -> None:
        write_step_trace(self.trace, path)


def write_step_trace(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
