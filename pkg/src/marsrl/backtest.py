"""Greedy evaluation of a trained ensemble and the performance metrics.

Metric conventions (``P`` periods per year, daily returns ``r``, ``T`` returns):

* CR   = V_T / V_0 - 1
* AR   = (1 + CR) ** (P / T) - 1
* AVol = std(r) * sqrt(P), population std
* SR   = (mean(r) * P - r_f) / AVol, reported as 0 with ``sharpe_defined = False`` when AVol is 0
* MDD  = min_t (V_t / max_{s <= t} V_s - 1), so never positive

Reports carry CR, AR, AVol and MDD in percent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import PortfolioEnv
from .errors import ArchitectureMismatch, CurveTooShort, IoFailure
from .meta import group_weights

REPORT_SCHEMA = "marsrl-backtest-report"
REPORT_VERSION = 1
PLOT_COLUMNS = ("date", "series", "value")
GROUP_SERIES = ("w_conservative", "w_neutral", "w_aggressive")


@dataclass(frozen=True)
class Metrics:
    cumulative_return: float
    annualized_return: float
    annualized_volatility: float
    sharpe_ratio: float
    max_drawdown: float
    sharpe_defined: bool
    periods: int


def drawdown_series(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v / np.maximum.accumulate(v) - 1.0


def metrics(values, periods_per_year: int = 252, risk_free_rate: float = 0.0) -> Metrics:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise CurveTooShort("an equity curve needs at least two points")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise ValueError("equity values must be finite and positive")
    r = v[1:] / v[:-1] - 1.0
    t = len(r)
    cr = v[-1] / v[0] - 1.0
    with np.errstate(over="ignore"):
        ar = float(np.float64(1.0 + cr) ** (periods_per_year / t) - 1.0)
    avol = float(np.std(r)) * np.sqrt(periods_per_year)
    defined = avol > 0.0
    sr = (float(np.mean(r)) * periods_per_year - risk_free_rate) / avol if defined else 0.0
    mdd = float(np.min(drawdown_series(v)))
    return Metrics(float(cr), float(ar), float(avol), float(sr), mdd, bool(defined), t)


# backtest --------------------------------------------------------------------------

@dataclass
class BacktestResult:
    dates: list[str]
    values: np.ndarray        # V at each date, starting with the initial value
    weights: np.ndarray       # (len(dates), N) controller weights observed at each date
    actions: np.ndarray       # (len(dates) - 1, D) executed actions
    trace: list[dict] = field(default_factory=list)


def run_backtest(policy, env: PortfolioEnv) -> BacktestResult:
    """Step ``env`` to the end with ``policy.decide(state, portfolio, 0.0)``.

    ``policy`` is normally a trained :class:`marsrl.train.Ensemble`; anything
    with ``decide`` (returning ``executed`` and ``weights``), ``weights``,
    ``state_dim`` and ``action_dim`` works. No exploration noise is used.
    """
    if policy.state_dim != env.state_dim or policy.action_dim != env.n_assets:
        raise ArchitectureMismatch(
            f"policy expects state {policy.state_dim} / action {policy.action_dim}, "
            f"data gives {env.state_dim} / {env.n_assets}")
    s = env.reset()
    dates = [_date(env, env.portfolio.t)]
    values = [env.portfolio.value]
    weights, actions = [], []
    while not env.done:
        dec = policy.decide(s, env.portfolio, 0.0)
        out = env.step(dec.executed)
        weights.append(dec.weights)
        actions.append(dec.executed)
        values.append(out.value)
        dates.append(_date(env, env.portfolio.t))
        s = out.state
    weights.append(policy.weights(s))
    return BacktestResult(dates, np.array(values), np.array(weights), np.array(actions), list(env.trace))


def _date(env: PortfolioEnv, t: int) -> str:
    return str(t) if env.dates is None else str(env.dates[t])


# reports ---------------------------------------------------------------------------

def metrics_table(m: Metrics) -> dict:
    """Report fields in report units (percent for CR, AR, AVol and MDD)."""
    return {
        "cumulative_return_pct": 100.0 * m.cumulative_return,
        "annualized_return_pct": 100.0 * m.annualized_return,
        "sharpe_ratio": m.sharpe_ratio,
        "annualized_volatility_pct": 100.0 * m.annualized_volatility,
        "max_drawdown_pct": 100.0 * m.max_drawdown,
        "sharpe_defined": m.sharpe_defined,
        "periods": m.periods,
    }


@dataclass
class BacktestReport:
    metrics: dict             # see metrics_table
    dates: list[str]
    values: list[float]
    weights: list[list[float]]
    seed: int
    variant: str
    checkpoint: str
    split: str
    config_fingerprint: str
    data_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "seed": self.seed,
            "variant": self.variant,
            "checkpoint": self.checkpoint,
            "split": self.split,
            "config_fingerprint": self.config_fingerprint,
            "data_fingerprint": self.data_fingerprint,
            "metrics": dict(self.metrics),
            "equity": {"dates": list(self.dates), "values": [float(v) for v in self.values]},
            "weights": [[float(x) for x in row] for row in self.weights],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BacktestReport":
        if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
            raise ValueError("not a version-1 backtest report")
        return cls(dict(doc["metrics"]), doc["equity"]["dates"], doc["equity"]["values"], doc["weights"], doc["seed"],
                   doc["variant"], doc["checkpoint"], doc["split"], doc["config_fingerprint"],
                   doc["data_fingerprint"])


def make_report(result: BacktestResult, *, seed: int, variant: str, checkpoint: str, split: str,
                config_fingerprint: str, data_fingerprint: str, periods_per_year: int = 252,
                risk_free_rate: float = 0.0) -> BacktestReport:
    m = metrics_table(metrics(result.values, periods_per_year, risk_free_rate))
    return BacktestReport(m, list(result.dates),
                          result.values.tolist(), result.weights.tolist(), seed, variant, checkpoint,
                          split, config_fingerprint, data_fingerprint)


def plot_rows(report: BacktestReport) -> list[tuple[str, str, float]]:
    """Tidy ``(date, series, value)`` rows: equity, drawdown and the three weight groups."""
    dd = drawdown_series(report.values)
    groups = group_weights(np.asarray(report.weights, dtype=np.float64))
    rows = []
    for i, d in enumerate(report.dates):
        rows.append((d, "equity", float(report.values[i])))
        rows.append((d, "drawdown", float(dd[i])))
        for name, g in zip(GROUP_SERIES, groups[i]):
            rows.append((d, name, float(g)))
    return rows


def emit_report(report: BacktestReport, fmt: str, path) -> Path:
    """Write ``report`` as ``json``, ``csv`` (metric table) or ``plot-data``."""
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
        elif fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric", "value"])
                for k, v in report.metrics.items():
                    w.writerow([k, repr(v)])
        elif fmt == "plot-data":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(PLOT_COLUMNS)
                for d, series, v in plot_rows(report):
                    w.writerow([d, series, repr(v)])
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write report {path}: {exc}") from exc
    return path


def backtest_checkpoint(config, checkpoint_dir, data=None, split: str | None = None) -> BacktestReport:
    """Load the ensemble in ``checkpoint_dir`` and evaluate it on one data split."""
    from .train import load_checkpoint, prepare_data
    data = prepare_data(config) if data is None else data
    split = split or config.backtest.split
    ens = load_checkpoint(checkpoint_dir, config)
    result = run_backtest(ens, data.env(split, config))
    return make_report(result, seed=config.train.seed, variant=ens.variant,
                       checkpoint=Path(checkpoint_dir).name, split=split,
                       config_fingerprint=config.fingerprint(), data_fingerprint=data.fingerprint,
                       periods_per_year=config.backtest.periods_per_year,
                       risk_free_rate=config.backtest.risk_free_rate)
