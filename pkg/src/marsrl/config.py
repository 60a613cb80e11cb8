"""Experiment configuration as a flat ``section.key -> value`` JSON document.

Every key has a default; a config file or ``--set`` override only needs the
keys it changes. Unknown keys and ill-typed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .agent import AgentConfig
from .data import DEFAULT_REGIMES, IndicatorParams
from .env import EnvConfig
from .errors import ConfigError
from .meta import MacConfig
from .risk import RiskConfig

VARIANT_PATTERN = re.compile(r"^(full|static|homogeneous|div[1-9][0-9]*)$")


@dataclass(frozen=True)
class DataSettings:
    csv: str = ""                       # empty: use the synthetic market
    on_incomplete: str = "raise"        # or "drop" dates missing any symbol
    train_start: str = ""               # empty spans: split by fraction instead
    train_end: str = ""
    validation_start: str = ""
    validation_end: str = ""
    test_start: str = ""
    test_end: str = ""
    train_fraction: float = 0.7
    validation_fraction: float = 0.15

    def __post_init__(self):
        if self.on_incomplete not in ("raise", "drop"):
            raise ValueError("data.on_incomplete must be 'raise' or 'drop'")

    @property
    def spans(self):
        pairs = ((self.train_start, self.train_end), (self.validation_start, self.validation_end),
                 (self.test_start, self.test_end))
        given = [all(p) for p in pairs]
        if not any(a or b for a, b in pairs):
            return None
        if not all(given):
            raise ValueError("either set all six span dates or none of them")
        return pairs


@dataclass(frozen=True)
class SynthSettings:
    seed: int = 42
    n_assets: int = 5
    n_days: int = 500
    regimes: tuple = DEFAULT_REGIMES    # (start_day, daily_drift, daily_volatility) triples
    start_date: str = "2016-01-04"
    market_correlation: float = 0.5


@dataclass(frozen=True)
class TrainSettings:
    n_agents: int = 10
    max_episodes: int = 30
    seed: int = 42
    variant: str = "full"
    output_dir: str = "runs/marsrl"
    keep_checkpoints: int = 3           # most recent episode checkpoints kept; 0 keeps all
    step_traces: bool = True

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("train.n_agents must be at least 1")
        if self.max_episodes < 0:
            raise ValueError("train.max_episodes must be non-negative")
        if not VARIANT_PATTERN.match(self.variant):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.keep_checkpoints < 0:
            raise ValueError("train.keep_checkpoints must be non-negative")

    @property
    def ensemble_size(self) -> int:
        if self.variant.startswith("div"):
            return int(self.variant[3:])
        return self.n_agents


@dataclass(frozen=True)
class BacktestSettings:
    split: str = "test"
    episode: int = -1                   # -1: latest checkpoint
    risk_free_rate: float = 0.0
    periods_per_year: int = 252

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise ValueError("backtest.split must be train, validation or test")


SECTIONS = {
    "data": DataSettings,
    "synth": SynthSettings,
    "indicators": IndicatorParams,
    "env": EnvConfig,
    "risk": RiskConfig,
    "agent": AgentConfig,
    "mac": MacConfig,
    "train": TrainSettings,
    "backtest": BacktestSettings,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSettings = field(default_factory=DataSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    indicators: IndicatorParams = field(default_factory=IndicatorParams)
    env: EnvConfig = field(default_factory=EnvConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    mac: MacConfig = field(default_factory=MacConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    backtest: BacktestSettings = field(default_factory=BacktestSettings)

    def __post_init__(self):
        if not 0.0 < self.agent.gamma < 1.0:
            raise ConfigError("agent.gamma must lie in (0, 1)")

    def to_flat(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                out[f"{name}.{f.name}"] = _jsonable(getattr(section, f.name))
        return dict(sorted(out.items()))

    def fingerprint(self) -> str:
        """Hash of every setting that affects results (the output location does not)."""
        flat = self.to_flat()
        flat.pop("train.output_dir")
        return hashlib.sha256(canonical_json(flat).encode()).hexdigest()

    def with_values(self, values: dict) -> "ExperimentConfig":
        """Copy with the given flat ``section.key`` values applied."""
        grouped: dict[str, dict] = {}
        for key, value in values.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            defaults = {f.name: f for f in fields(SECTIONS[section])}
            if name not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(getattr(self, section), name)
            grouped.setdefault(section, {})[name] = _coerce(key, value, current)
        updated = {}
        for section, changes in grouped.items():
            try:
                updated[section] = replace(getattr(self, section), **changes)
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc)) from exc
        return replace(self, **updated)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(key: str, value, current):
    """Check ``value`` against the type of the current setting."""
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = isinstance(value, str)
    elif isinstance(current, tuple):
        ok = isinstance(value, (list, tuple))
        value = _tuplify(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON, falling back to a plain string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the flat JSON file at ``path``, then ``key=value`` overrides in order."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("a config file must hold one flat JSON object")
        cfg = cfg.with_values(doc)
    for text in overrides:
        key, value = parse_override(text)
        cfg = cfg.with_values({key: value})
    return cfg
