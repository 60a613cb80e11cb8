"""Training loop: the ensemble decision pipeline, buffer population and updates.

One episode is a full pass over the training span. At every step each agent
proposes a noisy action, the controller weights the proposals, the weighted
action is passed through the compliance overlay and executed. Every agent
stores the executed transition (plus the risk label of its own proposal),
the controller stores the per-agent critic values and predicted risks, and
every agent then runs one critic, safety-critic, actor and target update.
The controller trains on the configured episode boundary.

Outputs under ``train.output_dir``::

    config.json  norm.json  manifest.json  episodes.csv
    traces/steps_ep0001.csv  traces/weights_ep0001.csv ...
    checkpoints/ep0000/ ... (JSON networks + ensemble.json)
    state/run_state.pkl      (full run state, for resuming)
"""

from __future__ import annotations

import csv
import hashlib
import json
import pickle
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import RiskProfile, SafetyCriticAgent, Transition, profile_grid
from .config import ExperimentConfig
from .data import (DatasetSplits, MarketTable, NormStats, compute_indicators, fit_normalizer,
                   load_ohlcv, split, split_by_fraction, synthetic_market)
from .env import PortfolioEnv, PortfolioState, StepOutcome
from .errors import (ArchitectureMismatch, ConfigError, IoFailure, NonFiniteGradient, NonFiniteInput,
                     TrainingAborted)
from .meta import MetaController, aggregate, write_weight_trace
from .nn import load_mlp, save_mlp
from .risk import env_risk, overlay_validate

ENSEMBLE_FORMAT = "marsrl-ensemble"
MANIFEST_FORMAT = "marsrl-manifest"
FORMAT_VERSION = 1


# seeding -------------------------------------------------------------------------

def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (independent of Python's hash seed)."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for ``name`` derived from ``seed``.

    The derivation is keyed: ``SeedSequence(seed, spawn_key=(key(name),))``,
    so a stream's contents do not depend on which other streams exist or the
    order they were created in.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream_key(name),))))


def seeded_streams(seed: int, names) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in names}


# data -----------------------------------------------------------------------------

@dataclass
class PreparedData:
    table: MarketTable        # indicator-augmented, warm-up trimmed
    splits: DatasetSplits
    norm: NormStats

    @property
    def fingerprint(self) -> str:
        return self.table.fingerprint()

    def env(self, which: str, config: ExperimentConfig) -> PortfolioEnv:
        """Environment over one split.

        Validation and test spans are preceded by up to ``env.window`` days of
        look-back from the earlier data, so trading starts on their first date.
        """
        part = getattr(self.splits, which)
        if which != "train":
            start = int(np.searchsorted(self.table.dates, part.dates[0]))
            part = self.table.take(slice(max(0, start - config.env.window), start + part.n_dates))
        return PortfolioEnv.from_table(part, self.norm, config.env)


def load_market(config: ExperimentConfig) -> MarketTable:
    d, s = config.data, config.synth
    if d.csv:
        return load_ohlcv(d.csv, on_incomplete=d.on_incomplete)
    return synthetic_market(s.seed, s.n_assets, s.n_days, s.regimes, s.start_date, s.market_correlation)


def prepare_data(config: ExperimentConfig, raw: MarketTable | None = None) -> PreparedData:
    raw = load_market(config) if raw is None else raw
    table = compute_indicators(raw, config.indicators)
    try:
        spans = config.data.spans
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if spans is None:
        splits = split_by_fraction(table, config.data.train_fraction, config.data.validation_fraction)
    else:
        splits = split(table, *spans)
    return PreparedData(table, splits, fit_normalizer(splits.train))


# ensemble -------------------------------------------------------------------------

@dataclass
class Decision:
    proposals: np.ndarray     # (N, D) per-agent actions, noise included
    weights: np.ndarray       # (N,)
    aggregated: np.ndarray    # A_t
    executed: np.ndarray      # A'_t after the overlay
    q: np.ndarray             # (N,) Q_i(s, a_i)
    c: np.ndarray             # (N,) C_i(s, a_i)


class Ensemble:
    """Agents, controller and overlay settings; everything needed to act."""

    def __init__(self, agents: list[SafetyCriticAgent], mac: MetaController | None, variant: str,
                 config: ExperimentConfig):
        self.agents = agents
        self.mac = mac
        self.variant = variant
        self.config = config

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def state_dim(self) -> int:
        return self.agents[0].nets.actor.in_dim

    @property
    def action_dim(self) -> int:
        return self.agents[0].action_dim

    def weights(self, state) -> np.ndarray:
        if self.mac is None:
            return np.full(self.n_agents, 1.0 / self.n_agents)
        return self.mac.weights(state)

    def decide(self, state, portfolio: PortfolioState, noise_scale: float = 0.0) -> Decision:
        proposals = np.stack([ag.act(state, noise_scale) for ag in self.agents])
        q, c = np.empty(self.n_agents), np.empty(self.n_agents)
        for i, ag in enumerate(self.agents):
            q[i], c[i] = ag.evaluate(state, proposals[i])
        w = self.weights(state)
        a = aggregate(proposals, w)
        cfg = self.config
        executed = overlay_validate(a, portfolio, cfg.risk, cfg.env.max_trade_fraction, cfg.env.cost_rate)
        return Decision(proposals, w, a, executed, q, c)


def build_ensemble(config: ExperimentConfig, state_dim: int, action_dim: int) -> Ensemble:
    t = config.train
    n = t.ensemble_size
    if t.variant == "homogeneous":
        # one shared profile and one shared set of seeds: every member is the same agent
        profiles = profile_grid(1) * n
        keys = ["shared"] * n
    else:
        profiles = profile_grid(n)
        keys = [f"agent{i}" for i in range(n)]
    agents = [SafetyCriticAgent.create(state_dim, action_dim, prof, config.agent,
                                       stream(t.seed, f"init/{k}"), stream(t.seed, f"noise/{k}"),
                                       stream(t.seed, f"buffer/{k}"))
              for prof, k in zip(profiles, keys)]
    mac = None
    if t.variant != "static":
        mac = MetaController.create(state_dim, n, config.mac, stream(t.seed, "init/mac"),
                                    stream(t.seed, "buffer/mac"))
    return Ensemble(agents, mac, t.variant, config)


# checkpoints -----------------------------------------------------------------------

def save_checkpoint(ens: Ensemble, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, ag in enumerate(ens.agents):
        save_mlp(ag.nets.actor, d / f"agent{i}_actor.json")
        save_mlp(ag.nets.critic, d / f"agent{i}_critic.json")
        save_mlp(ag.nets.safety, d / f"agent{i}_safety.json")
    if ens.mac is not None:
        save_mlp(ens.mac.net, d / "mac.json")
    meta = {
        "format": ENSEMBLE_FORMAT, "version": FORMAT_VERSION, "variant": ens.variant,
        "n_agents": ens.n_agents, "state_dim": ens.state_dim, "action_dim": ens.action_dim,
        "seed": ens.config.train.seed,
        "profiles": [{"theta": ag.profile.theta, "lambda": ag.profile.lam, "label": ag.profile.label}
                     for ag in ens.agents],
    }
    (d / "ensemble.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_checkpoint(directory, config: ExperimentConfig) -> Ensemble:
    """Rebuild an ensemble for acting from a checkpoint directory.

    Optimiser state and buffers are not part of a checkpoint; the returned
    ensemble is meant for evaluation.
    """
    d = Path(directory)
    try:
        meta = json.loads((d / "ensemble.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {d}: {exc}") from exc
    if meta.get("format") != ENSEMBLE_FORMAT or meta.get("version") != FORMAT_VERSION:
        raise ArchitectureMismatch(f"{d} is not a version-{FORMAT_VERSION} ensemble checkpoint")
    ens = build_ensemble(_config_for(config, meta), meta["state_dim"], meta["action_dim"])
    for i, (ag, prof) in enumerate(zip(ens.agents, meta["profiles"])):
        ag.profile = RiskProfile(prof["theta"], prof["lambda"], prof["label"])
        for role in ("actor", "critic", "safety"):
            net = _load_net(d / f"agent{i}_{role}.json")
            if not net.same_architecture(getattr(ag.nets, role)):
                raise ArchitectureMismatch(f"agent {i} {role}: checkpoint {net.sizes} vs config "
                                           f"{getattr(ag.nets, role).sizes}")
            setattr(ag.nets, role, net)
        ag.nets.actor_target = ag.nets.actor.copy()
        ag.nets.critic_target = ag.nets.critic.copy()
    if ens.mac is not None:
        net = _load_net(d / "mac.json")
        if not net.same_architecture(ens.mac.net):
            raise ArchitectureMismatch(f"controller: checkpoint {net.sizes} vs config {ens.mac.net.sizes}")
        ens.mac.net = net
    return ens


def _load_net(path):
    try:
        return load_mlp(path)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _config_for(config: ExperimentConfig, meta: dict) -> ExperimentConfig:
    """The config with ensemble size and variant taken from the checkpoint."""
    variant = meta["variant"]
    values = {"train.variant": variant}
    if not variant.startswith("div"):
        values["train.n_agents"] = meta["n_agents"]
    return config.with_values(values)


def checkpoint_dirs(output_dir) -> list[Path]:
    root = Path(output_dir) / "checkpoints"
    return sorted(p for p in root.glob("ep[0-9][0-9][0-9][0-9]") if p.is_dir())


# run state ------------------------------------------------------------------------

EPISODE_COLUMNS_FIXED = ("episode", "noise_scale", "episode_return", "final_value", "steps",
                         "agent_updates", "skipped_updates", "mac_updates", "mac_loss")


@dataclass
class RunState:
    config: ExperimentConfig
    ensemble: Ensemble
    episode: int = 0                        # completed episodes
    episode_rows: list = field(default_factory=list)


@dataclass
class StepRecord:
    """Everything about one training step, handed to ``on_step`` observers."""
    episode: int
    step: int
    state: np.ndarray
    decision: Decision
    risks: np.ndarray
    before: PortfolioState
    outcome: StepOutcome


@dataclass
class TrainResult:
    output_dir: Path
    run: RunState
    manifest: dict


def episode_columns(n_agents: int) -> list[str]:
    cols = list(EPISODE_COLUMNS_FIXED)
    for name in ("critic_loss", "safety_loss", "actor_objective"):
        cols += [f"{name}_{i + 1}" for i in range(n_agents)]
    return cols


def _finite_or_abort(values: dict, where: dict, out: Path):
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        _abort(f"non-finite training quantity {sorted(bad)}", {**where, **values}, out)


def _abort(message: str, info: dict, out: Path):
    dump = out / "abort_dump.json"
    doc = {"message": message, **{k: (v if isinstance(v, (int, str)) else repr(v)) for k, v in info.items()}}
    dump.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    raise TrainingAborted(message, str(dump))


def run_episode(run: RunState, env: PortfolioEnv, out: Path, on_step=None) -> dict:
    cfg = run.config
    ens = run.ensemble
    episode = run.episode + 1
    noise = cfg.agent.noise_scale(episode - 1)
    n = ens.n_agents
    losses = {name: [[] for _ in range(n)] for name in ("critic_loss", "safety_loss", "actor_objective")}
    updates = skipped = 0
    total_reward = 0.0
    dates, weights = [], []
    s = env.reset()
    step = 0
    while not env.done:
        before = env.portfolio.copy()
        where = {"episode": episode, "step": step}
        try:
            dec = ens.decide(s, env.portfolio, noise)
            rets = env.asset_returns()
            risks = np.array([env_risk(before, a, rets, cfg.risk, cfg.env.max_trade_fraction).total
                              for a in dec.proposals])
            outcome = env.step(dec.executed)
        except NonFiniteInput as exc:
            _abort(f"non-finite value in the decision pipeline: {exc}", where, out)
        _finite_or_abort({"reward": outcome.reward}, where, out)
        for i, ag in enumerate(ens.agents):
            ag.buffer.push(Transition(s, dec.executed.copy(), outcome.reward, outcome.state,
                                      outcome.done, float(risks[i]), dec.proposals[i].copy()))
        if ens.mac is not None:
            ens.mac.buffer.push(s, dec.q, dec.c)
        for i, ag in enumerate(ens.agents):
            try:
                res = ag.train_step()
            except (NonFiniteGradient, NonFiniteInput) as exc:
                _abort(f"agent {i + 1} update failed: {exc}", {**where, "agent": i + 1}, out)
            if res is None:
                skipped += 1
                continue
            _finite_or_abort(res, {**where, "agent": i + 1}, out)
            updates += 1
            for k, v in res.items():
                losses[k][i].append(v)
        if on_step is not None:
            on_step(StepRecord(episode, step, s, dec, risks, before, outcome))
        dates.append("" if env.dates is None else str(env.dates[before.t]))
        weights.append(dec.weights)
        total_reward += outcome.reward
        s = outcome.state
        step += 1

    mac_losses = []
    if ens.mac is not None and episode % cfg.mac.train_freq == 0:
        try:
            mac_losses = ens.mac.train()
        except (NonFiniteGradient, NonFiniteInput) as exc:
            _abort(f"controller update failed: {exc}", {"episode": episode}, out)
        _finite_or_abort({f"mac_loss_{j}": v for j, v in enumerate(mac_losses)}, {"episode": episode}, out)

    if cfg.train.step_traces:
        traces = out / "traces"
        traces.mkdir(parents=True, exist_ok=True)
        env.write_trace(traces / f"steps_ep{episode:04d}.csv")
        write_weight_trace(dates, np.array(weights), traces / f"weights_ep{episode:04d}.csv")

    row = {"episode": episode, "noise_scale": noise, "episode_return": total_reward,
           "final_value": env.portfolio.value, "steps": step, "agent_updates": updates,
           "skipped_updates": skipped, "mac_updates": len(mac_losses),
           "mac_loss": float(np.mean(mac_losses)) if mac_losses else float("nan")}
    for k, per_agent in losses.items():
        for i, vals in enumerate(per_agent):
            row[f"{k}_{i + 1}"] = float(np.mean(vals)) if vals else float("nan")
    return row


def write_episode_table(rows, n_agents: int, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=episode_columns(n_agents), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, config: ExperimentConfig, data_fingerprint: str, command: str,
                   overrides=(), extra: dict | None = None, exclude=("manifest.json",)) -> dict:
    """Hashes of every output file plus what is needed to reproduce the run."""
    artifacts = {}
    for p in sorted(out.rglob("*")):
        rel = p.relative_to(out).as_posix()
        if p.is_file() and rel not in exclude and not rel.startswith("state/"):
            artifacts[rel] = file_sha256(p)
    doc = {
        "format": MANIFEST_FORMAT, "version": FORMAT_VERSION, "command": command,
        "seed": config.train.seed, "config": config.to_flat(),
        "config_fingerprint": config.fingerprint(), "overrides": list(overrides),
        "data_fingerprint": data_fingerprint, "artifacts": artifacts,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def _prune_checkpoints(out: Path, keep: int) -> None:
    if keep <= 0:
        return
    dirs = [d for d in checkpoint_dirs(out) if d.name != "ep0000"]
    for d in dirs[:-keep]:
        shutil.rmtree(d)


def _save_state(run: RunState, out: Path) -> None:
    d = out / "state"
    d.mkdir(parents=True, exist_ok=True)
    tmp = d / "run_state.pkl.tmp"
    with tmp.open("wb") as fh:
        pickle.dump(run, fh, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(d / "run_state.pkl")


def load_run_state(output_dir) -> RunState:
    path = Path(output_dir) / "state" / "run_state.pkl"
    try:
        with path.open("rb") as fh:
            return pickle.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read run state {path}: {exc}") from exc


def _same_run(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    fa, fb = a.to_flat(), b.to_flat()
    for k in ("train.max_episodes", "train.keep_checkpoints"):
        fa.pop(k), fb.pop(k)
    return fa == fb


def train(config: ExperimentConfig, data: PreparedData | None = None, resume: bool = False,
          on_step=None, overrides=()) -> TrainResult:
    """Run training episodes until ``train.max_episodes`` have completed.

    With ``resume=True`` an existing run state in the output directory is
    picked up and continued; the continuation is bit-identical to an
    uninterrupted run.
    """
    data = prepare_data(config) if data is None else data
    out = Path(config.train.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = data.env("train", config)
    env.reset()

    if resume and (out / "state" / "run_state.pkl").exists():
        run = load_run_state(out)
        if not _same_run(run.config, config):
            raise ConfigError("resume config differs from the saved run beyond max_episodes")
        run.config = config
        run.ensemble.config = config
    else:
        run = RunState(config, build_ensemble(config, env.state_dim, env.n_assets))
        save_checkpoint(run.ensemble, out / "checkpoints" / "ep0000")
        _save_state(run, out)

    (out / "config.json").write_text(json.dumps(config.to_flat(), indent=1, sort_keys=True) + "\n")
    (out / "norm.json").write_text(json.dumps(data.norm.to_dict(), indent=1, sort_keys=True) + "\n")
    n = run.ensemble.n_agents
    while run.episode < config.train.max_episodes:
        row = run_episode(run, env, out, on_step)
        run.episode += 1
        run.episode_rows.append(row)
        save_checkpoint(run.ensemble, out / "checkpoints" / f"ep{run.episode:04d}")
        _prune_checkpoints(out, config.train.keep_checkpoints)
        write_episode_table(run.episode_rows, n, out / "episodes.csv")
        _save_state(run, out)
    if not run.episode_rows:
        write_episode_table([], n, out / "episodes.csv")
    manifest = write_manifest(out, config, data.fingerprint, "train", overrides,
                              {"episodes_completed": run.episode})
    return TrainResult(out, run, manifest)
