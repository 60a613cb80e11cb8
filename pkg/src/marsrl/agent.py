"""Safety-critic DDPG agent.

Each agent owns an actor, a critic, a safety-critic (sigmoid output, trained
to regress the environmental risk score), target copies of actor and critic,
and its own replay buffer. The actor ascends

    Q(s, pi(s)) - lambda * relu(C(s, pi(s)) - theta)

so the safety penalty only bites when predicted risk exceeds the agent's
tolerance ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BufferUnderfilled, EmptyBatch, LabelOutOfRange, NonFiniteState
from .nn import MLP, Adam, backward, forward, soft_update

PROFILE_LABELS = (
    "Ultra Conservative", "Conservative", "Moderately Conservative", "Balanced",
    "Moderately Aggressive", "Aggressive", "Growth", "Maximum Growth",
)


@dataclass(frozen=True)
class RiskProfile:
    theta: float
    lam: float
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def profile_grid(n: int, theta_range=(0.15, 0.85), lambda_range=(8.0, 0.25)) -> list[RiskProfile]:
    """``n`` profiles from most conservative (index 0) to most aggressive.

    Thresholds are spaced linearly and penalty weights geometrically.
    """
    if n < 1:
        raise ValueError("need at least one agent")
    if n == 1:
        theta = float(np.mean(theta_range))
        lam = float(np.sqrt(lambda_range[0] * lambda_range[1]))
        return [RiskProfile(theta, lam, "Balanced")]
    thetas = np.linspace(theta_range[0], theta_range[1], n)
    lams = np.geomspace(lambda_range[0], lambda_range[1], n)
    labels = [PROFILE_LABELS[int(round(i * (len(PROFILE_LABELS) - 1) / (n - 1)))] for i in range(n)]
    return [RiskProfile(float(t), float(l), s) for t, l, s in zip(thetas, lams, labels)]


def profile_groups(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Agent indices of the conservative, neutral and aggressive thirds of the grid."""
    cons, neut, aggr = np.array_split(np.arange(n), 3)
    return cons, neut, aggr


# replay ------------------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray      # executed action A'_t
    reward: float
    next_state: np.ndarray
    done: bool
    risk: float             # environmental risk of this agent's proposed action
    proposed: np.ndarray | None = None


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    risks: np.ndarray
    proposed: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """FIFO ring of transitions with seeded uniform sampling without replacement.

    Storage is a set of numpy arrays that grow by doubling up to ``capacity``.
    """

    _FIELDS = ("states", "actions", "rewards", "next_states", "dones", "risks", "proposed")

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self._size = 0
        self._next = 0
        self._data: dict[str, np.ndarray] | None = None

    def __len__(self):
        return self._size

    def _row(self, tr: Transition) -> dict:
        return {
            "states": tr.state, "actions": tr.action, "rewards": tr.reward,
            "next_states": tr.next_state, "dones": float(tr.done), "risks": tr.risk,
            "proposed": tr.action if tr.proposed is None else tr.proposed,
        }

    def _grow(self, row: dict) -> None:
        if self._data is None:
            n = min(self.capacity, 1024)
            self._data = {k: np.zeros((n,) + np.shape(v)) for k, v in row.items()}
        elif self._size == len(self._data["rewards"]) < self.capacity:
            n = min(self.capacity, 2 * self._size)
            for k, arr in self._data.items():
                bigger = np.zeros((n,) + arr.shape[1:])
                bigger[:self._size] = arr
                self._data[k] = bigger

    def push(self, tr: Transition) -> None:
        row = self._row(tr)
        self._grow(row)
        i = self._next
        for k, v in row.items():
            self._data[k][i] = v
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if self._size == 0:
            return []
        start = self._next if self._size == self.capacity else 0
        order = (start + np.arange(self._size)) % self.capacity
        d = self._data
        return [Transition(d["states"][i].copy(), d["actions"][i].copy(), float(d["rewards"][i]),
                           d["next_states"][i].copy(), bool(d["dones"][i]), float(d["risks"][i]),
                           d["proposed"][i].copy()) for i in order]

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size > self._size:
            raise BufferUnderfilled(f"buffer holds {self._size} < batch size {batch_size}")
        return self.rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> Batch:
        idx = self.sample_indices(batch_size)
        return Batch(*(self._data[k][idx] for k in self._FIELDS))


def make_batch(items) -> Batch:
    if not items:
        raise EmptyBatch("cannot build an empty batch")
    return Batch(
        np.stack([t.state for t in items]),
        np.stack([t.action for t in items]),
        np.array([t.reward for t in items], dtype=np.float64),
        np.stack([t.next_state for t in items]),
        np.array([t.done for t in items], dtype=np.float64),
        np.array([t.risk for t in items], dtype=np.float64),
        np.stack([t.action if t.proposed is None else t.proposed for t in items]),
    )


# agent ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    hidden_sizes: tuple[int, ...] = (256, 128, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    safety_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_capacity: int = 100_000
    noise_init: float = 0.2
    noise_decay: float = 0.995
    noise_floor: float = 0.02
    actor_final_bound: float = 3e-3

    def noise_scale(self, episode: int) -> float:
        """Exploration std for a 0-based episode index."""
        return max(self.noise_floor, self.noise_init * self.noise_decay ** episode)


@dataclass
class AgentNets:
    actor: MLP
    critic: MLP
    safety: MLP
    actor_target: MLP
    critic_target: MLP
    actor_opt: Adam = field(default_factory=Adam)
    critic_opt: Adam = field(default_factory=Adam)
    safety_opt: Adam = field(default_factory=Adam)

    @classmethod
    def build(cls, state_dim: int, action_dim: int, config: AgentConfig,
              rng: np.random.Generator) -> "AgentNets":
        hidden = list(config.hidden_sizes)
        actor = MLP.init([state_dim, *hidden, action_dim], rng, "tanh", config.actor_final_bound)
        critic = MLP.init([state_dim + action_dim, *hidden, 1], rng, "linear")
        safety = MLP.init([state_dim + action_dim, *hidden, 1], rng, "sigmoid")
        return cls(actor, critic, safety, actor.copy(), critic.copy(),
                   Adam(lr=config.actor_lr), Adam(lr=config.critic_lr), Adam(lr=config.safety_lr))


class SafetyCriticAgent:
    def __init__(self, nets: AgentNets, profile: RiskProfile, config: AgentConfig,
                 noise_rng: np.random.Generator, buffer: ReplayBuffer):
        self.nets = nets
        self.profile = profile
        self.config = config
        self.noise_rng = noise_rng
        self.buffer = buffer

    @classmethod
    def create(cls, state_dim: int, action_dim: int, profile: RiskProfile, config: AgentConfig,
               init_rng, noise_rng, buffer_rng) -> "SafetyCriticAgent":
        nets = AgentNets.build(state_dim, action_dim, config, init_rng)
        return cls(nets, profile, config, noise_rng, ReplayBuffer(config.buffer_capacity, buffer_rng))

    @property
    def action_dim(self) -> int:
        return self.nets.actor.out_dim

    # acting -----------------------------------------------------------------

    def act(self, state, noise_scale: float = 0.0) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise NonFiniteState("state contains NaN or inf")
        a = self.nets.actor(state)
        if noise_scale > 0:
            a = np.clip(a + noise_scale * self.noise_rng.standard_normal(a.shape), -1.0, 1.0)
        return a

    def evaluate(self, state, action) -> tuple[float, float]:
        """Critic value and predicted risk of one state-action pair."""
        x = np.concatenate([state, action])
        return float(self.nets.critic(x)[0]), float(self.nets.safety(x)[0])

    # learning ---------------------------------------------------------------

    def td_targets(self, batch: Batch) -> np.ndarray:
        n = self.nets
        if self.config.gamma == 0.0:
            return batch.rewards.copy()
        a_next = n.actor_target(batch.next_states)
        q_next = n.critic_target(np.hstack([batch.next_states, a_next]))[:, 0]
        return batch.rewards + self.config.gamma * (1.0 - batch.dones) * q_next

    def critic_loss_and_grads(self, batch: Batch):
        if len(batch) == 0:
            raise EmptyBatch("empty batch")
        y = self.td_targets(batch)
        q, cache = forward(self.nets.critic, np.hstack([batch.states, batch.actions]))
        err = q[:, 0] - y
        grads, _ = backward(self.nets.critic, cache, (2.0 / len(y)) * err[:, None])
        return float(np.mean(err ** 2)), grads

    def update_critic(self, batch: Batch) -> float:
        """One Adam step on the TD loss; returns the loss before the step."""
        loss, grads = self.critic_loss_and_grads(batch)
        self.nets.critic_opt.step(self.nets.critic, grads)
        return loss

    def safety_loss_and_grads(self, batch: Batch):
        if len(batch) == 0:
            raise EmptyBatch("empty batch")
        labels = batch.risks
        if np.any(labels < 0.0) or np.any(labels > 1.0) or not np.all(np.isfinite(labels)):
            raise LabelOutOfRange("risk labels must lie in [0, 1]")
        c, cache = forward(self.nets.safety, np.hstack([batch.states, batch.proposed]))
        err = c[:, 0] - labels
        grads, _ = backward(self.nets.safety, cache, (2.0 / len(labels)) * err[:, None])
        return float(np.mean(err ** 2)), grads

    def update_safety_critic(self, batch: Batch) -> float:
        """One Adam step regressing the stored risk labels for the proposed actions."""
        loss, grads = self.safety_loss_and_grads(batch)
        self.nets.safety_opt.step(self.nets.safety, grads)
        return loss

    def actor_loss_and_grads(self, states: np.ndarray, profile: RiskProfile | None = None):
        """Objective ``J`` and gradients of ``-J`` w.r.t. the actor parameters.

        Critic and safety-critic are only differentiated with respect to
        their action input; their own parameters are left alone.
        """
        profile = profile or self.profile
        n = self.nets
        if len(states) == 0:
            raise EmptyBatch("empty batch")
        b = len(states)
        d = self.action_dim
        a, a_cache = forward(n.actor, states)
        x = np.hstack([states, a])
        q, q_cache = forward(n.critic, x)
        _, dq_dx = backward(n.critic, q_cache, np.ones_like(q))
        grad_a = dq_dx[:, -d:]
        c, c_cache = forward(n.safety, x)
        excess = c[:, 0] - profile.theta
        active = excess > 0.0
        objective = float(np.mean(q[:, 0] - profile.lam * np.maximum(excess, 0.0)))
        if profile.lam > 0 and active.any():
            _, dc_dx = backward(n.safety, c_cache, active[:, None].astype(np.float64))
            grad_a = grad_a - profile.lam * dc_dx[:, -d:]
        grads, _ = backward(n.actor, a_cache, -grad_a / b)
        return objective, grads

    def update_actor(self, batch: Batch, profile: RiskProfile | None = None) -> float:
        objective, grads = self.actor_loss_and_grads(batch.states, profile)
        self.nets.actor_opt.step(self.nets.actor, grads)
        return objective

    def update_targets(self) -> None:
        tau = self.config.tau
        soft_update(self.nets.actor_target, self.nets.actor, tau)
        soft_update(self.nets.critic_target, self.nets.critic, tau)

    def train_step(self) -> dict | None:
        """Sample a minibatch and run critic, safety-critic, actor and target updates.

        Returns ``None`` while the buffer holds fewer than ``batch_size`` items.
        """
        if len(self.buffer) < self.config.batch_size:
            return None
        batch = self.buffer.sample(self.config.batch_size)
        critic_loss = self.update_critic(batch)
        safety_loss = self.update_safety_critic(batch)
        actor_obj = self.update_actor(batch)
        self.update_targets()
        return {"critic_loss": critic_loss, "safety_loss": safety_loss, "actor_objective": actor_obj}
