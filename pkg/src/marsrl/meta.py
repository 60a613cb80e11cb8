"""Meta-adaptive controller: state -> softmax weights over the agent ensemble.

The controller is trained on stored per-agent critic values ``Q`` and
predicted risks ``C`` (frozen at collection time). With ``w = softmax(M(s))``
and the weighted averages ``Qbar = w . Q``, ``Cbar = w . C`` over a minibatch,
the loss is

    -( mean(Qbar) / (std(Qbar) + eps) - lambda_meta * mean(Cbar) )

with population statistics taken across the minibatch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import profile_groups
from .errors import BatchTooSmall, BufferUnderfilled, NonFiniteState, ShapeMismatch
from .nn import MLP, Adam, backward, forward


@dataclass(frozen=True)
class MacConfig:
    lambda_meta: float = 0.5
    epsilon: float = 1e-8
    train_freq: int = 1                 # episodes between controller updates
    updates_per_train: int = 1          # minibatch steps per controller update
    lr: float = 1e-3
    buffer_capacity: int = 50_000
    batch_size: int = 128
    hidden_sizes: tuple[int, ...] = (256, 128, 64)

    def __post_init__(self):
        if self.lambda_meta < 0:
            raise ValueError("lambda_meta must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.train_freq < 1 or self.updates_per_train < 0:
            raise ValueError("train_freq must be >= 1 and updates_per_train >= 0")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mac_weights(mac: MLP, state) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NonFiniteState("state contains NaN or inf")
    return softmax(mac(state))


def aggregate(actions, weights) -> np.ndarray:
    """Convex combination of the ``(N, D)`` proposed actions."""
    actions = np.asarray(actions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if actions.ndim != 2 or weights.shape != (actions.shape[0],):
        raise ShapeMismatch(f"{weights.shape} weights for actions of shape {actions.shape}")
    return weights @ actions


def weighted_loss(weights, q_values, c_values, lambda_meta: float, epsilon: float):
    """Controller loss for ``(B, N)`` weights and its gradient w.r.t. the weights."""
    w = np.asarray(weights, dtype=np.float64)
    q = np.asarray(q_values, dtype=np.float64)
    c = np.asarray(c_values, dtype=np.float64)
    b = w.shape[0]
    if b < 2:
        raise BatchTooSmall("the Sharpe-like term needs at least two records")
    qbar = np.sum(w * q, axis=1)
    cbar = np.sum(w * c, axis=1)
    mean = qbar.mean()
    std = qbar.std()
    denom = std + epsilon
    loss = -(mean / denom - lambda_meta * cbar.mean())
    dstd = (qbar - mean) / (b * std) if std > 0 else np.zeros(b)
    d_qbar = -(1.0 / (b * denom) - mean / denom ** 2 * dstd)
    d_cbar = np.full(b, lambda_meta / b)
    grad_w = d_qbar[:, None] * q + d_cbar[:, None] * c
    return float(loss), grad_w


def softmax_backward(w: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    return w * (grad_w - np.sum(w * grad_w, axis=1, keepdims=True))


class MacBuffer:
    """Ring buffer of ``(state, Q per agent, C per agent)`` records."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.states: list[np.ndarray] = []
        self.q: list[np.ndarray] = []
        self.c: list[np.ndarray] = []
        self._next = 0

    def __len__(self):
        return len(self.states)

    def push(self, state, q_values, c_values) -> None:
        rec = (np.asarray(state, float), np.asarray(q_values, float), np.asarray(c_values, float))
        if len(self.states) < self.capacity:
            self.states.append(rec[0])
            self.q.append(rec[1])
            self.c.append(rec[2])
        else:
            i = self._next
            self.states[i], self.q[i], self.c[i] = rec
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int):
        n = len(self.states)
        if batch_size > n:
            raise BufferUnderfilled(f"controller buffer holds {n} < batch size {batch_size}")
        idx = self.rng.choice(n, size=batch_size, replace=False)
        return (np.stack([self.states[i] for i in idx]), np.stack([self.q[i] for i in idx]),
                np.stack([self.c[i] for i in idx]))


class MetaController:
    def __init__(self, net: MLP, config: MacConfig, buffer: MacBuffer, opt: Adam | None = None):
        self.net = net
        self.config = config
        self.buffer = buffer
        self.opt = opt or Adam(lr=config.lr)

    @classmethod
    def create(cls, state_dim: int, n_agents: int, config: MacConfig, init_rng, buffer_rng):
        net = MLP.init([state_dim, *config.hidden_sizes, n_agents], init_rng, "softmax-deferred")
        return cls(net, config, MacBuffer(config.buffer_capacity, buffer_rng))

    @property
    def n_agents(self) -> int:
        return self.net.out_dim

    def weights(self, state) -> np.ndarray:
        return mac_weights(self.net, state)

    def loss_and_grads(self, states, q_values, c_values):
        logits, cache = forward(self.net, states)
        w = softmax(logits)
        loss, grad_w = weighted_loss(w, q_values, c_values, self.config.lambda_meta,
                                     self.config.epsilon)
        grads, _ = backward(self.net, cache, softmax_backward(w, grad_w))
        return loss, grads

    def update(self, states, q_values, c_values) -> float:
        """One Adam step on the controller; returns the loss before the step."""
        loss, grads = self.loss_and_grads(states, q_values, c_values)
        self.opt.step(self.net, grads)
        return loss

    def train(self) -> list[float]:
        """``updates_per_train`` minibatch updates from the buffer (none if underfilled)."""
        cfg = self.config
        if len(self.buffer) < max(cfg.batch_size, 2):
            return []
        return [self.update(*self.buffer.sample(cfg.batch_size)) for _ in range(cfg.updates_per_train)]


def group_weights(weights) -> np.ndarray:
    """Sum of weight mass on the conservative, neutral and aggressive thirds."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    return np.stack([w[:, g].sum(axis=1) for g in profile_groups(w.shape[1])], axis=1)


def write_weight_trace(dates, weights, path) -> None:
    """``date,w_1..w_N,conservative,neutral,aggressive`` per step."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    groups = group_weights(weights)
    n = weights.shape[1]
    header = ["date"] + [f"w_{i + 1}" for i in range(n)] + ["conservative", "neutral", "aggressive"]
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for d, w, g in zip(dates, weights, groups):
            out.writerow([str(d)] + [repr(float(x)) for x in w] + [repr(float(x)) for x in g])
