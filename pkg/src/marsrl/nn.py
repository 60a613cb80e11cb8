"""Small fully connected networks with hand-written backprop.

Everything is float64 numpy. A network is an :class:`MLP` holding a list of
``(out, in)`` weight matrices and bias vectors; hidden layers use ReLU and the
output layer applies one of ``linear``, ``tanh``, ``sigmoid`` or
``softmax-deferred`` (raw logits; the caller applies the softmax).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteGradient, NonFiniteInput, ShapeMismatch

OUTPUT_ACTIVATIONS = ("linear", "tanh", "sigmoid", "softmax-deferred")
CHECKPOINT_FORMAT = "marsrl-mlp"
CHECKPOINT_VERSION = 1


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "linear"
    hidden_activation: str = "relu"

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.hidden_activation != "relu":
            raise ValueError("only relu hidden layers are supported")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} expects {w.shape[1]} inputs, "
                                    f"previous layer emits {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, output_activation="linear",
             final_bound: float | None = None) -> "MLP":
        """Uniform fan-in initialisation, bound ``1/sqrt(fan_in)`` per layer.

        ``final_bound`` overrides the bound of the last layer (used to start
        actors near the zero action).
        """
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ShapeMismatch("an MLP needs at least input and output sizes")
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            if final_bound is not None and i == len(sizes) - 2:
                bound = final_bound
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(rng.uniform(-bound, bound, size=n_out))
        return cls(weights, biases, output_activation)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the order ``w0, b0, w1, b1, ...``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output_activation, self.hidden_activation)

    def __call__(self, x):
        return forward(self, x)[0]

    def same_architecture(self, other: "MLP") -> bool:
        return (self.sizes == other.sizes
                and self.output_activation == other.output_activation)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]    # input to each layer
    pre: list[np.ndarray]       # pre-activations of each layer
    output: np.ndarray
    squeeze: bool


def forward(net: MLP, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate ``net`` on a vector or a ``(batch, in)`` matrix."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeMismatch(f"input shape {x.shape} does not fit a {net.in_dim}-input network")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("network input contains NaN or inf")
    inputs, pre = [], []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
        elif net.output_activation == "tanh":
            h = np.tanh(z)
        elif net.output_activation == "sigmoid":
            h = _sigmoid(z)
        else:
            h = z
    cache = ForwardCache(inputs, pre, h, squeeze)
    return (h[0] if squeeze else h), cache


def backward(net: MLP, cache: ForwardCache, grad_output) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass.

    Returns parameter gradients (same order as :meth:`MLP.params`) of
    ``sum(grad_output * output)`` and the gradient with respect to the input.
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ShapeMismatch(f"grad_output shape {g.shape} != output shape {cache.output.shape}")
    last = len(net.weights) - 1
    if net.output_activation == "tanh":
        g = g * (1.0 - cache.output ** 2)
    elif net.output_activation == "sigmoid":
        g = g * cache.output * (1.0 - cache.output)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for i in range(last, -1, -1):
        if i < last:
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, net: MLP, grads: list[np.ndarray]) -> None:
        """Apply one bias-corrected Adam update to ``net`` in place."""
        params = net.params()
        if len(grads) != len(params):
            raise ShapeMismatch(f"{len(grads)} gradients for {len(params)} parameters")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeMismatch(f"gradient {g.shape} for parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains NaN or inf")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def soft_update(target: MLP, source: MLP, tau: float) -> MLP:
    """Polyak averaging ``target <- (1 - tau) * target + tau * source`` in place."""
    if not target.same_architecture(source):
        raise ShapeMismatch(f"cannot blend {target.sizes} with {source.sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for t, s in zip(target.params(), source.params()):
        if tau == 1.0:
            t[...] = s
        elif tau > 0.0:
            t *= 1.0 - tau
            t += tau * s
    return target


# checkpoints ----------------------------------------------------------------

def mlp_to_dict(net: MLP) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
        "sizes": net.sizes,
        "layers": [
            {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def mlp_from_dict(doc: dict) -> MLP:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not an MLP checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    weights, biases = [], []
    for layer in doc["layers"]:
        shape = tuple(layer["shape"])
        weights.append(np.asarray(layer["weight"], dtype=np.float64).reshape(shape))
        biases.append(np.asarray(layer["bias"], dtype=np.float64))
    return MLP(weights, biases, doc["output_activation"], doc["hidden_activation"])


def save_mlp(net: MLP, path) -> None:
    Path(path).write_text(json.dumps(mlp_to_dict(net), indent=1) + "\n")


def load_mlp(path) -> MLP:
    return mlp_from_dict(json.loads(Path(path).read_text()))
