"""Small dense-network substrate: forward/backward, softmax, losses and Adam.

Everything is float64 numpy.  Networks are stacks of dense layers with a
ReLU or identity activation; gradients are computed by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input whose shape does not match the network."""


class StaleCacheError(RuntimeError):
    """Backward called with a cache from another forward pass or parameter state."""


class TrainingDivergence(FloatingPointError):
    """A non-finite loss or gradient showed up during training."""


@dataclass
class Network:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} input dim {w.shape[1]} != previous output "
                                 f"{self.weights[k - 1].shape[0]}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k}: non-finite parameter entries")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def latent_dim(self) -> int:
        return self.out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        for k in range(len(self.weights)):
            self.weights[k][...] = arrays[2 * k]
            self.biases[k][...] = arrays[2 * k + 1]
        self.version += 1

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                       list(self.activations))

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class GradientSet:
    """Gradients congruent with a Network's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: list[np.ndarray]) -> "GradientSet":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    @classmethod
    def zeros_like(cls, net: Network) -> "GradientSet":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def scale(self, a: float) -> "GradientSet":
        return GradientSet.from_arrays([a * g for g in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.arrays())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    net_id: int
    version: int


def init_network(dims: list[int], activations: list[str], rng: np.random.Generator) -> Network:
    """Glorot-uniform weights, zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(weights, biases, list(activations))


def mlp(in_dim: int, hidden: list[int], out_dim: int, rng: np.random.Generator,
        out_activation: str = "identity") -> Network:
    dims = [in_dim, *hidden, out_dim]
    acts = ["relu"] * len(hidden) + [out_activation]
    return init_network(dims, acts, rng)


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of shape (n, {net.in_dim}), got {x.shape}")
    inputs, pre = [], []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    return h, ForwardCache(inputs, pre, id(net), net.version)


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    return forward(net, x)[0]


def backward(net: Network, cache: ForwardCache | None, upstream: np.ndarray,
             return_input_grad: bool = False):
    """Gradients of the loss whose derivative w.r.t. the output is ``upstream``.

    With ``return_input_grad`` the gradient w.r.t. the network input is
    returned as a second value (needed when networks are chained).
    """
    if cache is None or cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("backward needs the cache of the latest forward on this network")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} != output {cache.pre[-1].shape}")
    gw = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == "relu":
            g = g * (cache.pre[k] > 0)
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        if k or return_input_grad:
            g = g @ net.weights[k]
    grads = GradientSet(gw, gb)
    return (grads, g) if return_input_grad else grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def squared_error(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_update(grads: list[np.ndarray], state: OptimizerState) -> list[np.ndarray]:
    """Advance the moment estimates and return the bias-corrected parameter deltas.

    The deltas are to be *added* to the parameters.
    """
    if len(grads) != len(state.m):
        raise ShapeError("gradient list does not match optimizer state")
    for g, m in zip(grads, state.m):
        if g.shape != m.shape:
            raise ShapeError(f"gradient shape {g.shape} != state shape {m.shape}")
        if not np.isfinite(g).all():
            raise TrainingDivergence("non-finite gradient entry")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    deltas = []
    for g, m, v in zip(grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        deltas.append(-state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
    return deltas


def apply_deltas(params: list[np.ndarray], deltas: list[np.ndarray]) -> None:
    for p, d in zip(params, deltas):
        p += d


def adam_step(net: Network, grads: GradientSet, state: OptimizerState) -> tuple[Network, OptimizerState]:
    """One in-place Adam update of ``net``; returns (net, state) for chaining."""
    params = net.params()
    if len(params) != len(state.m):
        raise ShapeError("network does not match optimizer state")
    apply_deltas(params, adam_update(grads.arrays(), state))
    net.version += 1
    return net, state


def fit_supervised(net: Network, x: np.ndarray, y: np.ndarray, loss_fn, *, epochs: int,
                   batch_size: int, lr: float, rng: np.random.Generator) -> list[float]:
    """Minibatch Adam training of ``net`` on ``loss_fn(outputs, y_batch)``.

    Returns the per-epoch mean loss.
    """
    state = OptimizerState.for_params(net.params(), lr=lr)
    n = x.shape[0]
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = forward(net, x[idx])
            loss, g = loss_fn(out, y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss {loss}")
            adam_step(net, backward(net, cache, g), state)
            total += loss * len(idx)
        trace.append(total / max(n, 1))
    return trace


def network_to_arrays(net: Network, prefix: str) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"dims": net.dims, "activations": list(net.activations)}
    arrays = {}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}.W{k}"] = w
        arrays[f"{prefix}.b{k}"] = b
    return meta, arrays


def network_from_arrays(meta: dict, arrays, prefix: str) -> Network:
    n_layers = len(meta["activations"])
    return Network([np.array(arrays[f"{prefix}.W{k}"]) for k in range(n_layers)],
                   [np.array(arrays[f"{prefix}.b{k}"]) for k in range(n_layers)],
                   list(meta["activations"]))


def save_checkpoint(path: str | Path, networks: dict[str, Network], header: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write named networks plus a JSON header to one ``.npz`` file."""
    meta = {"version": CHECKPOINT_VERSION, "header": header or {}, "networks": {}}
    arrays = {}
    for name, net in networks.items():
        meta["networks"][name], a = network_to_arrays(net, name)
        arrays.update(a)
    for name, arr in (extra or {}).items():
        arrays[f"extra.{name}"] = arr
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Network], dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path} is not a checkpoint (no metadata record)")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        nets = {name: network_from_arrays(m, z, name) for name, m in meta["networks"].items()}
        extra = {k[len("extra."):]: np.array(z[k]) for k in z.files if k.startswith("extra.")}
    return nets, meta["header"], extra
