"""Feedforward classifier engine: inference, training, and gradients.

Networks are plain dense stacks (relu hidden layers, linear output) held
as numpy arrays. Parameter gradients for training use a hand-written
batched backward pass; gradients with respect to *inputs* go through the
:mod:`confprint.tape` graph so callers can differentiate arbitrary
compositions of forwards, softmaxes and cross-entropies.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape
from .errors import ConfigError, ShapeError

LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# types


@dataclass
class Layer:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)
    activation: str  # "relu" | "linear"

    def __post_init__(self):
        if self.activation not in ("relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class Network:
    """A dense feedforward classifier; the last layer's width is the class count."""

    layers: list[Layer]
    input_dim: int
    num_classes: int
    arch_id: str

    def __post_init__(self):
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            out, fan_in = layer.weight.shape
            if fan_in != width:
                raise ShapeError(
                    f"layer {i} expects input width {fan_in}, previous width is {width}"
                )
            if layer.bias.shape != (out,):
                raise ShapeError(f"layer {i} bias shape {layer.bias.shape} != ({out},)")
            width = out
        if width != self.num_classes:
            raise ShapeError(f"final width {width} != num_classes {self.num_classes}")

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def hidden_widths(self) -> list[int]:
        return [layer.weight.shape[0] for layer in self.layers[:-1]]


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    label: int


@dataclass
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam: AdamParams = field(default_factory=AdamParams)
    dropout_rate: float = 0.0
    rng_seed: int = 0
    label_mode: str = "hard"  # "hard" class indices | "soft" distributions

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.label_mode not in ("hard", "soft"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# construction and serialization


def init_network(
    input_dim: int,
    hidden: list[int],
    num_classes: int,
    seed: int,
    arch_id: str | None = None,
) -> Network:
    """Fresh network with uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    widths = [input_dim] + list(hidden) + [num_classes]
    layers = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        bias = np.zeros(fan_out)
        act = "linear" if i == len(widths) - 2 else "relu"
        layers.append(Layer(weight, bias, act))
    if arch_id is None:
        arch_id = "mlp-" + "-".join(str(w) for w in widths)
    return Network(layers, input_dim, num_classes, arch_id)


def clone_network(net: Network) -> Network:
    return copy.deepcopy(net)


def network_hash(net: Network) -> str:
    h = hashlib.sha256()
    h.update(net.arch_id.encode())
    for p in net.parameters():
        h.update(np.ascontiguousarray(p, dtype=float).tobytes())
    return h.hexdigest()[:16]


def save_network(net: Network, path: str | Path, provenance: dict | None = None) -> None:
    meta = {
        "version": 1,
        "arch_id": net.arch_id,
        "input_dim": net.input_dim,
        "num_classes": net.num_classes,
        "activations": [layer.activation for layer in net.layers],
        "provenance": provenance or {},
    }
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"W{i}"] = layer.weight
        arrays[f"b{i}"] = layer.bias
    np.savez(path, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_network(path: str | Path) -> tuple[Network, dict]:
    """Returns (network, provenance); parameters round-trip bit-exactly."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        layers = []
        for i, act in enumerate(meta["activations"]):
            layers.append(Layer(z[f"W{i}"].astype(float), z[f"b{i}"].astype(float), act))
    net = Network(layers, meta["input_dim"], meta["num_classes"], meta["arch_id"])
    return net, meta["provenance"]


# ---------------------------------------------------------------------------
# inference


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def make_dropout_masks(
    net: Network, batch: int, rate: float, rng: np.random.Generator
) -> list[np.ndarray]:
    """Inverted-dropout masks for each hidden layer: survivors scaled by 1/(1-rate)."""
    masks = []
    for layer in net.layers[:-1]:
        width = layer.weight.shape[0]
        keep = rng.random((batch, width)) >= rate
        masks.append(keep / (1.0 - rate))
    return masks


def forward_batch(
    net: Network, X: np.ndarray, dropout_masks: list[np.ndarray] | None = None
) -> np.ndarray:
    """Logits for a (B, input_dim) batch; masks multiply hidden activations."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"expected (B, {net.input_dim}) inputs, got {X.shape}")
    a = X
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if dropout_masks is not None and i < last:
            a = a * dropout_masks[i]
    return a


def forward(
    net: Network,
    x: np.ndarray,
    dropout: tuple[float, np.random.Generator] | None = None,
) -> Prediction:
    """Single-input inference; deterministic when dropout is absent."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise ShapeError(f"expected input of shape ({net.input_dim},), got {x.shape}")
    masks = None
    if dropout is not None:
        rate, rng = dropout
        if rate > 0:
            masks = make_dropout_masks(net, 1, rate, rng)
    logits = forward_batch(net, x[None], masks)[0]
    probs = softmax(logits)
    return Prediction(logits=logits, probs=probs, label=int(np.argmax(probs)))


def predict_probs(net: Network, X: np.ndarray) -> np.ndarray:
    return softmax(forward_batch(net, X))


def predict_labels(net: Network, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(net, X), axis=-1)


def accuracy(net: Network, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_labels(net, X) == np.asarray(y)))


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """-sum(p * log(max(q, floor))) for a target distribution p and prediction q."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return float(-(p * np.log(np.maximum(q, LOG_FLOOR))).sum())


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# gradients


def batch_loss(
    net: Network,
    X: np.ndarray,
    targets: np.ndarray,
    dropout_masks: list[np.ndarray] | None = None,
) -> float:
    """Mean cross-entropy of softmax outputs against target distributions."""
    probs = softmax(forward_batch(net, X, dropout_masks))
    logq = np.log(np.maximum(probs, LOG_FLOOR))
    return float(-(targets * logq).sum(axis=-1).mean())


def grad_params(
    net: Network,
    X: np.ndarray,
    targets: np.ndarray,
    dropout_masks: list[np.ndarray] | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of batch_loss w.r.t. every (weight, bias), same shapes as the layers."""
    X = np.asarray(X, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if X.shape[0] == 0:
        raise ConfigError("gradient of an empty batch")
    if targets.shape != (X.shape[0], net.num_classes):
        raise ShapeError(
            f"targets shape {targets.shape} != ({X.shape[0]}, {net.num_classes})"
        )
    last = len(net.layers) - 1
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [X]
    a = X
    for i, layer in enumerate(net.layers):
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if dropout_masks is not None and i < last:
            a = a * dropout_masks[i]
        acts.append(a)

    probs = softmax(acts[-1])
    d = (probs - targets) / X.shape[0]  # d loss / d logits
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore
    for i in range(last, -1, -1):
        layer = net.layers[i]
        if dropout_masks is not None and i < last:
            d = d * dropout_masks[i]
        if layer.activation == "relu":
            d = d * (pre[i] > 0)
        grads[i] = (d.T @ acts[i], d.sum(axis=0))
        if i > 0:
            d = d @ layer.weight
    return grads


def logits_var(
    net: Network, x: tape.Var, dropout_masks: list[np.ndarray] | None = None
) -> tape.Var:
    """Tape forward pass producing the logits of a (B, input_dim) Var."""
    if x.value.ndim != 2 or x.value.shape[1] != net.input_dim:
        raise ShapeError(f"expected (B, {net.input_dim}) inputs, got {x.value.shape}")
    a = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        a = tape.affine(a, layer.weight, layer.bias)
        if layer.activation == "relu":
            a = tape.relu(a)
        if dropout_masks is not None and i < last:
            a = a * dropout_masks[i]
    return a


def probs_var(
    net: Network, x: tape.Var, dropout_masks: list[np.ndarray] | None = None
) -> tape.Var:
    return tape.softmax_rows(logits_var(net, x, dropout_masks))


def cross_entropy_rows_var(p, q: tape.Var) -> tape.Var:
    """Row-wise -sum(p * log q) where p is a constant array or a Var."""
    logq = tape.log_floored(q)
    return -tape.rowsum(p * logq if isinstance(p, tape.Var) else logq * p)


def grad_input(loss_fn, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar tape loss with respect to the input.

    ``loss_fn`` receives a (B, input_dim) Var and must return a scalar Var;
    a 1-D ``x`` is promoted to a single row and the gradient squeezed back.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    leaf = tape.Var(x[None] if single else x)
    loss = loss_fn(leaf)
    loss.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return g[0] if single else g


# ---------------------------------------------------------------------------
# training


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: list[np.ndarray]):
        self.cfg = cfg
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
            self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        a = self.cfg.adam
        self.t += 1
        bc1 = 1.0 - a.beta1**self.t
        bc2 = 1.0 - a.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = a.beta1 * self.m[i] + (1 - a.beta1) * g
            self.v[i] = a.beta2 * self.v[i] + (1 - a.beta2) * g * g
            p -= lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + a.eps_num)


def train(
    net: Network,
    X: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    trainable_layers: set[int] | None = None,
    weight_masks: list[np.ndarray] | None = None,
) -> Network:
    """Minibatch training on cross-entropy; returns a new network.

    Labels are class indices (cfg.label_mode "hard") or row distributions
    ("soft"). Shuffling, dropout and updates all derive from cfg.rng_seed,
    so equal seeds give bit-identical results. ``trainable_layers`` limits
    updates to the listed layer indices; ``weight_masks`` pins the masked
    weight entries to zero after every update (used by pruning).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n == 0:
        raise ConfigError("training on an empty dataset")
    if cfg.label_mode == "hard":
        T = one_hot(np.asarray(targets), net.num_classes)
    else:
        T = np.asarray(targets, dtype=float)
        if T.shape != (n, net.num_classes):
            raise ShapeError(f"soft targets shape {T.shape} != ({n}, {net.num_classes})")

    out = clone_network(net)
    if cfg.epochs == 0:
        return out
    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    params = out.parameters()
    opt = _Optimizer(cfg, params)
    update = (
        [True] * len(out.layers)
        if trainable_layers is None
        else [i in trainable_layers for i in range(len(out.layers))]
    )

    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            masks = (
                make_dropout_masks(out, len(idx), cfg.dropout_rate, rng)
                if cfg.dropout_rate > 0
                else None
            )
            grads = grad_params(out, X[idx], T[idx], masks)
            flat = []
            for i, (dw, db) in enumerate(grads):
                if not update[i]:
                    dw = np.zeros_like(dw)
                    db = np.zeros_like(db)
                flat.extend([dw, db])
            opt.step(params, flat)
            if weight_masks is not None:
                for layer, keep in zip(out.layers, weight_masks):
                    layer.weight *= keep
    return out
