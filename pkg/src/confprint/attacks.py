"""Baseline adversarial attacks constrained to an L-infinity ball with [0,1]
domain clamping, plus the Adam-based input optimizer shared with the
conferrable-example generator.

Conventions: sign(0) = 0, zero random start for the iterative attacks, and
a zero budget returns the input unchanged. All attacks are deterministic
functions of (model, input, spec).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tape
from .errors import ConfigError, OptimizationError

ATTACK_KINDS = ("fgm", "bim", "pgd", "cw_linf")


@dataclass
class AttackSpec:
    kind: str
    epsilon: float
    iterations: int = 1
    step_size: float = 0.0
    confidence: float = 0.5  # cw_linf margin k
    learning_rate: float = 0.01  # cw_linf optimizer
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.kind in ("bim", "pgd") and self.step_size > self.epsilon:
            raise ConfigError("step_size must not exceed epsilon")


def fgm_spec(epsilon: float, rng_seed: int = 0) -> AttackSpec:
    """Single signed-gradient step of size epsilon."""
    return AttackSpec("fgm", epsilon, iterations=1, step_size=epsilon, rng_seed=rng_seed)


def bim_spec(epsilon: float, iterations: int = 10, step_size: float | None = None, rng_seed: int = 0) -> AttackSpec:
    step = min(0.01, epsilon) if step_size is None else step_size
    return AttackSpec("bim", epsilon, iterations=iterations, step_size=step, rng_seed=rng_seed)


def pgd_spec(epsilon: float, iterations: int = 10, step_size: float | None = None, rng_seed: int = 0) -> AttackSpec:
    step = min(0.01, epsilon) if step_size is None else step_size
    return AttackSpec("pgd", epsilon, iterations=iterations, step_size=step, rng_seed=rng_seed)


def cw_spec(epsilon: float, iterations: int = 50, confidence: float = 0.5, learning_rate: float = 0.01, rng_seed: int = 0) -> AttackSpec:
    return AttackSpec(
        "cw_linf", epsilon, iterations=iterations,
        confidence=confidence, learning_rate=learning_rate, rng_seed=rng_seed,
    )


@dataclass
class AdversarialExample:
    x0: np.ndarray
    x_adv: np.ndarray
    source_label: int
    adv_label: int
    success: bool


def _project(X: np.ndarray, X0: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(X, X0 - epsilon, X0 + epsilon), 0.0, 1.0)


def _ce_grad(net: nn.Network, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of summed cross-entropy against the given labels w.r.t. X."""
    T = nn.one_hot(labels, net.num_classes)

    def loss_fn(v):
        return tape.total_sum(nn.cross_entropy_rows_var(T, nn.probs_var(net, v)))

    return nn.grad_input(loss_fn, X)


def _signed_step_attack(net: nn.Network, X0: np.ndarray, spec: AttackSpec) -> np.ndarray:
    labels = nn.predict_labels(net, X0)
    step = spec.epsilon if spec.kind == "fgm" else spec.step_size
    X = X0.copy()
    for _ in range(spec.iterations):
        g = _ce_grad(net, X, labels)
        X = _project(X + step * np.sign(g), X0, spec.epsilon)
    return X


def _margin_loss_rows(net: nn.Network, v: tape.Var, labels: np.ndarray, k: float) -> tape.Var:
    """max(logit_true - max_{j != true} logit_j + k, 0) per row."""
    logits = nn.logits_var(net, v)
    true = tape.take_col(logits, labels)
    mask = np.zeros((len(labels), net.num_classes))
    mask[np.arange(len(labels)), labels] = -1e30
    other = tape.rowmax(logits + mask)
    return tape.relu(true - other + k)


def _cw_attack(net: nn.Network, X0: np.ndarray, spec: AttackSpec) -> np.ndarray:
    labels = nn.predict_labels(net, X0)
    k = spec.confidence

    def loss_rows(X):
        logits = nn.forward_batch(net, X)
        true = logits[np.arange(len(labels)), labels]
        masked = logits.copy()
        masked[np.arange(len(labels)), labels] = -np.inf
        return np.maximum(true - masked.max(axis=1) + k, 0.0)

    best = X0.copy()
    best_loss = loss_rows(X0)
    X = X0.copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    b1, b2, eps_num = 0.9, 0.999, 1e-8
    for t in range(1, spec.iterations + 1):
        def loss_fn(var):
            return tape.total_sum(_margin_loss_rows(net, var, labels, k))

        g = nn.grad_input(loss_fn, X)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        X = X - spec.learning_rate * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps_num)
        X = _project(X, X0, spec.epsilon)
        cur = loss_rows(X)
        better = cur < best_loss
        best[better] = X[better]
        best_loss[better] = cur[better]
    return best


def run_attack_batch(net: nn.Network, X0: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Adversarial versions of a (B, input_dim) batch under the spec's budget."""
    X0 = np.asarray(X0, dtype=float)
    if spec.epsilon == 0.0:
        return X0.copy()
    if spec.kind in ("fgm", "bim", "pgd"):
        return _signed_step_attack(net, X0, spec)
    return _cw_attack(net, X0, spec)


def _wrap(net: nn.Network, x0: np.ndarray, x_adv: np.ndarray) -> AdversarialExample:
    source_label = int(nn.predict_labels(net, x0[None])[0])
    adv_label = int(nn.predict_labels(net, x_adv[None])[0])
    return AdversarialExample(
        x0=x0, x_adv=x_adv, source_label=source_label,
        adv_label=adv_label, success=adv_label != source_label,
    )


def fgm(net: nn.Network, x0: np.ndarray, spec: AttackSpec) -> AdversarialExample:
    x0 = np.asarray(x0, dtype=float)
    return _wrap(net, x0, run_attack_batch(net, x0[None], spec)[0])


def pgd(net: nn.Network, x0: np.ndarray, spec: AttackSpec) -> AdversarialExample:
    x0 = np.asarray(x0, dtype=float)
    return _wrap(net, x0, run_attack_batch(net, x0[None], spec)[0])


bim = pgd  # zero random start makes them the same procedure


def cw_linf(net: nn.Network, x0: np.ndarray, spec: AttackSpec) -> AdversarialExample:
    x0 = np.asarray(x0, dtype=float)
    return _wrap(net, x0, run_attack_batch(net, x0[None], spec)[0])


def optimize_input(
    loss_fn,
    x0: np.ndarray,
    epsilon: float,
    iterations: int = 300,
    learning_rate: float = 5e-4,
    adam: nn.AdamParams | None = None,
) -> np.ndarray:
    """Adam descent on the input with per-step projection to the epsilon ball
    around x0 and the [0,1] box. ``loss_fn`` maps a (B, dim) Var to a scalar
    Var whose per-row terms are independent; a 1-D x0 is promoted to one row.
    """
    adam = adam or nn.AdamParams()
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    X0 = x0[None] if single else x0
    X = X0.copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    for t in range(1, iterations + 1):
        leaf = tape.Var(X)
        loss = loss_fn(leaf)
        if not np.isfinite(loss.value):
            raise OptimizationError(f"non-finite loss at iteration {t}")
        loss.backward()
        g = leaf.grad if leaf.grad is not None else np.zeros_like(X)
        m = adam.beta1 * m + (1 - adam.beta1) * g
        v = adam.beta2 * v + (1 - adam.beta2) * g * g
        step = (m / (1 - adam.beta1**t)) / (np.sqrt(v / (1 - adam.beta2**t)) + adam.eps_num)
        X = _project(X - learning_rate * step, X0, epsilon)
    return X[0] if single else X
