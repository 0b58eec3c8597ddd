"""Conferrable-example generation over a surrogate/reference ensemble.

The ensemble scores each class by how strongly surrogate models favor it
while reference models do not: softmax(Surr(x) * (1 - Ref(x))), where Surr
and Ref average dropout-perturbed member softmaxes. The ensemble loss is

    alpha * (-log max_t ensemble(x')_t)
  - beta  * H(source(x0), source(x'))
  + gamma * H(source(x'), Surr(x'))

At feedforward desk scale, pure gradient descent on this loss stalls: near
clean inputs the surrogate and reference populations agree almost exactly,
so the informative term is flat there, while the unbounded middle term
rewards walking into regions where every model (references included) flips
with the source. Candidate search therefore explores the epsilon ball first,
scoring sampled points by the dropout-free conferrability of the ensemble's
own members, and only then refines the best find per seed with Adam steps on
the loss, keeping the highest-scoring iterate. Survivors are filtered by the
conferrability threshold and class-balanced into the final set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn, tape
from .attacks import optimize_input
from .errors import ConfigError


@dataclass
class EnsembleModel:
    source: nn.Network
    surrogates: list[nn.Network]
    references: list[nn.Network]
    dropout: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not self.surrogates or not self.references:
            raise ConfigError("ensemble needs at least one surrogate and one reference")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def reseed(self, seed: int) -> None:
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def _draw_masks(self, nets: list[nn.Network], batch: int) -> list[list[np.ndarray] | None]:
        if self.dropout == 0.0:
            return [None] * len(nets)
        return [nn.make_dropout_masks(net, batch, self.dropout, self._rng) for net in nets]


@dataclass
class CemConfig:
    epsilon: float
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    iterations: int = 300
    learning_rate: float = 5e-4
    tau: float = 0.95
    n: int = 100
    max_seeds: int = 500
    dropout: float = 0.3
    explore_samples: int = 512  # ball samples per seed before refinement
    zoom_samples: int = 256  # local samples around the exploration pick
    rng_seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0: the loss must target conferrability")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.n < 1:
            raise ConfigError("fingerprint size n must be >= 1")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.explore_samples < 0 or self.zoom_samples < 0:
            raise ConfigError("sample counts must be >= 0")


@dataclass
class Candidate:
    x0: np.ndarray
    x_adv: np.ndarray
    source_label: int  # source's label on x0
    target_label: int  # source's label on x_adv; the verification key entry
    score: float  # conferrability over the generating ensemble


# ---------------------------------------------------------------------------
# ensemble outputs


def _mean_member_probs_var(
    nets: list[nn.Network], x: tape.Var, masks: list[list[np.ndarray] | None]
) -> tape.Var:
    return tape.mean_vars([nn.probs_var(net, x, m) for net, m in zip(nets, masks)])


def surr_mean(ensemble: EnsembleModel, x: np.ndarray) -> np.ndarray:
    """Mean of dropout-perturbed surrogate softmax outputs; fresh masks per call."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    masks = ensemble._draw_masks(ensemble.surrogates, x.shape[0])
    out = _mean_member_probs_var(ensemble.surrogates, tape.constant(x), masks).value
    return out[0] if out.shape[0] == 1 else out


def ref_mean(ensemble: EnsembleModel, x: np.ndarray) -> np.ndarray:
    """Mean of dropout-perturbed reference softmax outputs; fresh masks per call."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    masks = ensemble._draw_masks(ensemble.references, x.shape[0])
    out = _mean_member_probs_var(ensemble.references, tape.constant(x), masks).value
    return out[0] if out.shape[0] == 1 else out


def _ensemble_rows_var(ensemble: EnsembleModel, x: tape.Var) -> tuple[tape.Var, tape.Var]:
    """(ensemble output, surrogate mean) sharing one set of dropout masks."""
    batch = x.value.shape[0]
    smasks = ensemble._draw_masks(ensemble.surrogates, batch)
    rmasks = ensemble._draw_masks(ensemble.references, batch)
    s = _mean_member_probs_var(ensemble.surrogates, x, smasks)
    r = _mean_member_probs_var(ensemble.references, x, rmasks)
    return tape.softmax_rows(s * (1 - r)), s


def ensemble_forward(ensemble: EnsembleModel, x: np.ndarray) -> np.ndarray:
    """softmax(Surr * (1 - Ref)): the per-class conferrability estimate."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = _ensemble_rows_var(ensemble, tape.constant(x))[0].value
    return out[0] if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# loss


def _loss_rows_var(
    ensemble: EnsembleModel,
    p0: np.ndarray,
    x: tape.Var,
    alpha: float,
    beta: float,
    gamma: float,
) -> tape.Var:
    me, s = _ensemble_rows_var(ensemble, x)
    psrc = nn.probs_var(ensemble.source, x)
    term1 = -tape.log_floored(tape.rowmax(me))
    term2 = nn.cross_entropy_rows_var(p0, psrc)
    term3 = nn.cross_entropy_rows_var(psrc, s)
    return term1 * alpha - term2 * beta + term3 * gamma


def cem_loss(
    ensemble: EnsembleModel,
    x0: np.ndarray,
    x_adv: np.ndarray,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float:
    """Scalar loss for one (x0, x') pair, drawing masks from the ensemble stream."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x_adv = np.atleast_2d(np.asarray(x_adv, dtype=float))
    p0 = nn.softmax(nn.forward_batch(ensemble.source, x0))
    rows = _loss_rows_var(ensemble, p0, tape.constant(x_adv), *weights)
    return float(rows.value.sum())


# ---------------------------------------------------------------------------
# conferrability score


def transfer_rate(models: list[nn.Network], x: np.ndarray, t: int | np.ndarray) -> float | np.ndarray:
    """Fraction of models whose hard label on x equals t (dropout-free)."""
    if not models:
        raise ConfigError("transfer rate over an empty model set")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.stack([nn.predict_labels(m, x) for m in models])  # (M, B)
    rate = (labels == np.asarray(t)).mean(axis=0)
    return float(rate[0]) if rate.shape == (1,) else rate


def conferrability(
    surrogates: list[nn.Network],
    references: list[nn.Network],
    x: np.ndarray,
    t: int | np.ndarray,
) -> float | np.ndarray:
    """Transfer(surrogates) * (1 - Transfer(references)) for target t."""
    ts = transfer_rate(surrogates, x, t)
    tr = transfer_rate(references, x, t)
    return ts * (1.0 - tr)


# ---------------------------------------------------------------------------
# candidate generation


def _balance_by_class(cands: list[Candidate], n: int, num_classes: int) -> list[Candidate]:
    """Round-robin over target classes, best scores first; classes that run
    out leave their quota to the rest."""
    by_class: dict[int, list[Candidate]] = {c: [] for c in range(num_classes)}
    for i, cand in enumerate(cands):
        by_class[cand.target_label].append((cand.score, -i, cand))  # type: ignore
    for lst in by_class.values():
        lst.sort(reverse=True)
    picked: list[Candidate] = []
    while len(picked) < n:
        progress = False
        for c in range(num_classes):
            if len(picked) >= n:
                break
            if by_class[c]:
                picked.append(by_class[c].pop(0)[2])
                progress = True
        if not progress:
            break
    return picked


def optimize_candidates(ensemble: EnsembleModel, seeds: np.ndarray, cfg: CemConfig) -> np.ndarray:
    """Run the ensemble loss optimization for a batch of seed inputs.

    Dropout masks are resampled on every optimizer iteration from the
    ensemble stream, which is reseeded from cfg.rng_seed first.
    """
    X0 = np.atleast_2d(np.asarray(seeds, dtype=float))
    ensemble.reseed(cfg.rng_seed)
    p0 = nn.softmax(nn.forward_batch(ensemble.source, X0))

    def loss_fn(v: tape.Var) -> tape.Var:
        return tape.total_sum(_loss_rows_var(ensemble, p0, v, cfg.alpha, cfg.beta, cfg.gamma))

    return optimize_input(
        loss_fn, X0, epsilon=cfg.epsilon, iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
    )


def generate_candidates(
    ensemble: EnsembleModel, seeds: np.ndarray, cfg: CemConfig
) -> tuple[list[Candidate], bool]:
    """Optimize seeds, keep adversarially flipped results whose dropout-free
    conferrability over the ensemble's own members reaches tau, and balance
    target classes. Seeds are assumed pre-filtered to be correctly classified
    by the source. Returns (candidates, shortfall_flag); the flag is set when
    fewer than cfg.n candidates survive.
    """
    X0 = np.atleast_2d(np.asarray(seeds, dtype=float))[: cfg.max_seeds]
    X_adv = optimize_candidates(ensemble, X0, cfg)
    labels0 = nn.predict_labels(ensemble.source, X0)
    targets = nn.predict_labels(ensemble.source, X_adv)
    flipped = targets != labels0
    scores = np.zeros(len(X0))
    if flipped.any():
        scores[flipped] = conferrability(
            ensemble.surrogates, ensemble.references, X_adv[flipped], targets[flipped]
        )
    keep = flipped & (scores >= cfg.tau)
    cands = [
        Candidate(X0[i].copy(), X_adv[i].copy(), int(labels0[i]), int(targets[i]), float(scores[i]))
        for i in np.flatnonzero(keep)
    ]
    picked = _balance_by_class(cands, cfg.n, ensemble.source.num_classes)
    return picked, len(picked) < cfg.n


@dataclass
class CemAttack:
    """Adapter so the conferrable generator can sit in attack comparisons."""

    ensemble: EnsembleModel
    config: CemConfig
    kind: str = field(default="cem", init=False)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon
