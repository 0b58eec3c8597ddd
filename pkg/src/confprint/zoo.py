"""Model populations: the source, ensemble surrogates/references used during
fingerprint generation, and held-out populations used only for evaluation.

Surrogates train on labels produced by their teacher and never see ground
truth; references train on ground truth and never see teacher labels. Every
record carries provenance (label source, seeds, accuracy) so that discipline
is auditable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError

KINDS = ("source", "surrogate", "reference")
MEMBERSHIPS = ("cem_ensemble", "holdout", "suspect", "none")


@dataclass
class ModelRecord:
    network: nn.Network
    kind: str  # source | surrogate | reference
    lineage: str  # teacher model hash for surrogates, "oracle" otherwise
    membership: str = "none"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.membership not in MEMBERSHIPS:
            raise ConfigError(f"unknown membership {self.membership!r}")
        if self.kind == "reference" and self.lineage != "oracle":
            raise ConfigError("reference models must have lineage 'oracle'")
        if self.kind == "surrogate" and self.lineage == "oracle":
            raise ConfigError("surrogate models must name a teacher lineage")

    @property
    def model_id(self) -> str:
        return nn.network_hash(self.network)


@dataclass
class ModelZoo:
    source: ModelRecord
    records: list[ModelRecord] = field(default_factory=list)

    def _pick(self, kind: str, membership: str) -> list[ModelRecord]:
        return [r for r in self.records if r.kind == kind and r.membership == membership]

    def ensemble_surrogates(self) -> list[ModelRecord]:
        return self._pick("surrogate", "cem_ensemble")

    def ensemble_references(self) -> list[ModelRecord]:
        return self._pick("reference", "cem_ensemble")

    def holdout_surrogates(self) -> list[ModelRecord]:
        return self._pick("surrogate", "holdout")

    def holdout_references(self) -> list[ModelRecord]:
        return self._pick("reference", "holdout")


def teacher_soft_labels(teacher: nn.Network, X: np.ndarray) -> np.ndarray:
    return nn.softmax(nn.forward_batch(teacher, X))


def train_reference(
    dataset: Dataset,
    cfg: nn.TrainConfig,
    hidden: list[int],
    membership: str = "none",
    split: str = "defender_train",
) -> ModelRecord:
    """A model trained from scratch on ground-truth labels."""
    X, y = dataset.subset(split) if dataset.split is not None else (dataset.inputs, dataset.labels)
    net = nn.init_network(dataset.inputs.shape[1], hidden, dataset.num_classes, seed=cfg.rng_seed)
    trained = nn.train(net, X, y, cfg)
    prov = {
        "kind": "reference",
        "label_source": "oracle",
        "train_split": split,
        "seed": cfg.rng_seed,
        "epochs": cfg.epochs,
        "hidden": list(hidden),
    }
    if dataset.split is not None:
        Xt, yt = dataset.subset("test")
        prov["test_accuracy"] = nn.accuracy(trained, Xt, yt)
    return ModelRecord(trained, "reference", "oracle", membership, prov)


def train_surrogate(
    teacher: nn.Network,
    inputs: np.ndarray,
    mode: str,
    cfg: nn.TrainConfig,
    hidden: list[int],
    membership: str = "none",
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> ModelRecord:
    """A model retrained from scratch on the teacher's outputs (never ground truth)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[0] == 0:
        raise ConfigError("surrogate training needs a non-empty input set")
    if mode not in ("soft", "hard"):
        raise ConfigError(f"unknown label mode {mode!r}")
    teacher_hash = nn.network_hash(teacher)
    if mode == "soft":
        targets = teacher_soft_labels(teacher, inputs)
        cfg = nn.TrainConfig(**{**cfg.__dict__, "label_mode": "soft"})
    else:
        targets = nn.predict_labels(teacher, inputs)
        cfg = nn.TrainConfig(**{**cfg.__dict__, "label_mode": "hard"})
    net = nn.init_network(inputs.shape[1], hidden, teacher.num_classes, seed=cfg.rng_seed)
    trained = nn.train(net, inputs, targets, cfg)
    prov = {
        "kind": "surrogate",
        "label_source": f"teacher:{teacher_hash}",
        "label_mode": mode,
        "seed": cfg.rng_seed,
        "epochs": cfg.epochs,
        "hidden": list(hidden),
    }
    if eval_data is not None:
        Xe, ye = eval_data
        prov["test_accuracy"] = nn.accuracy(trained, Xe, ye)
        prov["teacher_agreement"] = float(
            np.mean(nn.predict_labels(trained, Xe) == nn.predict_labels(teacher, Xe))
        )
    return ModelRecord(trained, "surrogate", f"teacher:{teacher_hash}", membership, prov)


def populate(
    source: nn.Network,
    dataset: Dataset,
    c1: int,
    c2: int,
    holdout_c1: int,
    holdout_c2: int,
    cfg: nn.TrainConfig,
    hidden: list[int] | None = None,
    holdout_hidden: list[list[int]] | None = None,
    source_provenance: dict | None = None,
) -> ModelZoo:
    """Train c1 ensemble surrogates + c2 ensemble references of the source,
    plus held-out populations, all from distinct derived seeds.

    Ensemble members share the source architecture; holdout members may cycle
    through alternative hidden widths to emulate cross-architecture suspects.
    """
    if c1 < 1 or c2 < 1:
        raise ConfigError("c1 and c2 must be >= 1")
    hidden = hidden if hidden is not None else source.hidden_widths()
    Xd, _ = dataset.subset("defender_train")
    Xt, yt = dataset.subset("test")
    seeds = np.random.SeedSequence(cfg.rng_seed).generate_state(
        2 * (c1 + c2 + holdout_c1 + holdout_c2)
    )
    seed_iter = iter(int(s) for s in seeds)

    def cfg_with_seed(seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(**{**cfg.__dict__, "rng_seed": seed})

    records: list[ModelRecord] = []
    for i in range(c1):
        records.append(
            train_surrogate(
                source, Xd, "soft", cfg_with_seed(next(seed_iter)), hidden,
                membership="cem_ensemble", eval_data=(Xt, yt),
            )
        )
    for i in range(c2):
        records.append(
            train_reference(dataset, cfg_with_seed(next(seed_iter)), hidden, membership="cem_ensemble")
        )
    for i in range(holdout_c1):
        hid = holdout_hidden[i % len(holdout_hidden)] if holdout_hidden else hidden
        records.append(
            train_surrogate(
                source, Xd, "soft", cfg_with_seed(next(seed_iter)), hid,
                membership="holdout", eval_data=(Xt, yt),
            )
        )
    for i in range(holdout_c2):
        hid = holdout_hidden[i % len(holdout_hidden)] if holdout_hidden else hidden
        records.append(
            train_reference(dataset, cfg_with_seed(next(seed_iter)), hid, membership="holdout")
        )
    src = ModelRecord(source, "source", "oracle", "none", source_provenance or {})
    return ModelZoo(src, records)


def audit_provenance(zoo: ModelZoo) -> None:
    """Raise if any record's label source contradicts its kind."""
    for r in zoo.records:
        src = r.provenance.get("label_source", "")
        if r.kind == "surrogate" and not src.startswith("teacher:"):
            raise ConfigError(f"surrogate {r.model_id} trained on {src!r}")
        if r.kind == "reference" and src != "oracle":
            raise ConfigError(f"reference {r.model_id} trained on {src!r}")


# ---------------------------------------------------------------------------
# persistence


def save_zoo(zoo: ModelZoo, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    nn.save_network(zoo.source.network, directory / "source.npz", zoo.source.provenance)
    for i, r in enumerate(zoo.records):
        name = f"{r.kind}_{r.membership}_{i:03d}.npz"
        nn.save_network(r.network, directory / name, r.provenance)
        entries.append(
            {
                "file": name,
                "kind": r.kind,
                "lineage": r.lineage,
                "membership": r.membership,
                "model_id": r.model_id,
            }
        )
    manifest = {
        "version": 1,
        "source": {"file": "source.npz", "model_id": zoo.source.model_id},
        "records": entries,
    }
    (directory / "zoo_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_zoo(directory: str | Path) -> ModelZoo:
    directory = Path(directory)
    manifest = json.loads((directory / "zoo_manifest.json").read_text())
    net, prov = nn.load_network(directory / manifest["source"]["file"])
    source = ModelRecord(net, "source", "oracle", "none", prov)
    records = []
    for e in manifest["records"]:
        net, prov = nn.load_network(directory / e["file"])
        records.append(ModelRecord(net, e["kind"], e["lineage"], e["membership"], prov))
    return ModelZoo(source, records)
