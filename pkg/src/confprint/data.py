"""Dataset generation and ingestion.

Synthetic multi-class tasks come with a ground-truth labeling rule (the
oracle): gaussian blobs label by nearest class center, spirals by the
generating arm. External data loads from IDX or CSV files. All inputs
live in [0, 1]^input_dim.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

SPLIT_TAGS = ("defender_train", "attacker_train", "test", "holdout")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class DomainSpec:
    """Recipe for a data domain; everything derives deterministically from rng_seed."""

    generator: str = "gaussian_blobs"  # gaussian_blobs | spirals | idx_file | csv_file
    num_classes: int = 8
    input_dim: int = 16
    rng_seed: int = 0
    # gaussian_blobs geometry
    center_radius: float = 0.35
    spread: float = 0.08
    informative_dims: int | None = None  # centers differ only in the first k dims
    centers: np.ndarray | None = None  # explicit override of the sampled centers
    # spirals geometry
    noise: float = 0.02
    # file-backed domains
    path_images: str | None = None
    path_labels: str | None = None
    path_csv: str | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < 2:
            raise ConfigError("input_dim must be >= 2")
        if self.generator not in ("gaussian_blobs", "spirals", "idx_file", "csv_file"):
            raise ConfigError(f"unknown generator {self.generator!r}")

    def to_json(self) -> dict:
        d = {
            "generator": self.generator,
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "rng_seed": self.rng_seed,
            "center_radius": self.center_radius,
            "spread": self.spread,
            "informative_dims": self.informative_dims,
            "noise": self.noise,
            "path_images": self.path_images,
            "path_labels": self.path_labels,
            "path_csv": self.path_csv,
            "centers": None if self.centers is None else self.centers.tolist(),
        }
        return d

    @staticmethod
    def from_json(d: dict) -> "DomainSpec":
        d = dict(d)
        centers = d.pop("centers", None)
        spec = DomainSpec(**d)
        if centers is not None:
            spec.centers = np.asarray(centers, dtype=float)
        return spec


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, input_dim), values in [0, 1]
    labels: np.ndarray  # (n,), class indices
    num_classes: int
    split: np.ndarray | None = None  # (n,) tags from SPLIT_TAGS
    source_id: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 2:
            raise ShapeError("inputs must be a (n, input_dim) array")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError("labels length must match inputs")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ConfigError("inputs must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")
        if self.split is not None:
            self.split = np.asarray(self.split)
            if self.split.shape != self.labels.shape:
                raise ShapeError("split tags length must match inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        if self.split is None:
            raise ConfigError("dataset has no split assignment")
        if tag not in SPLIT_TAGS:
            raise ConfigError(f"unknown split tag {tag!r}")
        idx = self.split == tag
        return self.inputs[idx], self.labels[idx]


def blob_centers(spec: DomainSpec) -> np.ndarray:
    """Class centers on a sphere of center_radius around (0.5, ..., 0.5).

    With informative_dims = k the sphere lives in the first k coordinates and
    the rest carry no class signal, which keeps class margins wide relative
    to what an L-infinity perturbation can traverse.
    """
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=float)
    else:
        k = spec.informative_dims or spec.input_dim
        if not 2 <= k <= spec.input_dim:
            raise ConfigError("informative_dims must lie in [2, input_dim]")
        rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
        raw = rng.normal(size=(spec.num_classes, k))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        centers = np.full((spec.num_classes, spec.input_dim), 0.5)
        centers[:, :k] = 0.5 + spec.center_radius * raw
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    if dists.min() < 1e-9:
        raise ConfigError("degenerate geometry: coincident class centers")
    return centers


def _class_quotas(n: int, num_classes: int) -> list[int]:
    base, extra = divmod(n, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def _spiral_curve(spec: DomainSpec, arm: int, t: np.ndarray) -> np.ndarray:
    """Noise-free 2-D points along one arm, for t in [0, 1]."""
    r = 0.05 + 0.38 * t
    theta = 2 * np.pi * arm / spec.num_classes + t * 1.5 * np.pi
    return np.stack([0.5 + r * np.cos(theta), 0.5 + r * np.sin(theta)], axis=-1)


def generate_synthetic(spec: DomainSpec, n: int) -> Dataset:
    """n labeled points; class counts balanced within one, deterministic per seed.

    Blob points are rejection-sampled until the nearest-center rule agrees
    with the generating class, so the labels exactly follow the oracle.
    """
    if n < spec.num_classes:
        raise ConfigError("need at least one point per class")
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
    quotas = _class_quotas(n, spec.num_classes)
    xs: list[np.ndarray] = []
    ys: list[int] = []

    if spec.generator == "gaussian_blobs":
        centers = blob_centers(spec)
        for c, quota in enumerate(quotas):
            got = 0
            attempts = 0
            while got < quota:
                attempts += 1
                if attempts > 1000 * quota:
                    raise ConfigError(
                        f"geometry too overlapped: cannot draw class {c} points"
                    )
                draw = max(quota - got, 8)
                pts = np.clip(centers[c] + rng.normal(scale=spec.spread, size=(draw, spec.input_dim)), 0, 1)
                d = np.linalg.norm(pts[:, None] - centers[None, :], axis=-1)
                ok = pts[np.argmin(d, axis=1) == c]
                take = ok[: quota - got]
                xs.append(take)
                ys.extend([c] * len(take))
                got += len(take)
    elif spec.generator == "spirals":
        for c, quota in enumerate(quotas):
            t = rng.random(quota)
            pts2 = _spiral_curve(spec, c, t)
            pts2 += rng.normal(scale=spec.noise, size=pts2.shape)
            if spec.input_dim > 2:
                rest = 0.5 + rng.uniform(-0.05, 0.05, size=(quota, spec.input_dim - 2))
                pts = np.hstack([pts2, rest])
            else:
                pts = pts2
            xs.append(np.clip(pts, 0, 1))
            ys.extend([c] * quota)
    else:
        raise ConfigError(f"generator {spec.generator!r} is file-backed; use the loaders")

    X = np.vstack(xs)
    y = np.array(ys, dtype=int)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm], spec.num_classes, source_id=f"{spec.generator}:{spec.rng_seed}")


def oracle(spec: DomainSpec):
    """Ground-truth labeling function for a synthetic domain."""
    if spec.generator == "gaussian_blobs":
        centers = blob_centers(spec)

        def label(X: np.ndarray) -> np.ndarray:
            X = np.atleast_2d(np.asarray(X, dtype=float))
            d = np.linalg.norm(X[:, None] - centers[None, :], axis=-1)
            return np.argmin(d, axis=1)

        return label
    if spec.generator == "spirals":
        t = np.linspace(0, 1, 256)
        curves = np.stack([_spiral_curve(spec, c, t) for c in range(spec.num_classes)])

        def label(X: np.ndarray) -> np.ndarray:
            X = np.atleast_2d(np.asarray(X, dtype=float))[:, :2]
            # distance to the nearest sampled point of each arm
            d = np.linalg.norm(X[:, None, None, :] - curves[None, :, :, :], axis=-1)
            return np.argmin(d.min(axis=2), axis=1)

        return label
    raise ConfigError(f"no oracle for generator {spec.generator!r}")


def make_related_domain(
    spec: DomainSpec, displacement: float = 0.0, disjoint: bool = False, rng_seed: int | None = None
) -> DomainSpec:
    """A domain related to spec: same task with displaced geometry, or a
    disjoint-class domain whose oracle is unrelated to the original."""
    if displacement < 0:
        raise ConfigError("displacement must be >= 0")
    new_seed = spec.rng_seed + 1_000_003 if rng_seed is None else rng_seed
    if disjoint:
        return replace(spec, rng_seed=new_seed, centers=None)
    if spec.generator != "gaussian_blobs":
        return replace(spec, rng_seed=new_seed)
    centers = blob_centers(spec)
    if displacement > 0:
        rng = np.random.Generator(np.random.PCG64(new_seed))
        delta = rng.normal(size=centers.shape)
        delta /= np.linalg.norm(delta, axis=1, keepdims=True)
        centers = centers + displacement * delta
    # keep the original sampling seed meaning but a fresh draw stream
    return replace(spec, rng_seed=new_seed, centers=centers)


def assign_splits(ds: Dataset, fractions: dict[str, float], seed: int) -> Dataset:
    """Disjoint split tags covering all records, reproducible from seed."""
    unknown = set(fractions) - set(SPLIT_TAGS)
    if unknown:
        raise ConfigError(f"unknown split tags: {sorted(unknown)}")
    total = sum(fractions.values())
    if not np.isclose(total, 1.0, atol=1e-9):
        raise ConfigError(f"split fractions must sum to 1, got {total}")
    n = len(ds)
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    tags = np.empty(n, dtype=object)
    start = 0
    items = list(fractions.items())
    for i, (tag, frac) in enumerate(items):
        count = n - start if i == len(items) - 1 else int(round(frac * n))
        tags[perm[start : start + count]] = tag
        start += count
    return Dataset(ds.inputs, ds.labels, ds.num_classes, split=tags, source_id=ds.source_id)


# ---------------------------------------------------------------------------
# file formats


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def load_idx(path_images: str | Path, path_labels: str | Path) -> Dataset:
    """Load an IDX image/label pair; pixels scale to [0,1], images flatten row-major."""
    with open(path_images, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "images header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"images magic 0x{magic:08x} != 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, "image pixels")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(path_labels, "rb") as f:
        magic, lcount = struct.unpack(">II", _read_exact(f, 8, "labels header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"labels magic 0x{magic:08x} != 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, lcount, "labels"), dtype=np.uint8)
    if count != lcount:
        raise FormatError(f"image count {count} != label count {lcount}")
    num_classes = int(labels.max()) + 1 if labels.size else 2
    return Dataset(
        images.astype(float) / 255.0,
        labels.astype(int),
        max(num_classes, 2),
        source_id=f"idx:{Path(path_images).name}",
    )


def write_idx(path_images: str | Path, path_labels: str | Path, images: np.ndarray, labels: np.ndarray, rows: int, cols: int) -> None:
    """Write an IDX pair (testing and interchange helper)."""
    images = np.asarray(images)
    n = images.shape[0]
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_csv(path: str | Path, num_classes: int | None = None) -> Dataset:
    """CSV with header x0..x{d-1},label; feature values are clamped to [0,1]."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if header[-1] != "label" or any(h != f"x{i}" for i, h in enumerate(header[:-1])):
            raise FormatError(f"bad CSV header {header!r}; expected x0..x{{d-1}},label")
        rows = []
        for ln, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise FormatError(f"line {ln}: expected {len(header)} fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        raise FormatError("CSV contains no data rows")
    arr = np.asarray(rows, dtype=float)
    X = np.clip(arr[:, :-1], 0, 1)
    y = arr[:, -1].astype(int)
    C = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(X, y, max(C, 2), source_id=f"csv:{Path(path).name}")


def save_csv(ds: Dataset, path: str | Path) -> None:
    d = ds.inputs.shape[1]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join([f"x{i}" for i in range(d)] + ["label"]) + "\n")
        for x, y in zip(ds.inputs, ds.labels):
            f.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def save_manifest(spec: DomainSpec, n: int, split_fractions: dict, split_seed: int, path: str | Path) -> None:
    doc = {
        "version": 1,
        "spec": spec.to_json(),
        "n": n,
        "split_fractions": split_fractions,
        "split_seed": split_seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path: str | Path) -> tuple[DomainSpec, int, dict, int]:
    doc = json.loads(Path(path).read_text())
    return DomainSpec.from_json(doc["spec"]), doc["n"], doc["split_fractions"], doc["split_seed"]


def default_blobs_spec(seed: int = 0) -> DomainSpec:
    """The default desk-scale task: 8 gaussian blob classes in 16 dimensions.

    Class centers live in a 4-dimensional informative subspace with per-class
    spread 0.10: wide enough margins that a 0.05-0.1 perturbation budget
    cannot reach a neighboring class's true region, while model boundaries
    still disagree in the space between classes.
    """
    return DomainSpec(
        generator="gaussian_blobs", num_classes=8, input_dim=16,
        rng_seed=seed, center_radius=0.35, spread=0.10, informative_dims=4,
    )
