"""Synthetic multi-task classification suite.

Every task labels a Gaussian mixture living in a shared ``input_dim``-space.
A master prototype cloud is drawn once per suite; each task rotates it by a
task-specific orthogonal matrix, translates it slightly and assigns clusters
to classes, so tasks share geometry but differ in labeling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from itss.errors import InvalidInputError, ShapeError
from itss.seeding import derive_seed, rng as make_rng


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    input_dim: int
    num_classes: int
    clusters_per_class: int
    rotation_seed: int
    noise: float
    n_train: int
    n_val: int
    separation: float = 6.0
    rotation_strength: float = 1.0
    shift: float = 0.5

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ShapeError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, num_classes)")

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class SuiteParams:
    num_tasks: int = 8
    input_dim: int = 16
    master_seed: int = 0
    small_n: int = 256
    large_n: int = 2048
    n_val: int = 512
    clusters_per_class: int = 6
    large_clusters_per_class: int | None = 10
    noise: float = 1.0
    separation: float = 4.0
    rotation_strength: float = 1.0
    shift: float = 0.5


@dataclass(frozen=True)
class Task:
    spec: TaskSpec
    train: Dataset
    val: Dataset
    centers: np.ndarray
    center_labels: np.ndarray


def _prototypes(params: SuiteParams, count: int) -> np.ndarray:
    """Rejection-sample ``count`` centers pairwise at least ``separation*noise`` apart."""
    r = make_rng(params.master_seed, 0xC0)
    d = params.input_dim
    min_dist = params.separation * params.noise
    # radius chosen so the cloud comfortably holds `count` separated points
    radius = max(min_dist * (count ** (1.0 / d)) * 1.5, min_dist)
    pts = []
    while len(pts) < count:
        cand = r.standard_normal(d)
        cand *= radius * r.uniform(0.5, 1.0) / np.linalg.norm(cand)
        if all(np.linalg.norm(cand - p) >= min_dist for p in pts):
            pts.append(cand)
    return np.array(pts)


def _rotation(d, seed, strength):
    r = np.random.default_rng(seed)
    g = np.eye(d) + strength * r.standard_normal((d, d))
    q, rr = np.linalg.qr(g)
    return q * np.sign(np.diag(rr))


def make_task(spec: TaskSpec, prototypes: np.ndarray, seed: int) -> Task:
    k = spec.num_classes * spec.clusters_per_class
    r = make_rng(seed, 0x7A5C)
    rot = _rotation(spec.input_dim, spec.rotation_seed, spec.rotation_strength)
    offset = r.standard_normal(spec.input_dim) * spec.shift * spec.noise
    chosen = r.choice(len(prototypes), size=k, replace=False)
    centers = prototypes[chosen] @ rot.T + offset
    center_labels = np.tile(np.arange(spec.num_classes), spec.clusters_per_class)

    def draw(n, split, stream):
        rs = make_rng(seed, stream)
        labels = rs.permutation(np.arange(n) % spec.num_classes)
        which = rs.integers(0, spec.clusters_per_class, size=n)
        cidx = which * spec.num_classes + labels
        x = centers[cidx] + spec.noise * rs.standard_normal((n, spec.input_dim))
        return Dataset(x, labels, split, spec.num_classes)

    return Task(spec, draw(spec.n_train, "train", 1), draw(spec.n_val, "val", 2), centers, center_labels)


def suite_specs(params: SuiteParams) -> list[TaskSpec]:
    if params.num_tasks < 2:
        raise ValueError("a suite needs at least 2 tasks")
    half = params.num_tasks // 2
    specs = []
    for i in range(params.num_tasks):
        specs.append(TaskSpec(
            task_id=f"task{i + 1}",
            input_dim=params.input_dim,
            num_classes=2 if i % 2 == 0 else 3,
            clusters_per_class=(
                params.clusters_per_class
                if i < half or params.large_clusters_per_class is None
                else params.large_clusters_per_class
            ),
            rotation_seed=derive_seed(params.master_seed, 0x50, i),
            noise=params.noise,
            n_train=params.small_n if i < half else params.large_n,
            n_val=params.n_val,
            separation=params.separation,
            rotation_strength=params.rotation_strength,
            shift=params.shift,
        ))
    return specs


def generate_suite(num_tasks=8, input_dim=16, master_seed=0, **overrides) -> list[Task]:
    """Build the deterministic task suite.

    Tasks ``1..num_tasks//2`` are small (``small_n`` training examples), the
    rest large; odd-numbered tasks are binary and even-numbered ones 3-class.
    Large tasks may use more clusters per class (``large_clusters_per_class``)
    so that they are not trivially solved by the frozen encoder.
    """
    params = SuiteParams(num_tasks=num_tasks, input_dim=input_dim, master_seed=master_seed, **overrides)
    return generate_from_params(params)


def generate_from_params(params: SuiteParams) -> list[Task]:
    specs = suite_specs(params)
    k_max = max(s.num_classes * s.clusters_per_class for s in specs)
    protos = _prototypes(params, 2 * k_max)
    return [make_task(s, protos, derive_seed(params.master_seed, 0x7A, i)) for i, s in enumerate(specs)]


def nearest_centroid_accuracy(task: Task, dataset: Dataset | None = None) -> float:
    """Accuracy of assigning each point the label of its nearest generating center."""
    ds = task.val if dataset is None else dataset
    d2 = ((ds.features[:, None, :] - task.centers[None]) ** 2).sum(axis=-1)
    pred = task.center_labels[np.argmin(d2, axis=1)]
    return float(np.mean(pred == ds.labels))


def batches(dataset: Dataset, batch_size: int, epoch_seed: int):
    """Yield ``(features, labels)`` batches of one shuffled pass over ``dataset``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("cannot batch an empty dataset")
    order = np.random.default_rng(epoch_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{j}" for j in range(d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
