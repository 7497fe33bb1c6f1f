"""Outlier dimensions of subspace updates, transfer and similarity matrices,
and dimension ablations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from itss.errors import ShapeError, UndefinedSimilarityError
from itss.linalg import cosine
from itss.nn import Mask, Model, apply_mask
from itss.seeding import derive_seed
from itss.subspace import (
    LowDimState,
    SubspaceBasis,
    extract_basis,
    train_in_subspace,
)
from itss.train import TrainConfig, train_full

DEFAULT_K_SIGMA = 3.0


@dataclass(frozen=True)
class UpdateVector:
    layer_id: str
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1 or not np.all(np.isfinite(self.values)):
            raise ShapeError(f"update vector for {self.layer_id} must be finite and 1-D")


@dataclass(frozen=True)
class LayerOutliers:
    layer_id: str
    mean: float
    std: float
    indices: np.ndarray
    scores: np.ndarray

    @property
    def top(self) -> int | None:
        return int(self.indices[np.argmax(self.scores)]) if self.indices.size else None


@dataclass(frozen=True)
class OutlierReport:
    layers: tuple[LayerOutliers, ...]
    k_sigma: float

    def count(self) -> int:
        return int(sum(l.indices.size for l in self.layers))

    def fraction(self, total: int) -> float:
        return self.count() / total

    def mask(self, layouts) -> Mask:
        out = []
        for lay, rep in zip(layouts, self.layers):
            m = np.zeros(lay.total_len, dtype=bool)
            m[rep.indices] = True
            out.append(m)
        return Mask(tuple(out))


def update_vector(basis: SubspaceBasis, state: LowDimState) -> list[UpdateVector]:
    """``V @ mean(members)`` per layer, the learned change to the hidden layer."""
    if len(state.members) != len(basis.directions):
        raise ShapeError("state and basis disagree on layer count")
    out = []
    for lay, v, m in zip(basis.layouts, basis.directions, state.members):
        if m.ndim != 2 or m.shape[1] != v.shape[1]:
            raise ShapeError(f"state of shape {m.shape} does not fit basis with {v.shape[1]} columns")
        out.append(UpdateVector(lay.layer_id, v @ m.mean(axis=0)))
    return out


def detect_outliers(u, k_sigma: float = DEFAULT_K_SIGMA, layer_id: str = "") -> LayerOutliers:
    """Entries with ``|u_i - mean| >= k_sigma * std`` (population std).

    A constant vector has no outliers.
    """
    if isinstance(u, UpdateVector):
        layer_id, u = u.layer_id, u.values
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or u.size < 2:
        raise ShapeError("detect_outliers needs a 1-D vector with at least 2 entries")
    mu = float(u.mean())
    # a constant vector can still produce a round-off std of ~1e-17
    sd = 0.0 if np.all(u == u[0]) else float(u.std())
    if sd == 0.0:
        return LayerOutliers(layer_id, mu, 0.0, np.zeros(0, dtype=np.int64), np.zeros(0))
    dev = np.abs(u - mu)
    idx = np.flatnonzero(dev >= k_sigma * sd)
    return LayerOutliers(layer_id, mu, sd, idx.astype(np.int64), dev[idx] / sd)


def outlier_report(updates, k_sigma: float = DEFAULT_K_SIGMA) -> OutlierReport:
    return OutlierReport(tuple(detect_outliers(u, k_sigma) for u in updates), k_sigma)


def random_mask_like(report: OutlierReport, layouts, seed: int) -> Mask:
    """Random mask with exactly the report's per-layer counts."""
    out = []
    for i, (lay, rep) in enumerate(zip(layouts, report.layers)):
        r = np.random.default_rng(derive_seed(seed, 0x4A5C, i))
        m = np.zeros(lay.total_len, dtype=bool)
        m[r.choice(lay.total_len, size=rep.indices.size, replace=False)] = True
        out.append(m)
    return Mask(tuple(out))


def top_outlier_positions(report: OutlierReport, layouts, top_k: int = 10):
    """Per layer, the ``top_k`` highest-scoring flags as ``(flat, tensor, index)``.

    Returns ``(positions, overlap)`` where ``overlap`` is the mean pairwise
    Jaccard overlap of the layers' top sets, compared on within-layer flat
    positions (layers share one layout, so equal positions are the same weight
    slot in different layers).
    """
    positions = []
    for lay, rep in zip(layouts, report.layers):
        order = np.lexsort((rep.indices, -rep.scores))[:top_k]
        positions.append([(int(rep.indices[j]), *lay.locate(int(rep.indices[j]))) for j in order])
    return positions, overlap_statistic([{p[0] for p in ps} for ps in positions])


def overlap_statistic(sets) -> float:
    sets = list(sets)
    if len(sets) < 2:
        return 1.0
    vals = []
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            union = sets[a] | sets[b]
            vals.append(len(sets[a] & sets[b]) / len(union) if union else 1.0)
    return float(np.mean(vals))


@dataclass(frozen=True)
class DisableResult:
    outlier_accuracy: float
    random_accuracy: float
    full_accuracy: float
    masked_count: int


def disable_and_finetune(model: Model, task, report: OutlierReport, cfg: TrainConfig,
                         mask_seed: int, full_accuracy: float | None = None) -> DisableResult:
    """Full fine-tuning from ``model`` with outlier entries zeroed and frozen,
    with an equal-count random mask, and unmasked.

    ``full_accuracy`` may be passed in to reuse an already finished unmasked run.
    """
    if report.count() == 0:
        warnings.warn(f"no outliers found for {task.spec.task_id}; disabling is a no-op")
    layouts = model.layouts
    if full_accuracy is None:
        full_accuracy = train_full(model, task.train, task.val, cfg).final_accuracy
    out_model = apply_mask(model, report.mask(layouts))
    rnd_model = apply_mask(model, random_mask_like(report, layouts, mask_seed))
    acc_out = train_full(out_model, task.train, task.val, cfg).final_accuracy
    acc_rnd = train_full(rnd_model, task.train, task.val, cfg).final_accuracy
    return DisableResult(acc_out, acc_rnd, full_accuracy, report.count())


def similarity_matrix(states) -> np.ndarray:
    """Mean over layers and matched ensemble members of cosine(z_a, z_b).

    Zero member vectors make a pair undefined; such pairs are skipped with a
    warning. The diagonal is 1 by definition.
    """
    n = len(states)
    out = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            vals = []
            for ma, mb in zip(states[a].members, states[b].members):
                if ma.shape != mb.shape:
                    raise ShapeError("states were not trained in the same basis")
                for za, zb in zip(ma, mb):
                    try:
                        vals.append(cosine(za, zb))
                    except UndefinedSimilarityError:
                        warnings.warn(f"zero member vector in pair ({a}, {b}); skipped")
            out[a, b] = out[b, a] = float(np.mean(vals)) if vals else np.nan
    return out


def transfer_matrix(transductive, transferred, random_col):
    """Performance drops relative to each target's own-basis accuracy.

    ``transductive[j]`` is target ``j`` in its own basis, ``transferred[i][j]``
    target ``j`` in source ``i``'s basis and ``random_col[j]`` target ``j`` in a
    random basis. Returns ``(drops T x T, random drops T, row means)`` with an
    exactly zero diagonal; row means are over off-diagonal entries.
    """
    ref = np.asarray(transductive, dtype=np.float64)
    acc = np.asarray(transferred, dtype=np.float64)
    t = ref.size
    if acc.shape != (t, t):
        raise ShapeError("transferred accuracies must be T x T")
    drops = ref[None, :] - acc
    np.fill_diagonal(drops, 0.0)
    off = ~np.eye(t, dtype=bool)
    row_means = np.array([drops[i][off[i]].mean() for i in range(t)]) if t > 1 else np.zeros(t)
    return drops, ref - np.asarray(random_col, dtype=np.float64), row_means


def dim_ablation(model: Model, task, traj, cfg: TrainConfig, dims=(8, 16, 32), **subspace_kw):
    """Subspace accuracy for each basis dim extracted from the same trajectory."""
    out = {}
    for d in dims:
        basis = extract_basis(traj, d)
        res, _ = train_in_subspace(model, basis, task.train, task.val, cfg, **subspace_kw)
        out[d] = res.final_accuracy
    return out


def ablation_monotone(table: np.ndarray, max_violations: int = 1) -> bool:
    """``table`` is tasks x dims. Suite mean must be non-decreasing in dim and
    at most ``max_violations`` tasks may individually decrease somewhere."""
    table = np.asarray(table, dtype=np.float64)
    mean_ok = bool(np.all(np.diff(table.mean(axis=0)) >= 0))
    violators = int(np.sum(np.any(np.diff(table, axis=1) < 0, axis=1)))
    return mean_ok and violators <= max_violations
