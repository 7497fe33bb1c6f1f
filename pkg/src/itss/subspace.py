"""Trajectory-derived, random and unified subspaces, and training inside them.

Hidden layer ``l`` is re-parameterized as

    theta_l = theta0_l + V_l @ mean_i(z_l[i])

where ``V_l`` (D_l x d_l) has orthonormal columns and ``z_l`` holds ``h``
ensemble members. Bases are anchored at ``theta0``: the rows fed to the SVD
are ``theta_i - theta0``, never column-mean-centered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from itss.data import Dataset
from itss.errors import RankDeficientError, ShapeError
from itss.linalg import compact_svd, orthonormal_random
from itss.nn import LayerLayout, Model
from itss.seeding import derive_seed, rng as make_rng
from itss.train import TrainConfig, TrainResult, fit, make_optimizer

DEFAULT_H = 16
# Plain SGD on each member; the mean then moves by lr/h * V^T g per step.
DEFAULT_LOWDIM_LR = 3.2
DEFAULT_LOWDIM_OPTIMIZER = "sgd"
DEFAULT_INIT_STD = 1e-3


@dataclass(frozen=True)
class SubspaceBasis:
    layouts: tuple[LayerLayout, ...]
    directions: tuple[np.ndarray, ...]
    singular_values: tuple[np.ndarray, ...]
    origin: tuple[np.ndarray, ...]
    source: str

    def __post_init__(self):
        n = len(self.layouts)
        if not (len(self.directions) == len(self.singular_values) == len(self.origin) == n):
            raise ShapeError("basis components disagree on layer count")
        for lay, v, o in zip(self.layouts, self.directions, self.origin):
            if v.ndim != 2 or v.shape[0] != lay.total_len or o.shape != (lay.total_len,):
                raise ShapeError(f"basis for {lay.layer_id} does not match its layout")
        for arr in (*self.directions, *self.origin, *self.singular_values):
            arr.flags.writeable = False

    @property
    def dims(self) -> list[int]:
        return [v.shape[1] for v in self.directions]

    @property
    def dim(self) -> int:
        return max(self.dims) if self.dims else 0


@dataclass
class LowDimState:
    """Per layer an ``h x d_l`` array of ensemble members."""

    members: list[np.ndarray]

    @property
    def h(self) -> int:
        return self.members[0].shape[0] if self.members else 0

    def means(self) -> list[np.ndarray]:
        return [m.mean(axis=0) for m in self.members]

    def copy(self) -> "LowDimState":
        return LowDimState([m.copy() for m in self.members])


def _freeze(arrs):
    return tuple(np.array(a, dtype=np.float64, copy=True) for a in arrs)


def extract_basis(traj, dim: int | list[int], source: str | None = None) -> SubspaceBasis:
    """Top-``dim`` right singular vectors of each layer's delta matrix."""
    dims = [dim] * len(traj.layouts) if np.isscalar(dim) else list(dim)
    if len(dims) != len(traj.layouts):
        raise ShapeError("one dim per layer required")
    vs, ss = [], []
    for i, d in enumerate(dims):
        if d > len(traj):
            raise RankDeficientError(d, len(traj), traj.layouts[i].layer_id)
        svd = compact_svd(traj.deltas(i))
        if svd.rank < d:
            raise RankDeficientError(d, svd.rank, traj.layouts[i].layer_id)
        vs.append(svd.right[:, :d])
        ss.append(svd.singular_values[:d])
    return SubspaceBasis(
        tuple(traj.layouts), _freeze(vs), _freeze(ss), _freeze(traj.origin),
        source or f"intrinsic:{traj.task_id}",
    )


def random_basis(layouts, dim: int, seed: int, origin) -> SubspaceBasis:
    """Orthonormal random basis per layer with a per-layer derived seed."""
    vs = []
    for i, lay in enumerate(layouts):
        vs.append(orthonormal_random(lay.total_len, dim, derive_seed(seed, 0xBA5E, i)))
    return SubspaceBasis(
        tuple(layouts), _freeze(vs), tuple(np.ones(dim) for _ in layouts), _freeze(origin),
        f"random:{seed}",
    )


def null_basis(layouts, origin) -> SubspaceBasis:
    """Zero-column basis: training in it leaves hidden layers at ``origin``."""
    return SubspaceBasis(
        tuple(layouts), tuple(np.zeros((l.total_len, 0)) for l in layouts),
        tuple(np.zeros(0) for _ in layouts), _freeze(origin), "null",
    )


def _same_origin(trajs):
    ref = trajs[0]
    for tr in trajs[1:]:
        if [l.tensors for l in tr.layouts] != [l.tensors for l in ref.layouts]:
            raise ShapeError(f"trajectory {tr.task_id} has different layer layouts")
        for a, b in zip(tr.origin, ref.origin):
            if not np.array_equal(a, b):
                raise ShapeError(f"trajectory {tr.task_id} starts from a different origin")


def unified_basis(trajectories, exclude: str | None = None) -> SubspaceBasis:
    """Subspace spanned by one delta (final checkpoint minus origin) per task."""
    if len(trajectories) < 2:
        raise ValueError("a unified basis needs at least two trajectories")
    _same_origin(trajectories)
    used = [tr for tr in trajectories if tr.task_id != exclude]
    if exclude is not None and len(used) == len(trajectories):
        raise KeyError(f"task {exclude!r} not among the trajectories")
    ref = used[0]
    vs, ss = [], []
    for i in range(len(ref.layouts)):
        w = np.stack([tr.checkpoints[-1][i] - tr.origin[i] for tr in used])
        svd = compact_svd(w)
        vs.append(svd.right)
        ss.append(svd.singular_values)
    tag = ",".join(tr.task_id for tr in used)
    source = f"zero_shot:{exclude}" if exclude is not None else f"unified:{tag}"
    return SubspaceBasis(tuple(ref.layouts), _freeze(vs), _freeze(ss), _freeze(ref.origin), source)


def init_state(basis: SubspaceBasis, h: int = DEFAULT_H, seed: int = 0,
               std: float = DEFAULT_INIT_STD) -> LowDimState:
    """Gaussian members, seeded per (layer, member)."""
    if h < 1:
        raise ValueError("ensemble size h must be >= 1")
    members = []
    for i, d in enumerate(basis.dims):
        rows = [make_rng(seed, 0x5B, i, j).standard_normal(d) * std for j in range(h)]
        members.append(np.array(rows).reshape(h, d))
    return LowDimState(members)


def reparameterize(basis: SubspaceBasis, state: LowDimState) -> list[np.ndarray]:
    """Hidden parameters ``theta0 + V @ mean(members)`` for every layer."""
    if len(state.members) != len(basis.directions):
        raise ShapeError("state and basis disagree on layer count")
    out = []
    for v, o, m in zip(basis.directions, basis.origin, state.members):
        if m.ndim != 2 or m.shape[1] != v.shape[1]:
            raise ShapeError(f"state of shape {m.shape} does not fit basis with {v.shape[1]} columns")
        out.append(o + v @ m.mean(axis=0))
    return out


def lowdim_gradient(v: np.ndarray, g: np.ndarray, h: int) -> np.ndarray:
    """Gradient of the loss w.r.t. one ensemble member: ``V^T g / h``."""
    if v.ndim != 2 or g.shape != (v.shape[0],):
        raise ShapeError(f"gradient of shape {g.shape} does not match basis rows {v.shape[0]}")
    return (v.T @ g) / h


def check_origin(model: Model, basis: SubspaceBasis):
    if len(model.hidden) != len(basis.origin):
        raise ShapeError("model and basis disagree on layer count")
    for pv, o in zip(model.hidden, basis.origin):
        if pv.values.shape != o.shape or not np.array_equal(pv.values, o):
            raise ShapeError("basis origin differs from the model's hidden-layer initialization")


def train_in_subspace(model: Model, basis: SubspaceBasis, train: Dataset, val: Dataset,
                      cfg: TrainConfig, h: int = DEFAULT_H, lowdim_lr: float = DEFAULT_LOWDIM_LR,
                      lowdim_optimizer: str = DEFAULT_LOWDIM_OPTIMIZER, init_std: float = DEFAULT_INIT_STD,
                      state: LowDimState | None = None, on_step=None):
    """Train the low-dimensional members; embedding and readout stay in full
    space on ``cfg``'s optimizer and learning rate.

    Returns ``(TrainResult, final LowDimState)``. ``on_step(state, model)`` is
    called after every update, mainly for invariant checks.
    """
    check_origin(model, basis)
    model = model.copy()
    if state is None:
        state = init_state(basis, h, derive_seed(cfg.seed, 0x7E7A), init_std)
    else:
        state = state.copy()
        h = state.h
    members = state.members
    opt_z = make_optimizer(lowdim_optimizer, lowdim_lr, cfg)
    opt_emb = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)
    opt_read = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)

    def materialize():
        for pv, theta in zip(model.hidden, reparameterize(basis, state)):
            pv.values[:] = theta

    materialize()

    def update(grads):
        zgrads = [np.broadcast_to(lowdim_gradient(v, g, h), m.shape).copy()
                  for v, g, m in zip(basis.directions, grads.hidden, members)]
        opt_z.step(members, zgrads)
        opt_emb.step(model.embedding, grads.embedding)
        opt_read.step(model.readout, grads.readout)
        materialize()
        if on_step is not None:
            on_step(state, model)

    metrics = fit(model, train, val, cfg, update)
    return TrainResult(metrics, model), state
