"""Full-space and frozen-encoder fine-tuning with per-epoch checkpointing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from itss.data import Dataset, batches
from itss.errors import DivergenceError, ShapeError
from itss.nn import LayerLayout, Model, loss_and_grad, predict_logits, cross_entropy
from itss.seeding import derive_seed

DIVERGENCE_LIMIT = 1e6
OPTIMIZERS = ("adam", "sgd_momentum", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 32
    batch_size: int = 32
    optimizer: str = "adam"
    base_lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def to_dict(self):
        return dataclasses.asdict(self)


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """In-place update of each array in ``params`` (dict or list)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key in _keys(params):
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[key] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    """SGD with optional heavy-ball momentum (``v = mu*v + g``)."""

    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.buf = {}

    def step(self, params, grads):
        for key in _keys(params):
            g = grads[key]
            if self.momentum:
                if key not in self.buf:
                    self.buf[key] = g.copy()
                else:
                    self.buf[key] *= self.momentum
                    self.buf[key] += g
                g = self.buf[key]
            params[key] -= self.lr * g


def _keys(params):
    return list(params.keys()) if isinstance(params, dict) else range(len(params))


def make_optimizer(name, lr, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    if name == "adam":
        return Adam(lr, cfg.beta1, cfg.beta2, cfg.eps)
    if name == "sgd_momentum":
        return SGD(lr, cfg.momentum)
    if name == "sgd":
        return SGD(lr, 0.0)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class Trajectory:
    layouts: list[LayerLayout]
    origin: list[np.ndarray]
    checkpoints: list[list[np.ndarray]]
    task_id: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.checkpoints:
            raise ShapeError("a trajectory needs at least one checkpoint")
        for ck in [self.origin, *self.checkpoints]:
            if len(ck) != len(self.layouts):
                raise ShapeError("checkpoint layer count differs from layouts")
            for lay, v in zip(self.layouts, ck):
                if np.shape(v) != (lay.total_len,):
                    raise ShapeError(f"checkpoint for {lay.layer_id} has wrong length")

    def __len__(self):
        return len(self.checkpoints)

    def deltas(self, layer: int) -> np.ndarray:
        """t x D_layer matrix whose rows are ``theta_i - theta_0``."""
        return np.stack([ck[layer] for ck in self.checkpoints]) - self.origin[layer]


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_loss: float


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    model: Model
    trajectory: Trajectory | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].val_accuracy


def evaluate(model: Model, dataset: Dataset) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)`` over the whole dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.features)
    loss, _ = cross_entropy(logits, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return acc, loss


def epoch_seed(seed, epoch) -> int:
    return derive_seed(seed, 0xE9, epoch)


def check_loss(loss, epoch, step):
    if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"loss {loss!r} at epoch {epoch}, step {step}")


def _mask_grads(model, hidden_grads):
    for i, m in enumerate(model.masks):
        if m is not None:
            hidden_grads[i][m] = 0.0


def _enforce_masks(model):
    for pv, m in zip(model.hidden, model.masks):
        if m is not None:
            pv.values[m] = 0.0


def fit(model, train, val, cfg, update, on_epoch=None):
    """Generic epoch loop. ``update(grads)`` applies one optimizer step."""
    if model.spec.input_dim != train.features.shape[1]:
        raise ShapeError("model input_dim does not match dataset features")
    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for xb, yb in batches(train, cfg.batch_size, epoch_seed(cfg.seed, epoch)):
            loss, _, grads = loss_and_grad(model, xb, yb)
            check_loss(loss, epoch, step)
            update(grads)
            losses.append(loss)
            step += 1
        acc, vloss = evaluate(model, val)
        metrics.append(EpochMetrics(epoch + 1, float(np.mean(losses)), acc, vloss))
        if on_epoch is not None:
            on_epoch(epoch + 1)
    return metrics


def train_full(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig,
               task_id: str = "") -> TrainResult:
    """Fine-tune every parameter, checkpointing hidden layers every
    ``cfg.checkpoint_every`` epochs. The input model is not modified."""
    model = model.copy()
    _enforce_masks(model)
    origin = [v.copy() for v in model.hidden_values()]
    opt_emb = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)
    opt_read = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)
    opt_hidden = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)
    hidden = model.hidden_values()
    checkpoints = []

    def update(grads):
        _mask_grads(model, grads.hidden)
        opt_emb.step(model.embedding, grads.embedding)
        opt_read.step(model.readout, grads.readout)
        opt_hidden.step(hidden, grads.hidden)
        _enforce_masks(model)

    def on_epoch(epoch):
        if epoch % cfg.checkpoint_every == 0:
            checkpoints.append([v.copy() for v in hidden])

    metrics = fit(model, train, val, cfg, update, on_epoch)
    traj = None
    if checkpoints:
        traj = Trajectory(model.layouts, origin, checkpoints, task_id, cfg.to_dict())
    return TrainResult(metrics, model, traj)


def train_frozen(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train only the embedding and readout; hidden layers stay at their
    initial values."""
    model = model.copy()
    opt_emb = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)
    opt_read = make_optimizer(cfg.optimizer, cfg.base_lr, cfg)

    def update(grads):
        opt_emb.step(model.embedding, grads.embedding)
        opt_read.step(model.readout, grads.readout)

    return TrainResult(fit(model, train, val, cfg, update), model)
