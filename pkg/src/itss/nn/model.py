"""Model container, cross-entropy loss, exact gradients and parameter masks.

Only the hidden ("encoder") layers are exposed as flat ``ParamVector``
objects; the embedding and readout tensors always stay in full space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from itss.errors import ShapeError
from itss.nn import mlp, transformer
from itss.nn.layout import LayerLayout, ParamVector

KINDS = ("mlp", "tiny-transformer")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    input_dim: int = 16
    hidden_dim: int = 96
    depth: int = 2
    num_classes: int = 2
    seed: int = 0
    seq_len: int = 4
    init_gain: float = 0.5
    bias_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("input_dim", "hidden_dim", "depth", "num_classes", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def backend(self):
        return mlp if self.kind == "mlp" else transformer


@dataclass(frozen=True)
class Mask:
    """Per-layer boolean vectors; ``True`` marks a disabled parameter."""

    layers: tuple[np.ndarray, ...]

    @classmethod
    def empty(cls, layouts):
        return cls(tuple(np.zeros(l.total_len, dtype=bool) for l in layouts))

    def count(self) -> int:
        return int(sum(m.sum() for m in self.layers))


@dataclass
class Gradients:
    embedding: dict[str, np.ndarray]
    hidden: list[np.ndarray]
    readout: dict[str, np.ndarray]


@dataclass
class Model:
    spec: ModelSpec
    embedding: dict[str, np.ndarray]
    hidden: list[ParamVector]
    readout: dict[str, np.ndarray]
    masks: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            self.masks = [None] * len(self.hidden)

    @property
    def layouts(self) -> list[LayerLayout]:
        return [pv.layout for pv in self.hidden]

    def hidden_values(self) -> list[np.ndarray]:
        return [pv.values for pv in self.hidden]

    def copy(self) -> "Model":
        return Model(
            self.spec,
            {k: v.copy() for k, v in self.embedding.items()},
            [pv.copy() for pv in self.hidden],
            {k: v.copy() for k, v in self.readout.items()},
            [None if m is None else m.copy() for m in self.masks],
        )

    def num_hidden_params(self) -> int:
        return sum(l.total_len for l in self.layouts)


def hidden_layouts(spec: ModelSpec) -> list[LayerLayout]:
    return [spec.backend.layer_layout(i, spec.hidden_dim) for i in range(spec.depth)]


def init_model(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x1D]))
    emb, layers, readout = spec.backend.init_params(rng, spec)
    layouts = hidden_layouts(spec)
    hidden = [ParamVector(lay, lay.flatten(p)) for lay, p in zip(layouts, layers)]
    return Model(spec, emb, hidden, readout)


def _check_batch(model, x, y):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"batch features must be (n, {model.spec.input_dim}), got {x.shape}"
        )
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels must have shape ({x.shape[0]},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= model.spec.num_classes):
        raise ShapeError("label outside [0, num_classes)")
    return x, y


def _forward(model, x):
    spec = model.spec
    layers = [pv.tensors() for pv in model.hidden]
    if spec.kind == "mlp":
        logits, cache = mlp.forward(model.embedding, layers, model.readout, x)
    else:
        logits, cache = transformer.forward(model.embedding, layers, model.readout, x, spec.seq_len)
    return logits, cache, layers


def cross_entropy(logits, y):
    """Mean softmax cross-entropy and the softmax probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(len(y)), y]))
    probs = np.exp(shifted - logz[:, None])
    return loss, probs


def predict_logits(model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"features must be (n, {model.spec.input_dim}), got {x.shape}")
    return _forward(model, x)[0]


def forward_loss(model, x, y):
    """Return ``(mean cross-entropy, logits)``."""
    x, y = _check_batch(model, x, y)
    logits = _forward(model, x)[0]
    loss, _ = cross_entropy(logits, y)
    return loss, logits


def loss_and_grad(model, x, y):
    """Forward and backward pass in one go: ``(loss, logits, Gradients)``."""
    x, y = _check_batch(model, x, y)
    logits, cache, layers = _forward(model, x)
    loss, probs = cross_entropy(logits, y)
    dlogits = probs
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    g_emb, g_layers, g_read = model.spec.backend.backward(
        model.embedding, layers, model.readout, cache, dlogits)
    hidden = [pv.layout.flatten(g) for pv, g in zip(model.hidden, g_layers)]
    return loss, logits, Gradients(g_emb, hidden, g_read)


def backward(model, x, y) -> Gradients:
    return loss_and_grad(model, x, y)[2]


def apply_mask(model: Model, mask: Mask) -> Model:
    """Copy of ``model`` with masked hidden entries zeroed and frozen."""
    if len(mask.layers) != len(model.hidden):
        raise ShapeError(f"mask has {len(mask.layers)} layers, model has {len(model.hidden)}")
    out = model.copy()
    for i, (pv, m) in enumerate(zip(out.hidden, mask.layers)):
        m = np.asarray(m, dtype=bool)
        if m.shape != pv.values.shape:
            raise ShapeError(f"mask for layer {i} has shape {m.shape}, expected {pv.values.shape}")
        pv.values[m] = 0.0
        prev = out.masks[i]
        out.masks[i] = m.copy() if prev is None else (prev | m)
    return out


def with_hidden(model: Model, hidden_values) -> Model:
    """Shallow copy of ``model`` whose hidden layers hold ``hidden_values``."""
    hidden = [ParamVector(pv.layout, np.array(v, dtype=np.float64))
              for pv, v in zip(model.hidden, hidden_values)]
    return replace(model, hidden=hidden, masks=list(model.masks))
