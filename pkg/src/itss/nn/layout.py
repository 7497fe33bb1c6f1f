"""Per-layer parameter layouts and flat parameter vectors.

A hidden layer is flattened by walking its tensors in declaration order
(weights before biases inside each sub-module) and concatenating the
row-major contents. That order is part of the artifact file format and must
not change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from itss.errors import InvalidInputError, ShapeError


@dataclass(frozen=True)
class LayerLayout:
    layer_id: str
    tensors: tuple[tuple[str, tuple[int, ...]], ...]
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [n for n, _ in self.tensors]
        if len(set(names)) != len(names):
            raise ShapeError(f"duplicate tensor names in layer {self.layer_id}")
        tensors = tuple((str(n), tuple(int(s) for s in shape)) for n, shape in self.tensors)
        object.__setattr__(self, "tensors", tensors)
        offs = [0]
        for _, shape in tensors:
            offs.append(offs[-1] + prod(shape))
        object.__setattr__(self, "offsets", tuple(offs))

    @property
    def total_len(self) -> int:
        return self.offsets[-1]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.tensors]

    def slice_of(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(self.offsets[i], self.offsets[i + 1])

    def flatten(self, params: dict) -> np.ndarray:
        parts = []
        for name, shape in self.tensors:
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{self.layer_id}.{name}: expected {shape}, got {arr.shape}")
            parts.append(arr.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, values: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into ``values`` (no copy), so in-place edits propagate."""
        values = np.asarray(values)
        if values.shape != (self.total_len,):
            raise ShapeError(
                f"layer {self.layer_id} expects a vector of length {self.total_len}, "
                f"got shape {values.shape}"
            )
        return {
            name: values[self.offsets[i]:self.offsets[i + 1]].reshape(shape)
            for i, (name, shape) in enumerate(self.tensors)
        }

    def locate(self, flat_index: int) -> tuple[str, tuple[int, ...]]:
        """Map a flat index to ``(tensor_name, index within tensor)``."""
        if not 0 <= flat_index < self.total_len:
            raise IndexError(f"flat index {flat_index} outside layer of length {self.total_len}")
        i = int(np.searchsorted(self.offsets, flat_index, side="right")) - 1
        name, shape = self.tensors[i]
        return name, tuple(int(k) for k in np.unravel_index(flat_index - self.offsets[i], shape))


@dataclass
class ParamVector:
    """Flat float64 parameters of one layer, tied to its layout."""

    layout: LayerLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total_len,):
            raise ShapeError(
                f"layer {self.layout.layer_id}: expected {self.layout.total_len} values, "
                f"got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError(f"layer {self.layout.layer_id} has non-finite values")

    def tensors(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())


def flatten(layout: LayerLayout, params: dict) -> ParamVector:
    return ParamVector(layout, layout.flatten(params))


def unflatten(vec: ParamVector) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in vec.layout.unflatten(vec.values).items()}
