"""Binary persistence for trajectories, bases and low-dimensional states.

Layout (all integers little-endian)::

    b"ITSS" | u32 version | u8 kind | u32 layer count
    u32 meta length | UTF-8 JSON metadata (sorted keys)
    per layer:
        u32 id length | UTF-8 layer id | u32 tensor count
        per tensor: u32 name length | UTF-8 name | u32 ndim | u64 * ndim shape
        u32 array count
        per array: u32 ndim | u64 * ndim dims | float64 little-endian values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from itss.errors import CorruptArtifactError, MissingArtifactError, UnsupportedVersionError
from itss.nn import LayerLayout
from itss.subspace import LowDimState, SubspaceBasis
from itss.train import Trajectory

MAGIC = b"ITSS"
VERSION = 1
KIND_TRAJECTORY = 1
KIND_BASIS = 2
KIND_STATE = 3
_KIND_NAMES = {KIND_TRAJECTORY: "trajectory", KIND_BASIS: "basis", KIND_STATE: "state"}


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v):
        self.buf.write(struct.pack("<I", v))

    def u64(self, v):
        self.buf.write(struct.pack("<Q", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim)
        for n in a.shape:
            self.u64(n)
        self.buf.write(a.tobytes())

    def layout(self, lay: LayerLayout | None, layer_id: str = ""):
        tensors = lay.tensors if lay is not None else ()
        self.text(lay.layer_id if lay is not None else layer_id)
        self.u32(len(tensors))
        for name, shape in tensors:
            self.text(name)
            self.u32(len(shape))
            for n in shape:
                self.u64(n)


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, n):
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptArtifactError("artifact ends before its declared contents")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptArtifactError("invalid UTF-8 in artifact") from exc

    def array(self):
        shape = tuple(self.u64() for _ in range(self.u32()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def layout(self):
        layer_id = self.text()
        tensors = []
        for _ in range(self.u32()):
            name = self.text()
            tensors.append((name, tuple(self.u64() for _ in range(self.u32()))))
        return layer_id, tuple(tensors)


def _encode(kind: int, meta: dict, layers) -> bytes:
    """``layers`` is a list of ``(layout, layer_id, arrays)``."""
    w = _Writer()
    w.buf.write(MAGIC)
    w.u32(VERSION)
    w.u8(kind)
    w.u32(len(layers))
    w.text(json.dumps(meta, sort_keys=True, separators=(",", ":")))
    for lay, layer_id, arrays in layers:
        w.layout(lay, layer_id)
        w.u32(len(arrays))
        for a in arrays:
            w.array(a)
    body = w.buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def _decode(data: bytes, expect_kind: int):
    if len(data) < 4 + 4 + 1 + 4 + 4:
        raise CorruptArtifactError("artifact too short to hold a header and checksum")
    if data[:4] != MAGIC:
        raise CorruptArtifactError("bad magic bytes; not an ITSS artifact")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"artifact format version {version}; this build reads {VERSION}")
    body, footer = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", footer)[0]:
        raise CorruptArtifactError("checksum mismatch; artifact is truncated or corrupted")
    r = _Reader(body, 8)
    kind = r.u8()
    if kind != expect_kind:
        raise CorruptArtifactError(
            f"artifact holds a {_KIND_NAMES.get(kind, kind)}, expected a {_KIND_NAMES[expect_kind]}")
    n_layers = r.u32()
    try:
        meta = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError("artifact metadata is not valid JSON") from exc
    layers = []
    for _ in range(n_layers):
        layer_id, tensors = r.layout()
        arrays = [r.array() for _ in range(r.u32())]
        layers.append((layer_id, tensors, arrays))
    if r.pos != len(body):
        raise CorruptArtifactError("trailing bytes after the last layer")
    return meta, layers


def _layouts(layers):
    try:
        return [LayerLayout(layer_id, tensors) for layer_id, tensors, _ in layers]
    except (ValueError, TypeError) as exc:
        raise CorruptArtifactError(f"invalid layer layout: {exc}") from exc


def trajectory_bytes(traj: Trajectory) -> bytes:
    layers = [(lay, "", [traj.origin[i], np.stack([ck[i] for ck in traj.checkpoints])])
              for i, lay in enumerate(traj.layouts)]
    return _encode(KIND_TRAJECTORY, {"task_id": traj.task_id, "config": traj.config}, layers)


def trajectory_from_bytes(data: bytes) -> Trajectory:
    meta, layers = _decode(data, KIND_TRAJECTORY)
    layouts = _layouts(layers)
    origin, stacks = [], []
    for _, _, arrays in layers:
        if len(arrays) != 2 or arrays[1].ndim != 2:
            raise CorruptArtifactError("trajectory layer must hold an origin and a checkpoint matrix")
        origin.append(arrays[0])
        stacks.append(arrays[1])
    t = stacks[0].shape[0] if stacks else 0
    checkpoints = [[s[k] for s in stacks] for k in range(t)]
    try:
        return Trajectory(layouts, origin, checkpoints, meta.get("task_id", ""), meta.get("config", {}))
    except Exception as exc:
        raise CorruptArtifactError(f"inconsistent trajectory: {exc}") from exc


def basis_bytes(basis: SubspaceBasis) -> bytes:
    layers = [(lay, "", [v, s, o]) for lay, v, s, o in
              zip(basis.layouts, basis.directions, basis.singular_values, basis.origin)]
    return _encode(KIND_BASIS, {"source": basis.source}, layers)


def basis_from_bytes(data: bytes) -> SubspaceBasis:
    meta, layers = _decode(data, KIND_BASIS)
    layouts = _layouts(layers)
    parts = [arrays for _, _, arrays in layers]
    if any(len(a) != 3 for a in parts):
        raise CorruptArtifactError("basis layer must hold directions, singular values and origin")
    try:
        return SubspaceBasis(tuple(layouts), tuple(a[0] for a in parts), tuple(a[1] for a in parts),
                             tuple(a[2] for a in parts), meta.get("source", ""))
    except Exception as exc:
        raise CorruptArtifactError(f"inconsistent basis: {exc}") from exc


def state_bytes(state: LowDimState) -> bytes:
    layers = [(None, f"layer{i}", [m]) for i, m in enumerate(state.members)]
    return _encode(KIND_STATE, {"h": state.h}, layers)


def state_from_bytes(data: bytes) -> LowDimState:
    _, layers = _decode(data, KIND_STATE)
    members = []
    for _, _, arrays in layers:
        if len(arrays) != 1 or arrays[0].ndim != 2:
            raise CorruptArtifactError("state layer must hold one h x d member matrix")
        members.append(arrays[0])
    return LowDimState(members)


_SAVERS = {Trajectory: trajectory_bytes, SubspaceBasis: basis_bytes, LowDimState: state_bytes}


def save(obj, path) -> Path:
    """Write ``obj`` atomically (temp file then rename)."""
    path = Path(path)
    try:
        data = _SAVERS[type(obj)](obj)
    except KeyError:
        raise TypeError(f"cannot persist objects of type {type(obj).__name__}") from None
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def _read(path, hint):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} does not exist; run `{hint}` first")
    return path.read_bytes()


def load_trajectory(path, hint="itss train-full") -> Trajectory:
    return trajectory_from_bytes(_read(path, hint))


def load_basis(path, hint="itss extract-basis") -> SubspaceBasis:
    return basis_from_bytes(_read(path, hint))


def load_state(path, hint="itss train-subspace") -> LowDimState:
    return state_from_bytes(_read(path, hint))
