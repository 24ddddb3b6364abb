"""Named-tensor archive ("NTA1") serialization.

Layout, all little-endian, no padding:

    magic "NTA1"
    u32 metadata count, then per entry: u32 key len, key bytes,
        u32 value len, value bytes (UTF-8)
    u32 tensor count, then per tensor: u32 name len, name bytes,
        u8 ndim, ndim x u32 dims, raw float32 data

Round trips are bit-exact for float32 tensors and metadata strings.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MAGIC = b"NTA1"


class CheckpointError(DataError):
    """Malformed checkpoint archive."""


class BadMagicError(CheckpointError):
    """File does not start with the NTA1 magic."""


class TruncatedError(CheckpointError):
    """File ended before the declared content."""


class DuplicateNameError(CheckpointError):
    """Two tensors (or metadata keys) share a name."""


def _tensor_data(value) -> np.ndarray:
    from .nn import Parameter
    from .tensor import Tensor

    if isinstance(value, Parameter):
        value = value.tensor.data
    elif isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value, dtype=np.float32)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
    return arr


def save_weights(tensors, meta: dict[str, str], path) -> None:
    """Write named tensors plus string metadata; the write is atomic."""
    items = list(tensors.items())
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise DuplicateNameError("duplicate tensor names in checkpoint payload")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(meta))
    for k, v in meta.items():
        kb, vb = str(k).encode("utf-8"), str(v).encode("utf-8")
        blob += struct.pack("<I", len(kb)) + kb
        blob += struct.pack("<I", len(vb)) + vb
    blob += struct.pack("<I", len(items))
    for name, value in items:
        arr = _tensor_data(value)
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += arr.tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(
                f"archive truncated: wanted {n} bytes at offset {self.pos}, have {len(self.raw)}"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_weights(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read an NTA1 archive into (tensors, metadata)."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not an NTA1 archive")
    meta: dict[str, str] = {}
    for _ in range(r.u32()):
        k = r.take(r.u32()).decode("utf-8")
        v = r.take(r.u32()).decode("utf-8")
        if k in meta:
            raise DuplicateNameError(f"duplicate metadata key {k!r}")
        meta[k] = v
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        tensors[name] = np.array(data, dtype=np.float32)  # own, writable copy
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return tensors, meta


@dataclass
class ModelCheckpoint:
    """Named-tensor archive plus metadata (architecture, iteration, EMA flag)."""

    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def save(self, path) -> None:
        save_weights(self.tensors, self.meta, path)

    @staticmethod
    def load(path) -> "ModelCheckpoint":
        tensors, meta = load_weights(path)
        return ModelCheckpoint(tensors=tensors, meta=meta)

