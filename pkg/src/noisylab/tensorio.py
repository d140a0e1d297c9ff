"""The ``VITW1`` named-tensor container shared by backbone, adapter and run checkpoints.

Layout (little-endian): magic ``VITW1``, u32 tensor_count, then per tensor
u16 name_len, name bytes (UTF-8), u8 rank, u32 dims..., float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VITW1"


class ContainerError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def save_tensors(path, tensors: Mapping[str, object]) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"tensor {name} has rank {arr.ndim} > 255")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:5]!r}, expected {MAGIC!r}")
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ContainerError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(raw):
            raise ContainerError(f"{path}: truncated tensor name at byte {pos}")
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise ContainerError(f"{path}: truncated data for tensor {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(raw):
        raise ContainerError(f"{path}: {len(raw) - pos} trailing bytes after byte {pos}")
    return tensors
