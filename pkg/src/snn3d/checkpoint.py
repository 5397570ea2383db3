"""CSPK checkpoint format.

Layout (all integers little-endian)::

    b"CSPK"  u32 version  u32 tensor_count
    repeated: u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f32 data[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSPK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a CSPK checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
