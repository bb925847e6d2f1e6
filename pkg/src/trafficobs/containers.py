"""Self-describing binary containers for checkpoints and datasets.

Layout::

    magic (8 bytes)
    u64 metadata length, metadata (UTF-8 JSON, sorted keys)
    u32 array count
    per array: u32 name length, name (UTF-8), u32 ndim, u64 dims..., little-endian f64 data

Integer arrays are stored as f64 and converted back by the reader on request.
All integers in the framing are little-endian.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FNOCKPT1"
DATASET_MAGIC = b"RINGDS01"


class ContainerError(ValueError):
    pass


def dumps(magic: bytes, metadata: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != magic:
        raise ContainerError(f"bad magic {data[:8]!r}, expected {magic!r}")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ContainerError("truncated container")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise ContainerError("trailing bytes after last array")
    return metadata, arrays


def write(path: str | Path, magic: bytes, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, metadata, arrays))


def read(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)
