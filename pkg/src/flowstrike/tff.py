"""TFF tensor file format and the container built on top of it.

A bare tensor is: magic ``TFF1`` | u8 rank | rank x u32 little-endian dims |
f32 little-endian values, row-major. Checkpoints, statistics and cached
datasets are containers: a JSON metadata header followed by named tensors.
Both round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFF1"
CONTAINER_MAGIC = b"TFFC"


class FormatError(ValueError):
    """Raised for bad magic bytes, truncated files or malformed headers."""


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds u8")
    fh.write(MAGIC)
    fh.write(struct.pack("B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("B", _read_exact(fh, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
    )
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(fh, 4 * count)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---- container: JSON metadata + named tensors --------------------------------


def save_container(path, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write metadata and an ordered list of named tensors to one file."""
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CONTAINER_MAGIC:
            raise FormatError(f"bad container magic {magic!r}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            tensors.append((name, read_tensor(fh)))
    return meta, tensors
