"""Flat binary tensor files.

Layout (all integers are unsigned 64-bit little-endian, all values 64-bit
little-endian floats)::

    b"LDTL0001"
    repeated until EOF:
        name length, name bytes (UTF-8), rank, dims[rank], values[prod(dims)]
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"LDTL0001"


class TensorFileError(ValueError):
    pass


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def read(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TensorFileError(f"{path}: truncated record at byte {pos}")
        piece = buf[pos:pos + n]
        pos += n
        return piece

    while pos < len(buf):
        (nlen,) = struct.unpack("<Q", read(8))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", read(8))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        vals = np.frombuffer(read(8 * count), dtype="<f8").astype(np.float64)
        if name in out:
            raise TensorFileError(f"{path}: duplicate tensor name {name!r}")
        out[name] = vals.reshape(dims)
    return out
