"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"KDNP1"
    u64  entry count
    per entry:
        u32  name length in bytes
        ...  UTF-8 name
        u32  rank
        u64 * rank  extents
        f32 * prod(extents)  payload, row-major
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"KDNP1"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:5]!r}")
    off = 5
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out
