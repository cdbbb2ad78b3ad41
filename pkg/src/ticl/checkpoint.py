"""Versioned binary container of named float32 tensors.

Layout (little-endian):
  magic "OBIX" | u32 format version | u32 tensor count
  per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims | f32 payload
  optional trailing block: u32 length | UTF-8 JSON config echo
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OBIX"
VERSION = 1


class CheckpointError(IOError):
    pass


def save(path, tensors: dict, config: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, t in tensors.items():
            # ascontiguousarray would promote rank-0 tensors to rank 1
            arr = np.asarray(getattr(t, "data", t), dtype="<f4")
            if not arr.flags.c_contiguous:
                arr = arr.copy(order="C")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
        if config is not None:
            blob = json.dumps(config).encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
    return str(path)


def load(path) -> tuple[dict, dict | None]:
    """Returns ({name: float32 ndarray}, config dict or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(tuple(dims))
        off += 4 * n
        tensors[name] = arr.copy()
    config = None
    if off < len(raw):
        (clen,) = struct.unpack_from("<I", raw, off)
        off += 4
        config = json.loads(raw[off:off + clen].decode("utf-8"))
    return tensors, config
