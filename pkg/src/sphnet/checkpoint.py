"""Versioned binary container for named tensors.

Layout (all integers little-endian)::

    magic      8 bytes  b"SPHNCKPT"
    version    uint32   (currently 1)
    meta_len   uint32   length of the UTF-8 JSON metadata blob that follows
    meta       meta_len bytes
    count      uint32   number of tensor records
    record * count:
        name_len  uint32, name (UTF-8)
        group     uint8   0 = parameter, 1 = buffer, 2 = optimizer state
        dtype     uint8   0 = float32, 1 = float64, 2 = int64
        ndim      uint32, dims uint64 * ndim
        data      raw little-endian values, C order
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPHNCKPT"
VERSION = 1
GROUPS = ("param", "buffer", "optim")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    """Serialize ``{group: {name: array}}`` plus JSON metadata."""
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    records = [(g, n, a) for g in GROUPS for n, a in sorted(tensors.get(g, {}).items())]
    buf.write(struct.pack("<I", len(records)))
    for group, name, arr in records:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BBI", GROUPS.index(group), code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(data: bytes):
    """Inverse of :func:`dumps`; returns ``(tensors, meta)``."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {g: {} for g in GROUPS}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        group, code, ndim = struct.unpack("<BBI", take(6))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(shape)
        tensors[GROUPS[group]][name] = arr.astype(dtype.newbyteorder("="))
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None):
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes())
