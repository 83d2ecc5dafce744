"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"SDAA" | version | parameter count
    per parameter, in sorted name order:
        name length | UTF-8 name | rank | extents x rank | float32 LE values
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .params import ParamStore

MAGIC = b"SDAA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParamStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> ParamStore:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic, not an SDAA checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    store = ParamStore(np.float32)
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        store.add(name, values.astype(np.float32))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last parameter")
    return store


def save_checkpoint(path: str | os.PathLike, params: ParamStore) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
