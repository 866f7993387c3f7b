"""Checkpoint container: magic "POM1", explicit little-endian payloads.

Layout (all integers little-endian):

    4 bytes   magic b"POM1"
    u32       format version
    u64       training step
    u32       config JSON byte length, then the UTF-8 JSON
    u32       tensor count
    per tensor:
        u16   name byte length, then UTF-8 name
        u16   dtype string length, then dtype (e.g. "<f8")
        u8    rank, then u64 extents
        u64   payload byte length, then raw little-endian data

Round trips are bitwise: every tensor loads back exactly as saved.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"POM1"
VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8"}


class CheckpointError(ValueError):
    pass


def _le_dtype(arr: np.ndarray) -> np.dtype:
    dt = arr.dtype.newbyteorder("<")
    if dt.str not in _ALLOWED_DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return dt


def save_checkpoint(path, tensors: dict, config: dict, step: int = 0) -> None:
    """Write named arrays plus a config echo; see module docstring for layout."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<IQ", VERSION, int(step))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        arr = np.ascontiguousarray(getattr(value, "data", value))
        dt = _le_dtype(arr)
        payload = arr.astype(dt, copy=False).tobytes()
        nb = name.encode("utf-8")
        ds = dt.str.encode("ascii")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<H", len(ds)) + ds
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        blob += struct.pack("<Q", len(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path):
    """Returns (tensors: dict[str, np.ndarray], config: dict, step: int)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, step = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (dt_len,) = r.unpack("<H")
        dt = r.take(dt_len).decode("ascii")
        if dt not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: bad dtype {dt!r} for {name!r}")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=np.dtype(dt)).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, config, step
