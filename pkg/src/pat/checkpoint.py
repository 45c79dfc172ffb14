"""PATW weight checkpoints.

Layout (all integers 32-bit little-endian unsigned)::

    b"PATW" | version | count | count x (name_len | name | rank | extents... | float32 LE payload)
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict

import numpy as np

CKPT_MAGIC = b"PATW"
CKPT_VERSION = 1


class FormatError(ValueError):
    code = "format"


class BadMagic(FormatError):
    code = "bad_magic"


class VersionMismatch(FormatError):
    code = "version_mismatch"


class TruncatedPayload(FormatError):
    code = "truncated"


def encode_weights(state: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.ndim > 3:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds 3")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagic("bad magic: not a PATW checkpoint")
    if len(buf) < 12:
        raise TruncatedPayload("truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 12
    out = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayload(f"truncated payload at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 3:
            raise FormatError(f"{name}: rank {rank} exceeds 3")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save_weights(path, state) -> None:
    data = encode_weights(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return decode_weights(f.read())
