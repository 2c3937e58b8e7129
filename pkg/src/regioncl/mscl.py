"""MSCL named-tensor container.

Layout (all integers u32 little-endian)::

    b"MSCL" | version | { name_len | utf-8 name | ndim | dims... | float32 LE payload }*

Tensors follow one another until end of file. Payloads are row-major
float32, so float64 arrays are narrowed on write.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, UnsupportedVersionError

MAGIC = b"MSCL"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, _U32.pack(version)]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(int(d)) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8:
        raise FormatError("file shorter than MSCL header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    (version,) = _U32.unpack_from(buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported MSCL version {version} (expected {VERSION})", offset=4)
    pos = 8
    out: dict[str, np.ndarray] = {}

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(buf):
            raise FormatError("truncated integer field", offset=pos)
        (value,) = _U32.unpack_from(buf, pos)
        pos += 4
        return value

    while pos < len(buf):
        start = pos
        name_len = u32()
        if pos + name_len > len(buf):
            raise FormatError("truncated tensor name", offset=pos)
        try:
            name = buf[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", offset=pos) from exc
        pos += name_len
        ndim = u32()
        dims = tuple(u32() for _ in range(ndim))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload for tensor {name!r}", offset=pos)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start)
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
