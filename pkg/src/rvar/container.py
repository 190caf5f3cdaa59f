"""Reader and writer for the ``RVAR`` binary container.

Layout (all integers little-endian)::

    b"RVAR"    magic
    u32        format version
    blocks until end of file, each:
        u32        name length
        bytes      utf-8 name
        u64        rank
        u64[rank]  dims
        payload    row-major values, f64 unless the name is in INT_BLOCKS (i64)

Blocks are written in insertion order, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"RVAR"
VERSION = 1

# block names whose payload is i64 rather than f64
INT_BLOCKS = frozenset({
    "day_index", "loc_rows", "loc_cols", "times", "origin_day",
    "iterations", "converged", "meta",
})

_F64 = np.dtype("<f8")
_I64 = np.dtype("<i8")


class ContainerError(ValueError):
    """Raised for malformed or unexpected container content."""


def _dtype_for(name: str) -> np.dtype:
    return _I64 if name in INT_BLOCKS else _F64


def dumps(blocks: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in blocks.items():
        dtype = _dtype_for(name)
        arr = np.asarray(value)
        if dtype is _I64 and arr.size and not np.issubdtype(arr.dtype, np.integer) \
                and arr.dtype != np.bool_:
            raise ContainerError(f"block {name!r} must hold integers")
        arr = np.asarray(arr, dtype=dtype)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("bad magic, not an RVAR file")
    if len(buf) < 8:
        raise ContainerError("truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported format version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise ContainerError("truncated block name")
            pos += nlen
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dtype = _dtype_for(name)
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = n * dtype.itemsize
            if pos + nbytes > len(buf):
                raise ContainerError(f"block {name!r} truncated")
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(dims)
            pos += nbytes
            out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    return out


def save(path, blocks: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(blocks))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def require(blocks: Mapping[str, np.ndarray], *names: str) -> None:
    missing = [n for n in names if n not in blocks]
    if missing:
        raise ContainerError(f"missing block(s): {', '.join(missing)}")
