"""Versioned binary container for named arrays plus a JSON header.

Layout (little-endian)::

    b"TSCKPT\\0" | u16 version | u32 header bytes | header (utf-8 JSON, sorted keys)
    u32 n_arrays
    n_arrays x ( u16 name bytes | name | u8 dtype code | u8 ndim | ndim x u32 dims | data )

dtype code 0 is float32 (all learnable parameters), 1 is int64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], header: dict) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC + struct.pack("<HI", VERSION, len(head)) + head)
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = 1 if arr.dtype.kind in "iub" else 0
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        arr = np.require(arr.astype(_DTYPES[code], copy=False), requirements="C")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    return bytes(out)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _loads(data)
    except (struct.error, ValueError, KeyError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from e


def _loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version} (expected {VERSION})")
    off += 6
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode("utf-8")
        off += nl
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(dims)
        off += count * dt.itemsize
        arrays[name] = arr.astype(np.float32 if code == 0 else np.int64)
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after the last array")
    return arrays, header


def save(path: str | Path, arrays: dict[str, np.ndarray], header: dict) -> None:
    Path(path).write_bytes(dumps(arrays, header))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return loads(data)
