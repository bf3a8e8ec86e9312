"""Binary parameter files.

Layout (little-endian)::

    b"NNC1"
    u32  number of arrays
    per array: u16 name length, utf-8 name, u8 ndim, ndim x u32 dims
    payload: every array's float64 values, row-major, in table order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Params

MAGIC = b"NNC1"


class CheckpointError(ValueError):
    pass


def dumps(params: Params) -> bytes:
    table = [struct.pack("<I", len(params))]
    payload = []
    for name, arr in params.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        table.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        table.append(struct.pack(f"<{a.ndim}I", *a.shape))
        payload.append(a.tobytes(order="C"))
    return MAGIC + b"".join(table) + b"".join(payload)


def loads(blob: bytes) -> Params:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an NNC1 parameter file")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            entries.append((name, shape))
        out: Params = {}
        for name, shape in entries:
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(blob):
                raise CheckpointError("truncated payload")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"corrupt shape table: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes")
    return out


def save_params(params: Params, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load_params(path: str | Path) -> Params:
    return loads(Path(path).read_bytes())
