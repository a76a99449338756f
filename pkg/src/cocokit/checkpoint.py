"""Byte-stable container for named arrays plus a JSON header.

Layout (little-endian)::

    b"CCKP" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    | raw array bytes, concatenated in header order

The header lists ``{"name", "dtype", "shape"}`` for every array.  Identical
inputs always produce identical bytes, and float64 values round-trip exactly.
Writes go to a temporary sibling first and are renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CCKP"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _dtype_code(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.floating):
        return "f8"
    if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_:
        return "i8"
    raise TypeError(f"unsupported dtype {a.dtype}")


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs = [], []
    for name, a in arrays.items():
        a = np.asarray(a)
        code = _dtype_code(a)
        entries.append({"name": name, "dtype": code, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen].decode())
    offset = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="), copy=True)
        offset += count * dt.itemsize
    if offset != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return header["meta"], arrays


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(meta, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
