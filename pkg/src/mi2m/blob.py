"""Versioned binary container for parameter arrays.

Layout (little-endian)::

    8 bytes   magic
    u32       format version
    u32       header length n
    n bytes   UTF-8 JSON header (sorted keys, compact)
    u32       array count
    per array:
        u32 name length, name bytes (UTF-8)
        u8  dtype code (0 = float32, 1 = float64, 2 = int64)
        u32 ndim, u32 x ndim shape
        raw row-major data

Writing the same header and arrays always produces the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError

BLOB_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _CODES:
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float32)
    return arr


def encode_blob(magic: bytes, header: Mapping, arrays: Mapping[str, object]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", BLOB_VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        arr = _as_numpy(value)
        code = _CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode_blob(data: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != magic:
        raise CheckpointError(f"{source}: bad magic {data[:8]!r}, expected {magic!r}")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != BLOB_VERSION:
            raise CheckpointError(f"{source}: unsupported version {version}, expected {BLOB_VERSION}")
        off = 16
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + size > len(data):
                raise CheckpointError(f"{source}: truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes")
    return header, arrays


def write_blob(path, magic: bytes, header: Mapping, arrays: Mapping[str, object]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_blob(magic, header, arrays))
    tmp.replace(path)


def read_blob(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_blob(path.read_bytes(), magic, str(path))
