"""Binary parameter checkpoints.

Little-endian layout:

    magic      4 bytes  b"PKFW"
    version    uint16
    precision  uint8    0 = float32, 1 = float64
    reserved   uint8
    meta_len   uint32   followed by meta_len bytes of UTF-8 JSON metadata
    count      uint32   number of parameter records

    per record:
        name_len  uint16, then name bytes (UTF-8)
        rank      uint8
        extents   uint32 * rank
        values    extent product * 4 or 8 bytes, row-major

Metadata carries provenance (config hash, seed, parent checkpoint hash);
``checkpoint_hash`` of a file is the sha256 of its bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"PKFW"
VERSION = 1
_PREC = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def save_params(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    dtypes = {t.dtype.itemsize for t in params.values()}
    if len(dtypes) > 1:
        raise CheckpointError("mixed parameter precisions in one checkpoint")
    prec = 1 if dtypes == {8} else 0
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBB", VERSION, prec, 0)
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        nb = name.encode()
        arr = np.ascontiguousarray(params[name].data, dtype=_PREC[prec])
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, prec, _ = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if prec not in _PREC:
        raise CheckpointError(f"{path}: unknown precision flag {prec}")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + meta_len].decode()) if meta_len else {}
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    dt = _PREC[prec]
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape)
        pos += n * dt.itemsize
        params[name] = arr.copy()
    return params, meta


def restore_params(path, params: dict[str, Tensor]) -> dict:
    """Load a checkpoint into an existing parameter dict, in place."""
    loaded, meta = load_params(path)
    missing = set(params) - set(loaded)
    extra = set(loaded) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, t in params.items():
        arr = loaded[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {t.data.shape}")
        t.data[...] = arr.astype(t.dtype)
    return meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
