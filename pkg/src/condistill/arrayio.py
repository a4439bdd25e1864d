"""CDAR array container.

Layout: magic ``b"CDAR"``, version byte (1), dtype byte (1 = float32 LE,
2 = uint8), ndim byte, ``ndim`` little-endian uint32 dims, row-major payload.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .exceptions import FormatError

MAGIC = b"CDAR"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _CODE_FOR[np.dtype(dt)]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or uint8") from None


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    fh.write(MAGIC + bytes([VERSION, code, arr.ndim]))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def read_array(fh: BinaryIO, name: str = "<stream>") -> np.ndarray:
    head = fh.read(7)
    if len(head) < 7 and MAGIC.startswith(head[:4]):
        raise FormatError(f"truncated payload in {name}: file ends inside an array header")
    if len(head) < 7 or head[:4] != MAGIC:
        raise FormatError(f"malformed header in {name}")
    version, code, ndim = head[4], head[5], head[6]
    if version != VERSION:
        raise FormatError(f"malformed header in {name}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"malformed header in {name}: unknown dtype code {code}")
    raw_dims = fh.read(4 * ndim)
    if len(raw_dims) < 4 * ndim:
        raise FormatError(f"truncated payload in {name}: file ends inside an array header")
    shape = struct.unpack(f"<{ndim}I", raw_dims)
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) < nbytes:
        raise FormatError(f"truncated payload in {name}: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_array(path: str | os.PathLike, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    write_array(buf, arr)
    atomic_write_bytes(Path(path), buf.getvalue())


def load_array(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        arr = read_array(fh, name=str(path))
        if fh.read(1):
            raise FormatError(f"trailing bytes after payload in {path}")
    return arr


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write-then-rename so readers never observe a partial file."""
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
