"""Little-endian binary tensor files.

Layout: ``b"TNSR"``, u8 version (1), u8 dtype (0 = f64, 1 = f32), u8 ndim,
``ndim`` little-endian u64 extents, then the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class TnsrFormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise TnsrFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, promote: bool = True) -> np.ndarray:
    """Parse one TNSR record; f32 payloads are promoted to f64 by default."""
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TnsrFormatError("bad magic: not a TNSR record")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TnsrFormatError(f"unsupported TNSR version {version}")
    if code not in _DTYPES:
        raise TnsrFormatError(f"unknown dtype code {code}")
    off = 7
    if len(buf) < off + 8 * ndim:
        raise TnsrFormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    need = count * dtype.itemsize
    if len(buf) - off != need:
        raise TnsrFormatError(
            f"payload size {len(buf) - off} does not match shape {tuple(shape)} ({need} bytes)"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    arr = arr.astype(np.float64) if promote else arr.astype(dtype.newbyteorder("="))
    return arr


def save(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: Union[str, Path], promote: bool = True) -> np.ndarray:
    return decode(Path(path).read_bytes(), promote=promote)
