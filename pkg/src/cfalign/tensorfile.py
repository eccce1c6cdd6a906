"""Binary ``.cfat`` tensor files.

Layout::

    b"CFAT" | version u8 (0x01) | dtype u8 (0x02 = f64) | ndim u32 LE
    | ndim x dim u64 LE | row-major f64 LE payload
"""

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError

MAGIC = b"CFAT"
VERSION = 0x01
DTYPE_F64 = 0x02
_HEADER = struct.Struct("<4sBBI")


def to_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f8", order="C")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def from_bytes(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFileError(f"{name}: truncated header")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFileError(f"{name}: bad magic bytes {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"{name}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise TensorFileError(f"{name}: unsupported dtype code {dtype}")
    offset = _HEADER.size
    if len(buf) < offset + 8 * ndim:
        raise TensorFileError(f"{name}: truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != 8 * count:
        raise TensorFileError(
            f"{name}: payload has {len(buf) - offset} bytes, expected {8 * count}"
        )
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(np.float64)


def save(path, array) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(array))
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot write ({exc.strerror})") from exc


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot read ({exc.strerror})") from exc
    return from_bytes(buf, name=str(path))
