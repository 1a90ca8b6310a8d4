"""Binary tensor records: name, dtype tag, shape, little-endian payload.

Record layout::

    u16 name length | utf-8 name | 4-byte dtype tag | u8 ndim | u32 * ndim shape | payload
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

DTYPE_TAGS = {np.dtype(np.float32): b"f32\0", np.dtype(np.float64): b"f64\0"}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class SerializationError(ValueError):
    pass


def write_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    tag = DTYPE_TAGS.get(array.dtype)
    if tag is None:
        raise SerializationError(f"unsupported dtype {array.dtype} for {name!r}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(tag)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise SerializationError("truncated tensor record")
    return buf


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode("utf-8")
    tag = _read_exact(fh, 4)
    if tag not in TAG_DTYPES:
        raise SerializationError(f"unknown dtype tag {tag!r} for {name!r}")
    dtype = TAG_DTYPES[tag]
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    payload = _read_exact(fh, count * dtype.itemsize)
    array = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
    return name, array
