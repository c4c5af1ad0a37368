"""Binary container plumbing shared by the bank and checkpoint formats.

Both formats are magic + u32 version + a fixed-layout little-endian payload.
Decode failures are distinguished: wrong magic, unsupported version, and
truncation each raise their own error type.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import BadMagicError, TruncatedFileError, UnsupportedVersionError

__all__ = [
    "read_exact",
    "write_header",
    "read_header",
    "write_u32",
    "read_u32",
    "write_f64_array",
    "read_f64_array",
    "write_string",
    "read_string",
]


def read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"expected {n} bytes, file ended after {len(data)}")
    return data


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 4
    f.write(magic)
    write_u32(f, version)


def read_header(f: BinaryIO, magic: bytes, expected_version: int) -> None:
    found = read_exact(f, 4)
    if found != magic:
        raise BadMagicError(f"bad magic {found!r}, expected {magic!r}")
    version = read_u32(f)
    if version != expected_version:
        raise UnsupportedVersionError(version, expected_version)


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(f, 4))[0]


def write_f64_array(f: BinaryIO, arr: np.ndarray) -> None:
    """Shape-prefixed float64 array: u32 ndim, u32 dims, then raw LE payload."""
    arr = np.asarray(arr, dtype="<f8")  # asarray keeps 0-d rank intact
    write_u32(f, arr.ndim)
    for dim in arr.shape:
        write_u32(f, dim)
    f.write(arr.tobytes())


def read_f64_array(f: BinaryIO) -> np.ndarray:
    ndim = read_u32(f)
    shape = tuple(read_u32(f) for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = read_exact(f, 8 * count)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def write_string(f: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    write_u32(f, len(data))
    f.write(data)


def read_string(f: BinaryIO) -> str:
    n = read_u32(f)
    return read_exact(f, n).decode("utf-8")
