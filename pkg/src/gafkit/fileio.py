"""Little-endian binary container helpers shared by the on-disk formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """A binary file is malformed, truncated, or of an unsupported version."""


def write_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<H", version))


def read_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    ver = read_u16(fh)
    if ver != version:
        raise FormatError(f"unsupported format version {ver}, expected {version}")


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def write_u16(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<H", value))


def read_u16(fh: BinaryIO) -> int:
    return struct.unpack("<H", _read_exact(fh, 2))[0]


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def write_f32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    data = _read_exact(fh, 4 * count)
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u16(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u16(fh)
    return _read_exact(fh, n).decode("utf-8")


def write_blob(fh: BinaryIO, raw: bytes) -> None:
    write_u32(fh, len(raw))
    fh.write(raw)


def read_blob(fh: BinaryIO) -> bytes:
    n = read_u32(fh)
    return _read_exact(fh, n)


def expect_eof(fh: BinaryIO) -> None:
    if fh.read(1):
        raise FormatError("trailing bytes after expected end of file")
