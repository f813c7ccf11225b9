"""Little-endian binary file primitives shared by the index formats."""

from __future__ import annotations

import struct
from typing import BinaryIO


def write_varint(fh: BinaryIO, value: int) -> None:
    if value < 0:
        raise ValueError("varints are unsigned")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            fh.write(bytes((byte | 0x80,)))
        else:
            fh.write(bytes((byte,)))
            return


def read_varint(fh: BinaryIO) -> int:
    result = 0
    shift = 0
    while True:
        raw = fh.read(1)
        if not raw:
            raise EOFError("truncated varint")
        byte = raw[0]
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result
        shift += 7


def write_str(fh: BinaryIO, s: str) -> None:
    data = s.encode("utf-8")
    write_varint(fh, len(data))
    fh.write(data)


def read_str(fh: BinaryIO) -> str:
    n = read_varint(fh)
    return read_exact(fh, n).decode("utf-8")


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise EOFError(f"expected {n} bytes, got {len(data)}")
    return data


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", read_exact(fh, 8))[0]


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_f64(fh: BinaryIO) -> float:
    return struct.unpack("<d", read_exact(fh, 8))[0]


def check_magic(fh: BinaryIO, magic: bytes, version: int, kind: str) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"not a {kind} file (bad magic {got!r})")
    got_version = read_u32(fh)
    if got_version != version:
        raise ValueError(f"unsupported {kind} version {got_version} (expected {version})")
