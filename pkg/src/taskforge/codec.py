"""Tiny fixed-layout payload helpers (big-endian) for the built-in tasks."""

import struct

_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")


def pack_int(v: int) -> bytes:
    return _I64.pack(v)


def unpack_int(b: bytes) -> int:
    return _I64.unpack(b)[0]


def pack_float(v: float) -> bytes:
    return _F64.pack(v)


def unpack_float(b: bytes) -> float:
    return _F64.unpack(b)[0]
