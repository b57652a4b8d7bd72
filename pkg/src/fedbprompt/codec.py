"""Little-endian tensor entry encoding shared by the FBPR and FBDS formats.

Entry layout: name length u16, UTF-8 name, rank u8, dims as u32 each,
values as f32 row-major. Files end with a CRC32 of all preceding bytes.
"""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np


class FormatError(ValueError):
    """Bad magic, version, truncation or checksum."""


def encode_entry(name: str, values: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(values)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def entry_nbytes(name: str, shape: tuple[int, ...]) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * math.prod(shape)


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def strip_crc(blob: bytes) -> bytes:
    if len(blob) < 4:
        raise FormatError("truncated: no checksum")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch")
    return body


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated message")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def entry(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = math.prod(shape)
        values = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float64)
        return name, values.reshape(shape)

    def done(self) -> bool:
        return self.pos == len(self.buf)
