"""Little-endian binary primitives shared by the ADT1/ADM1/ADB1 formats.

A tensor is written as ``u8 ndim, u64 dims..., f64 payload`` (row-major).
"""
from __future__ import annotations

import struct

import numpy as np

from diffad.errors import FormatError


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack("<B", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self.parts.append(struct.pack("<d", v))

    def f64_array(self, a) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def tensor(self, a) -> None:
        a = np.asarray(a, dtype=np.float64)
        self.u8(a.ndim)
        for d in a.shape:
            self.u64(d)
        self.f64_array(a)

    def text(self, s: str) -> None:
        b = s.encode("utf-8")
        self.u64(len(b))
        self.raw(b)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    def __init__(self, data: bytes, what: str = "file"):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (need {n} more)")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def f64_array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def tensor(self) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u64() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        return self.f64_array(n).reshape(shape)

    def text(self) -> str:
        n = self.u64()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid UTF-8 text block") from exc

    def at_end(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")
