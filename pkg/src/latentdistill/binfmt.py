"""Shared little-endian binary container primitives.

Every container starts with an 8-byte ASCII magic followed by a u32 format
version. Integers are little-endian unsigned, floats IEEE-754 little-endian,
strings are a u32 byte length followed by UTF-8 bytes. Readers reject
unknown magics and versions, truncated payloads and trailing bytes, and never
return partially decoded objects.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

VERSION = 1


class FormatError(ValueError):
    pass


class Writer:
    def __init__(self, magic: bytes, version: int = VERSION):
        if len(magic) != 8:
            raise ValueError("magic must be 8 bytes")
        self.buf = bytearray(magic)
        self.u32(version)

    def u32(self, v: int):
        self.buf += struct.pack("<I", int(v))

    def u64(self, v: int):
        self.buf += struct.pack("<Q", int(v))

    def f64(self, v: float):
        self.buf += struct.pack("<d", float(v))

    def raw(self, b: bytes):
        self.buf += b

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf += b

    def array(self, a: np.ndarray, dtype: str):
        self.buf += np.ascontiguousarray(a, dtype=dtype).tobytes()

    def shaped(self, a: np.ndarray, dtype: str = "<f8"):
        """Array prefixed with its rank and dimensions."""
        a = np.asarray(a)
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.array(a, dtype)

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int = VERSION):
        self.data = memoryview(data)
        self.pos = 0
        got = bytes(self._take(8)) if len(data) >= 8 else bytes(data)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise FormatError(f"unsupported {magic.decode()} version {v}")

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated file: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def text(self) -> str:
        n = self.u32()
        try:
            return bytes(self._take(n)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid string: {e}") from None

    def array(self, count: int, dtype: str, shape=None) -> np.ndarray:
        dt = np.dtype(dtype)
        out = np.frombuffer(self._take(count * dt.itemsize), dtype=dt).copy()
        return out.reshape(shape) if shape is not None else out

    def shaped(self, dtype: str = "<f8", max_rank: int = 8) -> np.ndarray:
        ndim = self.u32()
        if ndim > max_rank:
            raise FormatError(f"implausible array rank {ndim}")
        shape = tuple(self.u32() for _ in range(ndim))
        return self.array(int(np.prod(shape, dtype=np.int64)), dtype, shape)

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def write_bytes(path, payload: bytes):
    """Write atomically: a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def native_f8(a: np.ndarray) -> np.ndarray:
    """Values decoded from ``<f8`` as native float64 (a no-op on little-endian hosts)."""
    return np.asarray(a, dtype=np.float64)
