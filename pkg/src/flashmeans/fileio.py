"""Binary dataset/assignment formats and atomic write helpers.

FKM1 (dataset), little-endian, 32-byte header:
    magic "FKM1" | version u16 = 1 | dtype u8 (0 = single, 1 = double) |
    reserved u8 = 0 | batch u64 | points u64 | dims u64
followed by batch*points*dims elements, row-major. The file size is exactly
32 + batch*points*dims*elem_bytes.

FKA1 (assignments), little-endian, 32-byte header:
    magic "FKA1" | version u32 = 1 | reserved u64 = 0 | batch u64 | points u64
followed by batch*points u32 cluster ids, batch-major.

Whole-file writes go through a temp-then-rename so readers never observe a
partial file; the chunk-wise assignment store does the same at finalize.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .core import Assignments, DataFormatError, DataMatrix

__all__ = [
    "FKM1_HEADER_BYTES",
    "FKA1_HEADER_BYTES",
    "Fkm1Header",
    "write_fkm1",
    "read_fkm1",
    "read_fkm1_header",
    "write_fka1",
    "read_fka1",
    "read_fka1_header",
    "AssignmentStore",
    "atomic_write_bytes",
    "atomic_write_text",
]

_FKM1 = struct.Struct("<4sHBBQQQ")
_FKA1 = struct.Struct("<4sIQQQ")
FKM1_HEADER_BYTES = _FKM1.size
FKA1_HEADER_BYTES = _FKA1.size
assert FKM1_HEADER_BYTES == 32 and FKA1_HEADER_BYTES == 32

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_PRECISION = {"single": 0, "double": 1}


def _tmp_path(path: str) -> str:
    return f"{path}.tmp.{os.getpid()}"


def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = _tmp_path(path)
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class Fkm1Header:
    dtype_code: int
    batch: int
    points: int
    dims: int

    @property
    def dtype(self) -> np.dtype:
        return _DTYPE_CODES[self.dtype_code]

    @property
    def precision(self) -> str:
        return "single" if self.dtype_code == 0 else "double"

    @property
    def elem_bytes(self) -> int:
        return self.dtype.itemsize

    @property
    def payload_bytes(self) -> int:
        return self.batch * self.points * self.dims * self.elem_bytes


def write_fkm1(path: str, x: DataMatrix) -> None:
    """Write one dataset atomically (temp file, then rename)."""
    header = _FKM1.pack(
        b"FKM1", 1, _CODE_FOR_PRECISION[x.precision], 0, x.batch, x.points, x.dims
    )
    le = x.data.astype(x.data.dtype.newbyteorder("<"), copy=False)
    tmp = _tmp_path(path)
    with open(tmp, "wb") as f:
        f.write(header)
        le.tofile(f)
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file: expected {n} bytes of {what}")
    return buf


def read_fkm1_header(path: str) -> Fkm1Header:
    with open(path, "rb") as f:
        raw = _read_exact(f, FKM1_HEADER_BYTES, "FKM1 header")
    magic, version, dtype_code, reserved, batch, points, dims = _FKM1.unpack(raw)
    if magic != b"FKM1":
        raise DataFormatError(f"bad magic {magic!r}; not an FKM1 file")
    if version != 1:
        raise DataFormatError(f"unsupported FKM1 version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise DataFormatError(f"unknown FKM1 dtype code {dtype_code}")
    if reserved != 0:
        raise DataFormatError("FKM1 reserved byte must be zero")
    if min(batch, points, dims) < 1:
        raise DataFormatError(f"FKM1 shape must be positive, got {(batch, points, dims)}")
    header = Fkm1Header(dtype_code, batch, points, dims)
    actual = os.path.getsize(path)
    expected = FKM1_HEADER_BYTES + header.payload_bytes
    if actual != expected:
        raise DataFormatError(
            f"FKM1 size mismatch: header implies {expected} bytes, file has {actual}"
        )
    return header


def read_fkm1(path: str) -> DataMatrix:
    header = read_fkm1_header(path)
    with open(path, "rb") as f:
        f.seek(FKM1_HEADER_BYTES)
        flat = np.fromfile(f, dtype=header.dtype, count=header.batch * header.points * header.dims)
    data = flat.astype(header.dtype.newbyteorder("="), copy=False)
    data = data.reshape(header.batch, header.points, header.dims)
    try:
        return DataMatrix(np.ascontiguousarray(data))
    except ValueError as exc:
        raise DataFormatError(f"FKM1 payload invalid: {exc}") from exc


def write_fka1(path: str, a: Assignments) -> None:
    """Write one assignment table atomically."""
    header = _FKA1.pack(b"FKA1", 1, 0, a.batch, a.points)
    payload = a.values.astype("<u4").tobytes()
    atomic_write_bytes(path, header + payload)


def _parse_fka1_header(raw: bytes) -> tuple[int, int]:
    magic, version, reserved, batch, points = _FKA1.unpack(raw)
    if magic != b"FKA1":
        raise DataFormatError(f"bad magic {magic!r}; not an FKA1 file")
    if version != 1:
        raise DataFormatError(f"unsupported FKA1 version {version}")
    if reserved != 0:
        raise DataFormatError("FKA1 reserved field must be zero")
    if min(batch, points) < 1:
        raise DataFormatError(f"FKA1 shape must be positive, got {(batch, points)}")
    return batch, points


def read_fka1_header(path: str) -> tuple[int, int]:
    """(batch, points) from an FKA1 file, validating without loading ids."""
    with open(path, "rb") as f:
        return _parse_fka1_header(_read_exact(f, FKA1_HEADER_BYTES, "FKA1 header"))


def read_fka1(path: str) -> Assignments:
    with open(path, "rb") as f:
        batch, points = _parse_fka1_header(_read_exact(f, FKA1_HEADER_BYTES, "FKA1 header"))
        expected = FKA1_HEADER_BYTES + batch * points * 4
        actual = os.path.getsize(path)
        if actual != expected:
            raise DataFormatError(
                f"FKA1 size mismatch: header implies {expected} bytes, file has {actual}"
            )
        ids = np.fromfile(f, dtype="<u4", count=batch * points)
    if ids.size and int(ids.max()) > np.iinfo(np.int32).max:
        raise DataFormatError("FKA1 cluster ids exceed the supported range")
    return Assignments(np.ascontiguousarray(ids.astype(np.int32).reshape(batch, points)))


class AssignmentStore:
    """Chunk-wise FKA1 writer for streaming runs.

    Ids are persisted per chunk as passes complete; unwritten slots hold a
    0xFFFFFFFF sentinel so the first real write always registers as a
    change. finalize() renames the working file into place atomically.
    """

    def __init__(self, path: str, batch: int, points: int):
        if min(batch, points) < 1:
            raise ValueError("store shape must be positive")
        self.path = path
        self.batch = batch
        self.points = points
        self._tmp = _tmp_path(path)
        self._f = open(self._tmp, "w+b")
        self._f.write(_FKA1.pack(b"FKA1", 1, 0, batch, points))
        sentinel = np.full(min(points, 1 << 16), 0xFFFFFFFF, "<u4").tobytes()
        remaining = batch * points * 4
        while remaining > 0:
            piece = sentinel[: min(len(sentinel), remaining)]
            self._f.write(piece)
            remaining -= len(piece)
        self._f.flush()

    def _offset(self, b: int, lo: int) -> int:
        return FKA1_HEADER_BYTES + (b * self.points + lo) * 4

    def write_chunk(self, b: int, lo: int, ids) -> bool:
        """Persist one chunk's ids; returns True when any id changed."""
        ids = np.ascontiguousarray(np.asarray(ids).astype("<u4"))
        if lo < 0 or lo + ids.size > self.points or not 0 <= b < self.batch:
            raise ValueError("chunk write outside the store bounds")
        self._f.seek(self._offset(b, lo))
        existing = np.frombuffer(self._f.read(ids.size * 4), dtype="<u4")
        changed = not np.array_equal(existing, ids)
        if changed:
            self._f.seek(self._offset(b, lo))
            self._f.write(ids.tobytes())
        return changed

    def read_all(self) -> Assignments:
        self._f.seek(FKA1_HEADER_BYTES)
        ids = np.frombuffer(
            self._f.read(self.batch * self.points * 4), dtype="<u4"
        ).astype(np.int32)
        return Assignments(np.ascontiguousarray(ids.reshape(self.batch, self.points)))

    def finalize(self) -> str:
        self._f.flush()
        self._f.close()
        os.replace(self._tmp, self.path)
        return self.path

    def abort(self) -> None:
        if not self._f.closed:
            self._f.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)
