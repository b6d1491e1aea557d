"""Flat binary tensor container shared by datasets, checkpoints and prediction archives.

Single-tensor record layout (all integers 64-bit little-endian)::

    magic   4 bytes  b"AVT1"
    dtype   uint64   dtype code (see ``DTYPE_CODES``)
    rank    uint64
    dims    rank x uint64
    data    row-major, little-endian element bytes

A bundle file holds several named records::

    magic   4 bytes  b"AVB1"
    count   uint64
    repeated: name_len uint64, utf-8 name, tensor record
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"AVT1"
BUNDLE_MAGIC = b"AVB1"

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
    np.dtype("<i4"): 5,
    np.dtype("bool"): 6,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

_U64 = struct.Struct("<Q")


class CorruptDataError(ValueError):
    """A file does not match the container layout, its checksum or its declared shape."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptDataError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u64(fh: BinaryIO, what: str) -> int:
    return _U64.unpack(_read_exact(fh, 8, what))[0]


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=dt)
    fh.write(TENSOR_MAGIC)
    fh.write(_U64.pack(DTYPE_CODES[dt]))
    fh.write(_U64.pack(arr.ndim))
    for d in arr.shape:
        fh.write(_U64.pack(d))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise CorruptDataError(f"bad tensor magic {magic!r}")
    code = _read_u64(fh, "dtype code")
    if code not in CODE_DTYPES:
        raise CorruptDataError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    rank = _read_u64(fh, "rank")
    if rank > 16:
        raise CorruptDataError(f"implausible rank {rank}")
    shape = tuple(_read_u64(fh, "dims") for _ in range(rank))
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    data = _read_exact(fh, n, "tensor data")
    return np.frombuffer(data, dtype=dt).reshape(shape).copy()


def save_tensor(path, array) -> str:
    """Write one tensor to ``path`` and return the sha256 of the file bytes."""
    buf = io.BytesIO()
    write_tensor(buf, array)
    raw = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(raw)
    return hashlib.sha256(raw).hexdigest()


def load_tensor(path, sha256: str | None = None, shape=None) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if sha256 is not None and hashlib.sha256(raw).hexdigest() != sha256:
        raise CorruptDataError(f"checksum mismatch for {os.fspath(path)}")
    fh = io.BytesIO(raw)
    arr = read_tensor(fh)
    if fh.read(1):
        raise CorruptDataError(f"trailing bytes in {os.fspath(path)}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise CorruptDataError(f"{os.fspath(path)}: shape {arr.shape} != expected {tuple(shape)}")
    return arr


def save_bundle(path, tensors: Mapping[str, np.ndarray]) -> str:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(_U64.pack(len(tensors)))
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        buf.write(_U64.pack(len(enc)))
        buf.write(enc)
        write_tensor(buf, arr)
    raw = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(raw)
    return hashlib.sha256(raw).hexdigest()


def load_bundle(path, sha256: str | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if sha256 is not None and hashlib.sha256(raw).hexdigest() != sha256:
        raise CorruptDataError(f"checksum mismatch for {os.fspath(path)}")
    fh = io.BytesIO(raw)
    if _read_exact(fh, 4, "bundle magic") != BUNDLE_MAGIC:
        raise CorruptDataError("bad bundle magic")
    out = {}
    for _ in range(_read_u64(fh, "count")):
        name = _read_exact(fh, _read_u64(fh, "name length"), "name").decode("utf-8")
        out[name] = read_tensor(fh)
    if fh.read(1):
        raise CorruptDataError(f"trailing bytes in {os.fspath(path)}")
    return out
