"""Writer (and auditing reader) for the binary matrix files.

The 14-byte header is magic "GMX1", a version byte, a dtype byte (0x00 for
float32, 0x01 for int64), then row and column counts as little-endian u32.
The payload is the dense row-major matrix in the same byte order.

This layout is the contract between the exporter and the analysis toolkit,
so it is implemented here from the format definition instead of imported;
the toolkit side carries its own copy and the two are held together by
round-trip tests.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

_MAGIC = b"GMX1"
_VERSION = 1
_CODE_F32 = 0x00
_CODE_I64 = 0x01
_HEADER = struct.Struct("<4sBBII")
_WIRE = {_CODE_F32: np.dtype("<f4"), _CODE_I64: np.dtype("<i8")}


def matrix_bytes(array: np.ndarray) -> bytes:
    """Serialize a non-empty 2-D float32 or int64 array."""
    arr = np.ascontiguousarray(array)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataFormatError(f"need a non-empty 2-D array, got shape {arr.shape}")
    if arr.dtype == np.float32:
        code = _CODE_F32
        if not np.isfinite(arr).all():
            raise DataFormatError("refusing to write non-finite values")
    elif arr.dtype == np.int64:
        code = _CODE_I64
    else:
        raise DataFormatError(
            f"unsupported dtype {arr.dtype}; cast to float32 or int64 first"
        )
    rows, cols = arr.shape
    header = _HEADER.pack(_MAGIC, _VERSION, code, rows, cols)
    return header + arr.astype(_WIRE[code], copy=False).tobytes()


def write_matrix(path, array: np.ndarray) -> str:
    """Write a matrix file atomically; returns the sha256 of its bytes."""
    try:
        blob = matrix_bytes(array)
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def inspect_bytes(blob: bytes) -> tuple[str, str]:
    """Classify raw file bytes: ("ok", "") or a (status, detail) flag.

    Statuses: "bad-header" for a mangled or foreign header, "truncated" when
    the payload does not match the promised size.
    """
    if len(blob) < _HEADER.size:
        return "truncated", f"file is {len(blob)} bytes, the header alone needs {_HEADER.size}"
    magic, version, code, rows, cols = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        return "bad-header", f"magic is {magic!r}, expected {_MAGIC!r}"
    if version != _VERSION:
        return "bad-header", f"unknown format version {version}"
    if code not in _WIRE:
        return "bad-header", f"unknown dtype code {code:#04x}"
    if rows < 1 or cols < 1:
        return "bad-header", f"degenerate shape {rows}x{cols}"
    expect = rows * cols * _WIRE[code].itemsize
    got = len(blob) - _HEADER.size
    if got != expect:
        return "truncated", f"payload is {got} bytes, header promises {expect}"
    return "ok", ""


def read_matrix(path) -> np.ndarray:
    """Parse a matrix file back into an array; raises on any corruption."""
    blob = Path(path).read_bytes()
    status, detail = inspect_bytes(blob)
    if status != "ok":
        raise DataFormatError(f"{path}: {detail}")
    _, _, code, rows, cols = _HEADER.unpack_from(blob)
    arr = np.frombuffer(blob, dtype=_WIRE[code], offset=_HEADER.size)
    return arr.reshape(rows, cols).copy()


def peek_shape(path) -> tuple[int, int]:
    """Read only the header and return (rows, cols)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DataFormatError(f"{path}: file is too short to hold a header")
    magic, version, code, rows, cols = _HEADER.unpack(head)
    if magic != _MAGIC or version != _VERSION or code not in _WIRE:
        raise DataFormatError(f"{path}: not a matrix file")
    return int(rows), int(cols)
