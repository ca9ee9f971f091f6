"""Reading and writing the GMX1 matrix container.

Wire format, little-endian throughout:

    offset 0   4 bytes   magic "GMX1"
    offset 4   1 byte    version, 0x01
    offset 5   1 byte    dtype: 0x00 = float32, 0x01 = int64
    offset 6   4 bytes   rows, uint32
    offset 10  4 bytes   cols, uint32
    offset 14  payload, row-major

Files ending in .csv are accepted as a fallback: RFC-4180, no header row,
one matrix row per line, decimal numbers.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, MatrixFormatError, NonFiniteValue, TruncatedPayload

MAGIC = b"GMX1"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")

_DTYPE_CODES = {0x00: np.dtype("<f4"), 0x01: np.dtype("<i8")}
_CODE_FOR_KIND = {"f": 0x00, "i": 0x01}


def write_matrix(path, values) -> None:
    """Write a 2-D array to `path` as GMX1 (or CSV if the suffix is .csv).

    Float input is cast to float32, integer input to int64. Refuses
    non-finite float values since readers reject them anyway.
    """
    path = Path(path)
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise MatrixFormatError(f"{path}: expected a 2-D array, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"{path}: refusing to write non-finite values")
        arr = arr.astype("<f4")
    elif arr.dtype.kind in ("i", "u", "b"):
        arr = arr.astype("<i8")
    else:
        raise MatrixFormatError(f"{path}: unsupported dtype {arr.dtype}")

    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in arr:
                writer.writerow([_fmt(v) for v in row])
        return

    rows, cols = arr.shape
    header = _HEADER.pack(MAGIC, VERSION, _CODE_FOR_KIND[arr.dtype.kind], rows, cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def _fmt(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    return int(v)


def read_matrix(path) -> np.ndarray:
    """Read a GMX1 or CSV matrix. Always returns a 2-D array.

    Floats come back as float32, integers as int64. Raises BadMagic,
    TruncatedPayload, or NonFiniteValue with the offending path (and byte
    offset where one makes sense).
    """
    path = Path(path)
    if path.suffix == ".csv":
        return _read_csv(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes is too short for a header")
    magic, version, dtype_code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise MatrixFormatError(f"{path}: unknown dtype code {dtype_code:#x} at offset 5")
    dtype = _DTYPE_CODES[dtype_code]
    expected = rows * cols * dtype.itemsize
    got = len(raw) - _HEADER.size
    if got != expected:
        raise TruncatedPayload(
            f"{path}: payload is {got} bytes at offset {_HEADER.size}, header promises {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(rows, cols)
    if dtype.kind == "f" and not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteValue(
            f"{path}: non-finite value at element {bad} "
            f"(offset {_HEADER.size + bad * dtype.itemsize})"
        )
    return arr.copy()


def _read_csv(path: Path) -> np.ndarray:
    # dtype is decided from the text itself: fields that are all bare integer
    # literals parse as int64, anything with a point or exponent as float32
    rows = []
    width = None
    integral = True
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record:
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise MatrixFormatError(
                    f"{path}: line {lineno} has {len(record)} fields, expected {width}"
                )
            if integral and not all(_is_int_literal(f) for f in record):
                integral = False
            rows.append(record)
    if not rows:
        raise MatrixFormatError(f"{path}: empty CSV")
    try:
        arr = np.array(rows, dtype=np.int64 if integral else np.float64)
    except (ValueError, OverflowError) as exc:
        raise MatrixFormatError(f"{path}: {exc}") from exc
    if integral:
        return arr
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise NonFiniteValue(f"{path}: non-finite value at element {bad}")
    return arr.astype(np.float32)


def _is_int_literal(field: str) -> bool:
    field = field.strip()
    if field.startswith(("+", "-")):
        field = field[1:]
    return field.isdigit()


def peek_shape(path) -> tuple[int, int]:
    """Shape of a matrix file without reading the payload (GMX1 only;
    CSV falls back to a full read)."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_matrix(path).shape
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TruncatedPayload(f"{path}: {len(raw)} bytes is too short for a header")
    magic, version, dtype_code, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise MatrixFormatError(f"{path}: unknown dtype code {dtype_code:#x} at offset 5")
    return int(rows), int(cols)
