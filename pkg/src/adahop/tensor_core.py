"""Dense matrix helpers, outlier statistics and the AHT1 tensor file format.

A "dense matrix" throughout this package is a 2-D, C-contiguous
``numpy.float32`` array with finite entries. :func:`as_matrix` is the single
place that enforces this; every public operation funnels its inputs through it.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"AHT1"
FORMAT_VERSION = 1
HEADER_SIZE = 16
_HEADER = struct.Struct("<4sIII")
_U32_MAX = 2**32 - 1


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but a statistic is undefined for it."""


class InputError(ValueError):
    """Input contains values the operation cannot accept (NaN, empty, ...)."""


class FormatError(ValueError):
    """Malformed AHT1 file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def as_matrix(a, *, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` and return it as a C-contiguous float32 2-D array."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dimensions, got {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InputError(f"{name} contains NaN or Inf")
    return arr


def matmul_exact(a, b) -> np.ndarray:
    """Reference product ``a @ b``, accumulated in float64, rounded to float32."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


@dataclass(frozen=True)
class MatrixStats:
    gamma: float
    kurtosis: float
    frob_norm: float
    max_abs: float


def outlier_factor(a) -> float:
    """gamma(A) = m*n*max|a_ij|^2 / ||A||_F^2, in [1, m*n]."""
    x = as_matrix(a).astype(np.float64)
    # Rescale by the max first so huge/tiny entries cannot over/underflow.
    peak = np.abs(x).max()
    if peak == 0.0:
        raise DegenerateInputError("outlier factor of an all-zero matrix is undefined")
    y = x / peak
    return float(x.size / np.sum(y * y))


def excess_kurtosis(a) -> float:
    """Population excess kurtosis (fourth standardized moment minus 3)."""
    x = as_matrix(a).astype(np.float64).ravel()
    if x.size < 4:
        raise DegenerateInputError("kurtosis needs at least 4 entries")
    d = x - x.mean()
    var = np.mean(d * d)
    if var == 0.0:
        raise DegenerateInputError("kurtosis of a zero-variance matrix is undefined")
    return float(np.mean(d**4) / var**2 - 3.0)


def matrix_stats(a) -> MatrixStats:
    x = as_matrix(a)
    x64 = x.astype(np.float64)
    return MatrixStats(
        gamma=outlier_factor(x),
        kurtosis=excess_kurtosis(x),
        frob_norm=float(np.sqrt(np.sum(x64 * x64))),
        max_abs=float(np.abs(x64).max()),
    )


def encode_matrix(a) -> bytes:
    x = as_matrix(a)
    rows, cols = x.shape
    if rows > _U32_MAX or cols > _U32_MAX:
        raise ShapeError(f"shape {x.shape} does not fit the u32 header fields")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols) + x.astype("<f4").tobytes()


def decode_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    magic, version, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if rows == 0:
        raise FormatError("rows must be positive", 8)
    if cols == 0:
        raise FormatError("cols must be positive", 12)
    count = rows * cols
    if count * 4 > 2**62:
        raise FormatError(f"dimensions {rows}x{cols} overflow the payload size", 8)
    expected = HEADER_SIZE + 4 * count
    if len(buf) < expected:
        raise FormatError(f"payload truncated: expected {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload", expected)
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=HEADER_SIZE)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise FormatError("non-finite entry in payload", HEADER_SIZE + 4 * int(bad[0]))
    return data.astype(np.float32).reshape(rows, cols)


def write_atomic(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_matrix(path, a) -> None:
    write_atomic(path, encode_matrix(a))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())
