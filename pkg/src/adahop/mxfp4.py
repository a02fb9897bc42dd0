"""MXFP4 emulation: E2M1 element codes sharing a power-of-two scale per 32-block.

Codes are 4 bits: bit 3 is the sign, bits 0-2 index :data:`E2M1_VALUES`.
Because the magnitude index has the mantissa bit as its least significant
bit, "ties to even code index" is the same thing as IEEE ties-to-even.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor_core import InputError, ShapeError, as_matrix, matmul_exact

BLOCK_SIZE = 32
E2M1_VALUES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
E2M1_MAX = 6.0
SCALE_MIN, SCALE_MAX = -127, 127
# Exponent offset so that amax lands in [4, 8) before rounding; floor(log2(6)) == 2.
SCALE_OFFSET = 2

_MIDPOINTS = (E2M1_VALUES[1:] + E2M1_VALUES[:-1]) / 2
_SIGN_BIT = 0x8


class BlockAxis(enum.Enum):
    """Direction in which the 32-element blocks run.

    ``ALONG_COLS``: each row is cut into runs of 32 consecutive columns
    (the left operand of ``A @ B``). ``ALONG_ROWS``: each column is cut into
    runs of 32 consecutive rows (the right operand).
    """

    ALONG_ROWS = "rows"
    ALONG_COLS = "cols"


@dataclass(frozen=True)
class MxfpTensor:
    rows: int
    cols: int
    block_axis: BlockAxis
    codes: np.ndarray   # uint8, two codes per byte, low nibble first, row-major order
    scales: np.ndarray  # int8 exponents, shape (blocks along axis, other dim)

    def unpacked_codes(self) -> np.ndarray:
        n = self.rows * self.cols
        flat = np.empty(2 * self.codes.size, dtype=np.uint8)
        flat[0::2] = self.codes & 0x0F
        flat[1::2] = self.codes >> 4
        return flat[:n].reshape(self.rows, self.cols)


def _pack(codes: np.ndarray) -> np.ndarray:
    flat = codes.ravel()
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)


def _blocks(x: np.ndarray, axis: BlockAxis) -> np.ndarray:
    """View ``x`` as (nblocks, other, 32) with the block axis last."""
    if axis is BlockAxis.ALONG_COLS:
        m, n = x.shape
        return x.reshape(m, n // BLOCK_SIZE, BLOCK_SIZE).transpose(1, 0, 2)
    m, n = x.shape
    return x.reshape(m // BLOCK_SIZE, BLOCK_SIZE, n).transpose(0, 2, 1)


def _unblocks(b: np.ndarray, axis: BlockAxis, shape: tuple[int, int]) -> np.ndarray:
    if axis is BlockAxis.ALONG_COLS:
        return b.transpose(1, 0, 2).reshape(shape)
    return b.transpose(0, 2, 1).reshape(shape)


def _check_axis(shape: tuple[int, int], axis: BlockAxis) -> None:
    length = shape[1] if axis is BlockAxis.ALONG_COLS else shape[0]
    if length % BLOCK_SIZE:
        raise ShapeError(
            f"quantization axis length {length} is not divisible by {BLOCK_SIZE}"
        )


def block_scale_exponents(amax: np.ndarray) -> np.ndarray:
    """Shared exponent per block: clamp(floor(log2(amax)) - 2), 0 for empty blocks."""
    amax = np.asarray(amax, dtype=np.float64)
    out = np.zeros(amax.shape, dtype=np.int64)
    nz = amax > 0
    # frexp is exact where log2 can round up just below a power of two.
    _, exp = np.frexp(amax[nz])
    out[nz] = exp - 1 - SCALE_OFFSET
    return np.clip(out, SCALE_MIN, SCALE_MAX)


def round_to_e2m1(mag: np.ndarray) -> np.ndarray:
    """Index of the nearest E2M1 magnitude for non-negative ``mag``; ties to even.

    Magnitudes above 6 saturate to the top code.
    """
    idx = np.searchsorted(_MIDPOINTS, mag, side="left")
    on_mid = (idx < _MIDPOINTS.size) & (mag == _MIDPOINTS[np.minimum(idx, _MIDPOINTS.size - 1)])
    idx = np.where(on_mid & (idx % 2 == 1), idx + 1, idx)
    return idx.astype(np.uint8)


def quantize(a, block_axis: BlockAxis = BlockAxis.ALONG_COLS) -> MxfpTensor:
    arr = np.asarray(a)
    if arr.dtype.kind == "f" and np.isnan(arr).any():
        raise InputError("cannot quantize NaN entries")
    x = as_matrix(arr)
    block_axis = BlockAxis(block_axis)
    _check_axis(x.shape, block_axis)

    blocks = _blocks(x.astype(np.float64), block_axis)
    exps = block_scale_exponents(np.abs(blocks).max(axis=-1))
    # Multiplying by a power of two is exact in float64 for float32 inputs.
    mag = np.abs(blocks) * np.exp2(-exps.astype(np.float64))[..., None]
    idx = round_to_e2m1(mag)
    codes = np.where(np.signbit(blocks) & (idx > 0), idx | _SIGN_BIT, idx).astype(np.uint8)
    return MxfpTensor(
        rows=x.shape[0],
        cols=x.shape[1],
        block_axis=block_axis,
        codes=_pack(_unblocks(codes, block_axis, x.shape)),
        scales=exps.astype(np.int8),
    )


def decode_codes(codes: np.ndarray) -> np.ndarray:
    mag = E2M1_VALUES[codes & 0x7]
    return np.where(codes & _SIGN_BIT, -mag, mag)


def dequantize(q: MxfpTensor) -> np.ndarray:
    shape = (q.rows, q.cols)
    vals = _blocks(decode_codes(q.unpacked_codes()), q.block_axis)
    vals = vals * np.exp2(q.scales.astype(np.float64))[..., None]
    return _unblocks(vals, q.block_axis, shape).astype(np.float32)


def _round_e2m1_values(mag: np.ndarray) -> np.ndarray:
    """Nearest E2M1 magnitude, computed arithmetically per sub-grid.

    Steps are 0.5 below 2, 1 below 4 and 2 above; rint's ties-to-even on each
    sub-grid lands on the even code index, matching :func:`round_to_e2m1`.
    """
    return np.where(mag < 2, np.rint(2 * mag) / 2,
                    np.where(mag < 4, np.rint(mag), np.minimum(2 * np.rint(mag / 2), 6.0)))


def fake_quantize(a, block_axis: BlockAxis = BlockAxis.ALONG_COLS) -> np.ndarray:
    """Values of ``dequantize(quantize(a, block_axis))`` without materializing codes."""
    arr = np.asarray(a)
    if arr.dtype.kind == "f" and np.isnan(arr).any():
        raise InputError("cannot quantize NaN entries")
    x = as_matrix(arr)
    block_axis = BlockAxis(block_axis)
    _check_axis(x.shape, block_axis)
    blocks = _blocks(x.astype(np.float64), block_axis)
    scale = np.exp2(block_scale_exponents(np.abs(blocks).max(axis=-1)).astype(np.float64))[..., None]
    vals = np.copysign(_round_e2m1_values(np.abs(blocks) / scale), blocks) * scale
    # Zero codes carry no sign.
    vals[vals == 0] = 0.0
    return _unblocks(vals, block_axis, x.shape).astype(np.float32)


def identity_quantizer(a, block_axis: BlockAxis = BlockAxis.ALONG_COLS) -> np.ndarray:
    """Stand-in for :func:`fake_quantize` that leaves operands untouched."""
    x = as_matrix(a)
    _check_axis(x.shape, BlockAxis(block_axis))
    return x


Quantizer = Callable[[np.ndarray, BlockAxis], np.ndarray]


def matmul_quantized(a, b, quantizer: Quantizer = fake_quantize) -> np.ndarray:
    """``Q(A) @ Q(B)`` with both operands blocked along the shared dimension."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return matmul_exact(quantizer(a, BlockAxis.ALONG_COLS), quantizer(b, BlockAxis.ALONG_ROWS))


def block_relative_error(a, block_axis: BlockAxis = BlockAxis.ALONG_COLS) -> float:
    """Largest per-block ``max|x - Q(x)| / amax`` over ``a``.

    The error bounds of the outlier-extraction analysis carry an unnamed
    format constant; this is the measured stand-in for it.
    """
    x = as_matrix(a).astype(np.float64)
    block_axis = BlockAxis(block_axis)
    err = np.abs(x - fake_quantize(x, block_axis))
    eb = _blocks(err, block_axis).max(axis=-1)
    amax = np.abs(_blocks(x, block_axis)).max(axis=-1)
    nz = amax > 0
    return float((eb[nz] / amax[nz]).max()) if nz.any() else 0.0
