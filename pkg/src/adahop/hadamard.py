"""Blockwise normalized Walsh-Hadamard transforms and the IHT / OHT products."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mxfp4 import BLOCK_SIZE, Quantizer, fake_quantize, matmul_quantized
from .tensor_core import ShapeError, as_matrix


@dataclass(frozen=True)
class HadamardConfig:
    block_size: int = 32

    def __post_init__(self):
        b = self.block_size
        if not isinstance(b, (int, np.integer)) or b < 2 or b & (b - 1):
            raise ValueError(f"block_size must be a power of two >= 2, got {b!r}")


def fwht(x: np.ndarray) -> np.ndarray:
    """Normalized fast Walsh-Hadamard transform along the last axis (float64).

    The butterfly order is fixed, so results are bitwise reproducible.
    """
    y = np.array(x, dtype=np.float64, copy=True)
    d = y.shape[-1]
    if d < 1 or d & (d - 1):
        raise ShapeError(f"transform length {d} is not a power of two")
    lead = y.shape[:-1]
    h = 1
    while h < d:
        v = y.reshape(*lead, d // (2 * h), 2, h)
        lo = v[..., 0, :].copy()
        hi = v[..., 1, :]
        v[..., 0, :] += hi
        v[..., 1, :] = lo - hi
        h *= 2
    return y / math.sqrt(d)


def hadamard_matrix(d: int) -> np.ndarray:
    """Dense normalized Sylvester Hadamard matrix (symmetric, orthogonal)."""
    if d < 1 or d & (d - 1):
        raise ShapeError(f"Hadamard size {d} is not a power of two")
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(d)


def fwht_rows(a, cfg: HadamardConfig = HadamardConfig()) -> np.ndarray:
    """``A @ blockdiag(H)``: mixes values within each row, block by block."""
    x = as_matrix(a)
    m, n = x.shape
    bs = cfg.block_size
    if n % bs:
        raise ShapeError(f"cols {n} not divisible by block size {bs}")
    return fwht(x.reshape(m, n // bs, bs)).reshape(m, n).astype(np.float32)


def fwht_cols(a, cfg: HadamardConfig = HadamardConfig()) -> np.ndarray:
    """``blockdiag(H) @ A``: mixes values within each column, block by block."""
    x = as_matrix(a)
    m, n = x.shape
    bs = cfg.block_size
    if m % bs:
        raise ShapeError(f"rows {m} not divisible by block size {bs}")
    blocks = x.reshape(m // bs, bs, n).transpose(0, 2, 1)
    return fwht(blocks).transpose(0, 2, 1).reshape(m, n).astype(np.float32)


def _check_product(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")


def iht_matmul(a, b, cfg: HadamardConfig = HadamardConfig(),
               quantizer: Quantizer = fake_quantize) -> np.ndarray:
    """Inner transform: ``Q(A H) @ Q(H^T B)`` over the shared dimension."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    _check_product(a, b)
    step = math.lcm(BLOCK_SIZE, cfg.block_size)
    if a.shape[1] % step:
        raise ShapeError(f"shared dimension {a.shape[1]} not divisible by {step}")
    return matmul_quantized(fwht_rows(a, cfg), fwht_cols(b, cfg), quantizer)


def oht_matmul(a, b, cfg: HadamardConfig = HadamardConfig(),
               quantizer: Quantizer = fake_quantize) -> np.ndarray:
    """Outer transform: ``H^T (Q(H A) @ Q(B H)) H``; comparison baseline only."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    _check_product(a, b)
    bs = cfg.block_size
    if a.shape[0] % bs or b.shape[1] % bs:
        raise ShapeError(
            f"outer dimensions {a.shape[0]}, {b.shape[1]} not divisible by block size {bs}"
        )
    inner = matmul_quantized(fwht_cols(a, cfg), fwht_rows(b, cfg), quantizer)
    return fwht_rows(fwht_cols(inner, cfg), cfg)
