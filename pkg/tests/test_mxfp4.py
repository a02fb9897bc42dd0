import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adahop.mxfp4 import (BLOCK_SIZE, E2M1_VALUES, BlockAxis, block_relative_error,
                          block_scale_exponents, dequantize, fake_quantize, identity_quantizer,
                          matmul_quantized, quantize)
from adahop.tensor_core import InputError, ShapeError, matmul_exact

CODEBOOK = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]


def oracle_scalar(x: float, amax: float) -> float:
    """Exhaustive search over the 15 signed codes; ties go to the even code index."""
    if amax == 0:
        return 0.0
    _, e = math.frexp(amax)  # amax = f * 2**e, f in [0.5, 1)
    exp = min(max(e - 1 - 2, -127), 127)
    scale = 2.0 ** exp
    best, best_d = None, None
    for idx, mag in enumerate(CODEBOOK):
        for sign in (1, -1):
            d = abs(x - sign * mag * scale)
            if best_d is None or d < best_d or (d == best_d and idx % 2 == 0 and best[0] % 2 == 1):
                best, best_d = (idx, sign * mag * scale), d
    return best[1]


def oracle_quantize(x: np.ndarray, axis: BlockAxis) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if axis is BlockAxis.ALONG_ROWS:
        return oracle_quantize(x.T, BlockAxis.ALONG_COLS).T
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j0 in range(0, x.shape[1], BLOCK_SIZE):
            blk = x[i, j0:j0 + BLOCK_SIZE]
            amax = float(np.abs(blk).max())
            out[i, j0:j0 + BLOCK_SIZE] = [oracle_scalar(float(v), amax) for v in blk]
    return out


def test_codebook():
    assert list(E2M1_VALUES) == CODEBOOK


@pytest.mark.parametrize("axis", list(BlockAxis))
def test_matches_exhaustive_oracle(axis):
    rng = np.random.default_rng(7)
    x = (rng.standard_normal((64, 64)) * np.exp2(rng.integers(-8, 8, (64, 64)))).astype(np.float32)
    x[0, :5] = [6.0, 5.0, 0.25, 0.75, 1.75]  # block amax 6 -> exponent 0, exact ties
    x[:, 40] = 0
    ref = oracle_quantize(x, axis)
    np.testing.assert_array_equal(fake_quantize(x, axis), ref.astype(np.float32))
    np.testing.assert_array_equal(dequantize(quantize(x, axis)), ref.astype(np.float32))


def test_rounding_examples():
    row = np.zeros((1, 32), dtype=np.float32)
    row[0, :6] = [6.0, 5.0, 0.25, 0.75, -2.5, 7.0 / 8 * 6]
    q = fake_quantize(row)[0]
    # amax 6 -> scale 1. 5 ties between 4 and 6 -> even code (4); 0.25 -> 0; 0.75 -> 1; -2.5 -> -2
    assert list(q[:5]) == [6.0, 4.0, 0.0, 1.0, -2.0]


def test_saturation_region():
    row = np.zeros((1, 32), dtype=np.float32)
    row[0, 0] = 7.9  # scale 2**0, 7.9 > 6 saturates
    assert fake_quantize(row)[0, 0] == 6.0


def test_scale_exponents():
    assert list(block_scale_exponents(np.array([0.0, 1.0, 6.0, 8.0, 0.75]))) == [0, -2, 0, 1, -3]
    assert block_scale_exponents(np.array([1e-45]))[0] == -127
    assert block_scale_exponents(np.array([3e38]))[0] == 125


def test_packed_layout():
    x = np.zeros((1, 32), dtype=np.float32)
    x[0, :3] = [-6.0, 0.5, -0.0]
    q = quantize(x)
    assert q.codes.dtype == np.uint8 and q.codes.size == 16
    assert q.codes[0] == (0x8 | 7) | (1 << 4)
    assert q.unpacked_codes()[0, 2] == 0  # no negative zero code
    assert q.scales.shape == (1, 1) and q.scales[0, 0] == 0


def test_zero_block():
    q = quantize(np.zeros((2, 64)))
    assert np.all(q.scales == 0)
    assert np.all(dequantize(q) == 0)


def test_errors():
    with pytest.raises(ShapeError):
        quantize(np.ones((2, 33)))
    with pytest.raises(ShapeError):
        quantize(np.ones((33, 2)), BlockAxis.ALONG_ROWS)
    with pytest.raises(InputError):
        quantize(np.full((1, 32), np.nan))
    with pytest.raises(InputError):
        fake_quantize(np.full((1, 32), np.nan))


def test_axis_duality():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((64, 96)).astype(np.float32)
    np.testing.assert_array_equal(fake_quantize(x, BlockAxis.ALONG_ROWS), fake_quantize(x.T).T)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (4, 64), elements=st.floats(-1e6, 1e6, width=32)))
def test_error_bound(x):
    q = fake_quantize(x).astype(np.float64)
    blocks = np.abs(x.astype(np.float64)).reshape(4, 2, 32)
    exps = block_scale_exponents(blocks.max(-1)).astype(np.float64)
    scale = np.exp2(exps)[..., None]
    err = np.abs(x.astype(np.float64) - q).reshape(4, 2, 32)
    # Inside the codebook range the error is at most half the widest gap (2 * scale / 2).
    inside = blocks <= 6 * scale
    assert np.all(err[inside] <= scale.repeat(32, -1)[inside])
    # Saturated entries lie in (6, 8) * scale.
    assert np.all(err <= 2 * scale)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (2, 32), elements=st.floats(-100, 100, width=32)),
       st.integers(-20, 20))
def test_power_of_two_equivariance(x, p):
    np.testing.assert_array_equal(fake_quantize(x * np.float32(2.0 ** p)),
                                  fake_quantize(x) * np.float32(2.0 ** p))


def test_idempotent():
    rng = np.random.default_rng(2)
    q = fake_quantize(rng.standard_normal((8, 64)))
    np.testing.assert_array_equal(fake_quantize(q), q)


def test_matmul_quantized_identity_is_exact():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((8, 64))
    b = rng.standard_normal((64, 5))
    np.testing.assert_array_equal(matmul_quantized(a, b, identity_quantizer), matmul_exact(a, b))


def test_matmul_quantized_blocks_along_shared_dim():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 64)).astype(np.float32)
    b = rng.standard_normal((64, 3)).astype(np.float32)
    want = matmul_exact(fake_quantize(a, BlockAxis.ALONG_COLS), fake_quantize(b, BlockAxis.ALONG_ROWS))
    np.testing.assert_array_equal(matmul_quantized(a, b), want)
    with pytest.raises(ShapeError):
        matmul_quantized(a, b.T)


def test_block_relative_error():
    rng = np.random.default_rng(6)
    r = block_relative_error(rng.standard_normal((16, 64)))
    assert 0 < r <= 1 / 3  # half a code gap over the smallest in-range amax of 4 * scale
    assert block_relative_error(np.zeros((1, 32))) == 0.0
