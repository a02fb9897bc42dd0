import json

import numpy as np
import pytest

from adahop.hadamard import HadamardConfig, iht_matmul, oht_matmul
from adahop.mxfp4 import fake_quantize, identity_quantizer
from adahop.pattern import OutlierPattern
from adahop.strategy import (ALL_PAIRS, Axis, Level, Path, PatternPair, Strategy, StrategyKind,
                             StrategyPlan, execute, foid_indices, oe_decompose, oe_left_matmul,
                             oe_right_matmul, strategy_for_pair)
from adahop.tensor_core import ShapeError, matmul_exact


def test_all_pairs():
    assert [p.code for p in ALL_PAIRS] == ["RR", "RN", "RC", "NR", "NN", "NC", "CR", "CN", "CC"]
    with pytest.raises(ValueError):
        PatternPair.parse("R")


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy(StrategyKind.IHT, 0)
    assert strategy_for_pair(PatternPair.parse("RN"), Level.LV1, 8).k_extract == 8
    assert Level.parse("LV2") is Level.LV2


def test_foid_topk_and_ties():
    x = np.zeros((8, 16), dtype=np.float32)
    x[5] = np.arange(16)
    x[2] = np.arange(16) * 2
    assert list(foid_indices(x, Axis.ROWS, 2, probe=16)) == [2, 5]
    # All-equal variances: lowest indices win.
    assert list(foid_indices(np.ones((6, 4)), Axis.ROWS, 3)) == [0, 1, 2]
    assert list(foid_indices(x.T, Axis.COLS, 1, probe=16)) == [2]
    assert len(foid_indices(x, Axis.ROWS, 100)) == 8


def test_foid_probe_prefix_only():
    x = np.zeros((4, 128), dtype=np.float32)
    x[1, 100:] = 1000  # invisible to a 64-entry probe
    x[3, :64] = np.arange(64)
    assert list(foid_indices(x, Axis.ROWS, 1, probe=64)) == [3]
    assert list(foid_indices(x, Axis.ROWS, 1, probe=None)) == [1]


def test_decomposition_sums_to_input():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((64, 32)).astype(np.float32)
    for axis in Axis:
        dec = oe_decompose(a, axis, 5)
        np.testing.assert_array_equal(dec.residual + dec.outlier_part, a)
        assert np.count_nonzero(dec.outlier_part) == 5 * (32 if axis is Axis.ROWS else 64)


def padded_oe_left(a, b, k, probe, cfg, q):
    dec = oe_decompose(a, Axis.ROWS, k, probe)
    return iht_matmul(dec.residual, b, cfg, q) + matmul_exact(dec.outlier_part, b)


def test_compact_scatter_add_equals_padded_form():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    a[[3, 40]] *= 50
    b = rng.standard_normal((64, 32)).astype(np.float32)
    np.testing.assert_array_equal(oe_left_matmul(a, b, k=8), padded_oe_left(a, b, 8, 64, HadamardConfig(), fake_quantize))
    bt = np.ascontiguousarray(a.T)
    dec = oe_decompose(bt, Axis.COLS, 8)
    want = iht_matmul(b.T, dec.residual) + matmul_exact(b.T, dec.outlier_part)
    np.testing.assert_array_equal(oe_right_matmul(b.T, bt, k=8), want)


def test_full_extraction_is_exact():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 32)).astype(np.float32)
    np.testing.assert_array_equal(oe_left_matmul(a, b, k=64), matmul_exact(a, b))
    np.testing.assert_array_equal(oe_right_matmul(a, b, k=32), matmul_exact(a, b))


def test_oe_with_identity_quantizer_is_exact():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 64)).astype(np.float32)
    exact = matmul_exact(a, b).astype(np.float64)
    for f in (oe_left_matmul, oe_right_matmul):
        out = f(a, b, k=4, quantizer=identity_quantizer)
        assert np.linalg.norm(out - exact) / np.linalg.norm(exact) < 1e-6


def test_oe_left_removes_row_outlier_error():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((128, 64)).astype(np.float32)
    a[[7, 90]] *= 200
    b = rng.standard_normal((64, 64)).astype(np.float32)
    exact = matmul_exact(a, b)
    err_oe = np.mean((oe_left_matmul(a, b, k=8) - exact) ** 2)
    err_iht = np.mean((iht_matmul(a, b) - exact) ** 2)
    assert err_oe < err_iht


def test_execute_dispatch():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 64)).astype(np.float32)
    np.testing.assert_array_equal(execute(a, b, Strategy(StrategyKind.FULL_PRECISION)), matmul_exact(a, b))
    np.testing.assert_array_equal(execute(a, b, Strategy(StrategyKind.IHT)), iht_matmul(a, b))
    np.testing.assert_array_equal(execute(a, b, Strategy(StrategyKind.OHT_REFERENCE)), oht_matmul(a, b))
    np.testing.assert_array_equal(execute(a, b, Strategy(StrategyKind.OE_LEFT_IHT, 4)), oe_left_matmul(a, b, k=4))
    np.testing.assert_array_equal(execute(a, b, Strategy(StrategyKind.OE_RIGHT_IHT, 4)), oe_right_matmul(a, b, k=4))


def test_oe_shape_errors():
    with pytest.raises(ShapeError):
        oe_left_matmul(np.ones((4, 48)), np.ones((48, 4)))
    with pytest.raises(ShapeError):
        oe_right_matmul(np.ones((4, 32)), np.ones((64, 4)))


def test_plan_json_round_trip():
    plan = StrategyPlan(Level.LV2)
    plan.assign("L0", Path.GW, PatternPair(OutlierPattern.COLUMN, OutlierPattern.COLUMN), 16)
    plan.assign("L1", Path.FWD, PatternPair.parse("CN"))
    d = json.loads(plan.to_json())
    assert d["assignments"][0] == {"layer": "L0", "path": "gw", "pair": "CC",
                                   "strategy": "FULL_PRECISION", "k": 16}
    back = StrategyPlan.from_dict(d)
    assert back.strategy("L0", Path.GW) == Strategy(StrategyKind.FULL_PRECISION, 16)
    assert back.to_dict() == plan.to_dict()
