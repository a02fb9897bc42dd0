import csv
import io

import numpy as np
import pytest

from adahop.analysis import (GAMMA_CLEAN_MAX, improvement, mse, stability_score, stability_to_csv,
                             sweep_pairs, sweep_to_csv, track_stability, verify_gamma_reduction,
                             verify_oe_bound)
from adahop.hadamard import iht_matmul
from adahop.mxfp4 import identity_quantizer, matmul_quantized
from adahop.pattern import OutlierPattern
from adahop.strategy import ALL_PAIRS, Axis, PatternPair, StrategyKind, oe_decompose
from adahop.synth import generate, pair_specs
from adahop.tensor_core import InputError, ShapeError, matmul_exact

R, C, N = OutlierPattern.ROW, OutlierPattern.COLUMN, OutlierPattern.NONE


def test_mse_against_loop():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    want = sum((float(a) - float(b)) ** 2 for a, b in zip(x.ravel(), y.ravel())) / 35
    assert mse(x, y) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ShapeError):
        mse(np.ones((2, 2)), np.ones((2, 3)))


def test_improvement():
    assert improvement(4.0, 1.0) == 75.0
    assert improvement(1.0, 2.0) == -100.0
    assert improvement(0.0, 1.0) == 0.0


def test_improvement_invariant_to_power_of_two_scaling():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    a[:, 3] *= 40
    b = rng.standard_normal((64, 64)).astype(np.float32)

    def imp(s):
        aa, bb = a * s, b * s
        exact = matmul_exact(aa, bb)
        return improvement(mse(matmul_quantized(aa, bb), exact), mse(iht_matmul(aa, bb), exact))

    assert imp(4.0) == pytest.approx(imp(1.0), abs=1e-6)
    assert imp(0.125) == pytest.approx(imp(1.0), abs=1e-6)


def test_sweep_with_identity_quantizer_is_exact():
    res = sweep_pairs((64, 64, 64), seeds=(0, 1, 2), target_kurtosis=None, k_extract=8,
                      quantizer=identity_quantizer, outlier_scale=1.0)
    assert len(res) == 9
    for r in res:
        assert max(r.mse_base, r.mse_iht, r.mse_oht, r.mse_oe) <= 1e-8


def test_sweep_csv_layout():
    res = sweep_pairs((64, 64, 64), seeds=(0, 1, 2), target_kurtosis=None, k_extract=8)
    rows = list(csv.reader(io.StringIO(sweep_to_csv(res))))
    assert rows[0] == ["pair", "strategy", "mse_mean", "mse_std", "improvement_pct"]
    assert len(rows) == 1 + 36
    assert [r[0] for r in rows[1::4]] == [p.code for p in ALL_PAIRS]
    for r in rows[1::4]:
        assert r[1] == "MXFP4" and float(r[4]) == 0.0
    kinds = {r.pair.code: r.adahop_strategy for r in res}
    assert kinds["RC"] is StrategyKind.OE_RIGHT_IHT


def test_sweep_validation():
    with pytest.raises(InputError):
        sweep_pairs((64, 64, 64), seeds=(0, 1))
    with pytest.raises(ShapeError):
        sweep_pairs((64, 48, 64), seeds=(0, 1, 2))


def test_gamma_reduction_cases():
    for pattern in (R, C, N):
        rep = verify_gamma_reduction(128, seed=3, pattern=pattern)
        assert rep.passed, rep
    col = verify_gamma_reduction(128, seed=3, pattern=C)
    assert col.right_ratio <= 4 / 128 and col.left_ratio >= 0.25
    with pytest.raises(ShapeError):
        verify_gamma_reduction(100)


def test_oe_bound_full_extraction_is_exact():
    rep = verify_oe_bound((64, 64, 64), seed=1, target_kurtosis=None, planted=2, k_extract=64)
    assert rep.mse_oe == 0.0 and rep.gamma_residual == 0.0
    assert rep.planted == 2 and rep.planted_extracted


def test_oe_error_is_iht_error_on_kept_rows():
    # A zeroed row contributes nothing to the residual IHT product and the
    # other rows are quantized independently, so OE error = IHT error
    # restricted to the rows that were not extracted.
    dims = (128, 64, 64)
    a_spec, b_spec = pair_specs(PatternPair.parse("NN"), dims, seed=5)
    a, b = generate(a_spec), generate(b_spec)
    exact = matmul_exact(a, b)
    kept = np.setdiff1d(np.arange(128), oe_decompose(a, Axis.ROWS, 16).indices)
    err = (iht_matmul(a, b) - exact).astype(np.float64)
    want = float(np.sum(err[kept] ** 2) / exact.size)
    rep = verify_oe_bound(dims, seed=5, target_kurtosis=None, planted=0, k_extract=16)
    assert rep.planted == 0
    assert rep.mse_oe == pytest.approx(want, rel=1e-6)
    assert rep.mse_oe / rep.mse_iht == pytest.approx(len(kept) / 128, rel=0.15)


def test_gamma_clean_flag():
    rep = verify_oe_bound((64, 64, 64), seed=2, target_kurtosis=None, planted=1, k_extract=4)
    assert rep.gamma_clean == (rep.gamma_residual <= GAMMA_CLEAN_MAX)


def test_stability_score_examples():
    assert stability_score([C] * 30) == (C, 1.0)
    modal, s = stability_score([R] + [C] * 29)
    assert modal is C and s == pytest.approx(29 / 30)
    assert stability_score([R, R, C, C, C], warmup=2) == (C, 1.0)
    with pytest.raises(InputError):
        stability_score([C], warmup=1)


def test_track_stability():
    rng = np.random.default_rng(4)
    stream = []
    for _ in range(6):
        x = rng.standard_normal((64, 64))
        x[:, 1] *= 100
        stream.append(x)
    rows = track_stability({"b": stream, "a": [rng.standard_normal((64, 64))]})
    assert [r.tensor_id for r in rows] == ["a", "b"]
    assert rows[1].modal is C and rows[1].stability == 1.0
    text = stability_to_csv(rows)
    assert text.splitlines()[0] == "tensor,step,pattern"
    assert len(text.splitlines()) == 1 + 7
    with pytest.raises(InputError):
        track_stability({})
    with pytest.raises(InputError):
        track_stability({"x": []})
