"""Error-analysis harness: pattern-pair MSE sweeps, outlier-factor experiments
and pattern-stability tracking."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .hadamard import HadamardConfig, fwht_cols, fwht_rows, iht_matmul, oht_matmul
from .mxfp4 import BLOCK_SIZE, Quantizer, fake_quantize, matmul_quantized
from .pattern import DetectionConfig, OutlierPattern, detect_pattern, majority_vote
from .strategy import (ALL_PAIRS, DEFAULT_K, DEFAULT_PROBE, Axis, Level, PatternPair,
                       StrategyKind, execute, oe_decompose, oe_left_matmul, strategy_for_pair)
from .synth import SynthSpec, generate, generate_pair, pair_specs, planted_indices
from .tensor_core import InputError, ShapeError, matmul_exact, outlier_factor

SWEEP_KURTOSIS = 225.95
SWEEP_STRATEGIES = ("MXFP4", "IHT", "OHT", "ADAHOP")


def mse(approx, exact) -> float:
    x = np.asarray(approx, dtype=np.float64)
    y = np.asarray(exact, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    d = x - y
    return float(np.mean(d * d))


def improvement(mse_base: float, mse_new: float) -> float:
    """Percent error reduction relative to ``mse_base``."""
    if mse_base == 0:
        return 0.0
    return (mse_base - mse_new) * 100.0 / mse_base


@dataclass
class PairSweepResult:
    pair: PatternPair
    mse_base: float
    mse_iht: float
    mse_oht: float
    mse_oe: float
    improvement_iht: float
    improvement_best: float
    seeds_used: int
    adahop_strategy: StrategyKind
    per_seed: list = field(default_factory=list)  # dicts: seed, base, iht, oht, oe

    def stds(self) -> dict:
        cols = {"MXFP4": "base", "IHT": "iht", "OHT": "oht", "ADAHOP": "oe"}
        return {name: float(np.std([s[key] for s in self.per_seed])) for name, key in cols.items()}

    def means(self) -> dict:
        return {"MXFP4": self.mse_base, "IHT": self.mse_iht, "OHT": self.mse_oht, "ADAHOP": self.mse_oe}


def sweep_pairs(dims: tuple[int, int, int] = (256, 256, 256), seeds: Sequence[int] = (0, 1, 2),
                target_kurtosis: Optional[float] = SWEEP_KURTOSIS,
                cfg: HadamardConfig = HadamardConfig(), level: Level = Level.LV1,
                k_extract: int = DEFAULT_K, probe: int = DEFAULT_PROBE,
                quantizer: Quantizer = fake_quantize, pairs: Sequence[PatternPair] = ALL_PAIRS,
                outlier_scale: float = 100.0) -> list[PairSweepResult]:
    """MSE of plain MXFP4, IHT, OHT and the table strategy for every pair.

    Errors are averaged over ``seeds`` before improvements are taken.
    """
    m, k, n = dims
    if any(d % BLOCK_SIZE for d in dims):
        raise ShapeError(f"dims {dims} must all be divisible by {BLOCK_SIZE}")
    if len(seeds) < 3:
        raise InputError(f"need at least 3 seeds, got {len(seeds)}")
    results = []
    for pair in pairs:
        strat = strategy_for_pair(pair, level, k_extract)
        rows = []
        for seed in seeds:
            a, b = generate_pair(pair, dims, seed, target_kurtosis, outlier_scale=outlier_scale)
            exact = matmul_exact(a, b)
            rows.append({
                "seed": int(seed),
                "base": mse(matmul_quantized(a, b, quantizer), exact),
                "iht": mse(iht_matmul(a, b, cfg, quantizer), exact),
                "oht": mse(oht_matmul(a, b, cfg, quantizer), exact),
                "oe": mse(execute(a, b, strat, cfg, probe, quantizer), exact),
            })
        mean = {key: float(np.mean([r[key] for r in rows])) for key in ("base", "iht", "oht", "oe")}
        results.append(PairSweepResult(
            pair=pair,
            mse_base=mean["base"],
            mse_iht=mean["iht"],
            mse_oht=mean["oht"],
            mse_oe=mean["oe"],
            improvement_iht=improvement(mean["base"], mean["iht"]),
            improvement_best=max(improvement(mean["base"], mean[key]) for key in ("iht", "oht", "oe")),
            seeds_used=len(rows),
            adahop_strategy=strat.kind,
            per_seed=rows,
        ))
    return results


def sweep_to_csv(results: Sequence[PairSweepResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "strategy", "mse_mean", "mse_std", "improvement_pct"])
    for r in results:
        means, stds = r.means(), r.stds()
        for name in SWEEP_STRATEGIES:
            w.writerow([r.pair.code, name, repr(means[name]), repr(stds[name]),
                        repr(improvement(r.mse_base, means[name]))])
    return buf.getvalue()


def sweep_to_json(results: Sequence[PairSweepResult]) -> str:
    out = []
    for r in results:
        d = asdict(r)
        d["pair"] = r.pair.code
        d["adahop_strategy"] = r.adahop_strategy.value
        out.append(d)
    return json.dumps(out, indent=2)


# -- outlier-factor experiments ----------------------------------------------

@dataclass
class GammaReport:
    m: int
    seed: int
    pattern: str
    gamma: float
    gamma_left: float   # gamma(H A)
    gamma_right: float  # gamma(A H)
    left_ratio: float
    right_ratio: float
    passed: bool


def verify_gamma_reduction(m: int = 256, seed: int = 42, pattern: OutlierPattern = OutlierPattern.ROW,
                           outlier_scale: float = 1000.0) -> GammaReport:
    """Outlier factor of A against H A and A H, with full-size m x m transforms.

    Row outliers must shrink by ~1/m under left mixing and survive right
    mixing (factor-4 slack); Column outliers are the mirror image; an
    outlier-free matrix must stay within a factor of 4 either way.
    """
    if m < 64 or m & (m - 1):
        raise ShapeError(f"m must be a power of two >= 64, got {m}")
    pattern = OutlierPattern(pattern)
    count = 0 if pattern is OutlierPattern.NONE else 1
    a = generate(SynthSpec(m, m, pattern, count, outlier_scale if count else 1.0, seed))
    cfg = HadamardConfig(m)
    g = outlier_factor(a)
    gl = outlier_factor(fwht_cols(a, cfg))
    gr = outlier_factor(fwht_rows(a, cfg))
    lr, rr = gl / g, gr / g
    if pattern is OutlierPattern.ROW:
        ok = lr <= 4 / m and rr >= 0.25
    elif pattern is OutlierPattern.COLUMN:
        ok = rr <= 4 / m and lr >= 0.25
    else:
        ok = 0.25 <= lr <= 4 and 0.25 <= rr <= 4
    return GammaReport(m, seed, pattern.value, g, gl, gr, lr, rr, bool(ok))


@dataclass
class OEBoundReport:
    dims: tuple
    seed: int
    planted: int
    k_extract: int
    gamma_a: float
    gamma_residual: float
    mse_oe: float
    mse_iht: float
    mse_base: float
    gamma_clean: bool     # gamma(residual) <= GAMMA_CLEAN_MAX
    ordering: bool        # mse_oe < mse_iht < mse_base
    planted_extracted: bool

    @property
    def passed(self) -> bool:
        return self.gamma_clean and self.ordering


GAMMA_CLEAN_MAX = 10.0


def verify_oe_bound(dims: tuple[int, int, int] = (256, 256, 256), seed: int = 42,
                    target_kurtosis: Optional[float] = SWEEP_KURTOSIS, planted: Optional[int] = None,
                    outlier_scale: float = 100.0, k_extract: int = DEFAULT_K, probe: int = DEFAULT_PROBE,
                    cfg: HadamardConfig = HadamardConfig(), quantizer: Quantizer = fake_quantize,
                    ) -> OEBoundReport:
    """OE-Left + IHT against plain IHT and plain MXFP4 on an RR operand pair.

    Operands come from the same generator as the pair sweep. ``planted``
    fixes the outlier-row count of both operands (0 gives an outlier-free
    pair); otherwise the count follows the kurtosis target.
    """
    pair = PatternPair.parse("NN" if planted == 0 else "RR")
    count = None if planted in (None, 0) else planted
    a_spec, b_spec = pair_specs(pair, dims, seed, target_kurtosis if planted != 0 else None,
                                outlier_count=count, outlier_scale=outlier_scale)
    a, b = generate(a_spec), generate(b_spec)
    exact = matmul_exact(a, b)
    dec = oe_decompose(a, Axis.ROWS, k_extract, probe)
    gamma_res = outlier_factor(dec.residual) if np.any(dec.residual) else 0.0
    planted_idx = set(planted_indices(a_spec))
    r_oe = mse(oe_left_matmul(a, b, cfg, k_extract, probe, quantizer), exact)
    r_iht = mse(iht_matmul(a, b, cfg, quantizer), exact)
    r_base = mse(matmul_quantized(a, b, quantizer), exact)
    return OEBoundReport(
        dims=tuple(dims), seed=seed, planted=len(planted_idx), k_extract=k_extract,
        gamma_a=outlier_factor(a), gamma_residual=gamma_res,
        mse_oe=r_oe, mse_iht=r_iht, mse_base=r_base,
        gamma_clean=gamma_res <= GAMMA_CLEAN_MAX,
        ordering=r_oe < r_iht < r_base,
        planted_extracted=planted_idx <= set(dec.indices.tolist()),
    )


# -- stability ---------------------------------------------------------------

@dataclass
class StabilityRow:
    tensor_id: str
    patterns: list
    modal: OutlierPattern
    stability: float


def stability_score(patterns: Sequence[OutlierPattern], warmup: int = 0) -> tuple[OutlierPattern, float]:
    tail = list(patterns)[warmup:]
    if not tail:
        raise InputError("no steps left after warmup")
    modal = majority_vote(tail)
    return modal, sum(p is modal for p in tail) / len(tail)


def track_stability(streams: Mapping[str, Sequence], cfg: DetectionConfig = DetectionConfig(),
                    warmup: int = 0) -> list[StabilityRow]:
    """Per-step detected pattern per tensor and the fraction of steps (after
    ``warmup``) that agree with the modal pattern."""
    if not streams:
        raise InputError("no streams given")
    rows = []
    for tid in sorted(streams):
        stream = streams[tid]
        if len(stream) == 0:
            raise InputError(f"stream {tid!r} is empty")
        pats = [detect_pattern(t, cfg) for t in stream]
        modal, score = stability_score(pats, warmup)
        rows.append(StabilityRow(tid, pats, modal, score))
    return rows


def stability_to_csv(rows: Sequence[StabilityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tensor", "step", "pattern"])
    for r in rows:
        for step, p in enumerate(r.patterns):
            w.writerow([r.tensor_id, step, p.value])
    return buf.getvalue()
