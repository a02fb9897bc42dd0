"""Seeded synthetic tensors with planted row/column outliers.

Randomness comes from numpy's Philox4x64-10 counter-based generator keyed by
``SeedSequence(seed, spawn_key=stream)``. Philox is pinned by known-answer
vectors in the test suite; distinct streams give independent draws from one
user-facing seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .pattern import OutlierPattern
from .tensor_core import ShapeError, excess_kurtosis

KURTOSIS_SCALE_RANGE = (1.0, 1e4)
KURTOSIS_TOLERANCE = 0.10
BISECTION_STEPS = 64

# Stream ids under one seed.
_BASE, _PLACEMENT, _LEFT, _RIGHT = 0, 1, 2, 3


class TuningError(RuntimeError):
    """No outlier scale in range reaches the requested kurtosis."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *stream: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SynthSpec:
    rows: int
    cols: int
    pattern: OutlierPattern = OutlierPattern.NONE
    outlier_count: int = 0
    outlier_scale: float = 1.0
    seed: int = 42
    target_kurtosis: Optional[float] = None
    # Explicit planted rows/cols; overrides the seeded placement draw.
    indices: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "pattern", OutlierPattern(self.pattern))
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"bad synthetic shape {self.rows}x{self.cols}")
        if self.pattern is OutlierPattern.NONE:
            if self.outlier_count != 0:
                raise ValueError("pattern None requires outlier_count == 0")
        elif not 1 <= self.outlier_count <= self.axis_length:
            raise ValueError(
                f"outlier_count {self.outlier_count} outside [1, {self.axis_length}]"
            )
        if self.outlier_scale < 1:
            raise ValueError(f"outlier_scale must be >= 1, got {self.outlier_scale}")
        if self.indices is not None:
            idx = tuple(sorted(int(i) for i in self.indices))
            if len(set(idx)) != self.outlier_count or not all(0 <= i < self.axis_length for i in idx):
                raise ValueError(f"indices {self.indices} do not match outlier_count/axis")
            object.__setattr__(self, "indices", idx)

    @property
    def axis_length(self) -> int:
        return self.rows if self.pattern is OutlierPattern.ROW else self.cols

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "pattern" in d:
            d["pattern"] = OutlierPattern.parse(str(d["pattern"]))
        if d.get("indices") is not None:
            d["indices"] = tuple(d["indices"])
        return cls(**d)


def planted_indices(spec: SynthSpec) -> tuple[int, ...]:
    """Sorted planted row (Row pattern) or column (Column pattern) indices."""
    if spec.pattern is OutlierPattern.NONE:
        return ()
    if spec.indices is not None:
        return spec.indices
    rng = make_rng(spec.seed, _PLACEMENT)
    picked = rng.choice(spec.axis_length, size=spec.outlier_count, replace=False)
    return tuple(sorted(int(i) for i in picked))


def _scaled(base: np.ndarray, spec: SynthSpec, idx: tuple[int, ...], scale: float) -> np.ndarray:
    x = base.copy()
    sel = list(idx)
    if spec.pattern is OutlierPattern.ROW:
        x[sel, :] *= scale
    elif spec.pattern is OutlierPattern.COLUMN:
        x[:, sel] *= scale
    return x.astype(np.float32)


def tune_scale(base: np.ndarray, spec: SynthSpec, idx: tuple[int, ...]) -> float:
    """Bisect the outlier scale until the kurtosis matches the target."""
    target = spec.target_kurtosis
    lo, hi = KURTOSIS_SCALE_RANGE

    def kurt(s: float) -> float:
        return excess_kurtosis(_scaled(base, spec, idx, s))

    k_lo, k_hi = kurt(lo), kurt(hi)
    aim = target
    if k_hi < target:
        # Kurtosis saturates at 3L/c - 3 as the scale grows; settle for the
        # smallest scale inside the tolerance band rather than the range end.
        aim = target * (1 - KURTOSIS_TOLERANCE / 2)
    if k_lo <= aim <= k_hi:
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            if kurt(mid) < aim:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-9 * hi:
                break
        s = 0.5 * (lo + hi)
    else:
        s = lo if abs(k_lo - target) < abs(k_hi - target) else hi
    got = kurt(s)
    if abs(got - target) > KURTOSIS_TOLERANCE * abs(target):
        raise TuningError(
            f"kurtosis target {target} unreachable for {spec.pattern.name} with "
            f"{spec.outlier_count} planted of {spec.axis_length} (got {got:.2f} at scale {s:.4g})"
        )
    return s


def generate(spec: SynthSpec) -> np.ndarray:
    base = make_rng(spec.seed, _BASE).standard_normal((spec.rows, spec.cols))
    if spec.pattern is OutlierPattern.NONE:
        return base.astype(np.float32)
    idx = planted_indices(spec)
    scale = spec.outlier_scale
    if spec.target_kurtosis is not None:
        scale = tune_scale(base, spec, idx)
    return _scaled(base, spec, idx, scale)


def resolved_spec(spec: SynthSpec) -> SynthSpec:
    """``spec`` with the kurtosis target replaced by the tuned scale."""
    if spec.target_kurtosis is None or spec.pattern is OutlierPattern.NONE:
        return spec
    base = make_rng(spec.seed, _BASE).standard_normal((spec.rows, spec.cols))
    idx = planted_indices(spec)
    return replace(spec, outlier_scale=tune_scale(base, spec, idx), target_kurtosis=None, indices=idx)


def kurtosis_outlier_count(axis_length: int, target_kurtosis: float, cap: int = 4) -> int:
    """Most planted slices for which ``target_kurtosis`` is still reachable.

    Scaling c of L Gaussian slices by s -> inf drives the excess kurtosis to
    3L/c - 3, so c must stay below 3L / (target + 3).
    """
    c = math.floor(3 * axis_length / (target_kurtosis + 3))
    return max(1, min(cap, c))


def pair_specs(pair, dims: tuple[int, int, int], seed: int = 42,
               target_kurtosis: Optional[float] = None, outlier_count: Optional[int] = None,
               outlier_scale: float = 100.0, align_shared: bool = True
               ) -> tuple[SynthSpec, SynthSpec]:
    """Specs for operands ``A (m x k)`` and ``B (k x n)`` with the patterns of ``pair``.

    B's pattern is read in B's own orientation (Row = outlier rows of B).
    With ``align_shared`` a Column-pattern A and Row-pattern B share their
    planted indices, since both index the same channels of the contraction.
    """
    m, k, n = dims
    left, right = (OutlierPattern(p) for p in (pair.left, pair.right))

    def spec_for(pattern, rows, cols, stream, indices=None):
        if pattern is OutlierPattern.NONE:
            return SynthSpec(rows, cols, pattern, 0, 1.0, derive_seed(seed, stream))
        axis = rows if pattern is OutlierPattern.ROW else cols
        if outlier_count is not None:
            count = outlier_count
        elif target_kurtosis is not None:
            count = kurtosis_outlier_count(axis, target_kurtosis)
        else:
            count = 4
        if indices is not None:
            count = len(indices)
        return SynthSpec(rows, cols, pattern, count, outlier_scale,
                         derive_seed(seed, stream), target_kurtosis, indices)

    a_spec = spec_for(left, m, k, _LEFT)
    shared = None
    if align_shared and left is OutlierPattern.COLUMN and right is OutlierPattern.ROW:
        shared = planted_indices(a_spec)
    return a_spec, spec_for(right, k, n, _RIGHT, shared)


def generate_pair(pair, dims: tuple[int, int, int], seed: int = 42,
                  target_kurtosis: Optional[float] = None, outlier_count: Optional[int] = None,
                  outlier_scale: float = 100.0, align_shared: bool = True
                  ) -> tuple[np.ndarray, np.ndarray]:
    a_spec, b_spec = pair_specs(pair, dims, seed, target_kurtosis, outlier_count,
                                outlier_scale, align_shared)
    return generate(a_spec), generate(b_spec)
