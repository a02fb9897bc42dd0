"""Pattern-pair strategy table, outlier extraction (FOID + decomposition) and the
mixed-precision OE products."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hadamard import HadamardConfig, iht_matmul, oht_matmul
from .mxfp4 import BLOCK_SIZE, Quantizer, fake_quantize
from .pattern import OutlierPattern
from .tensor_core import ShapeError, as_matrix, matmul_exact

DEFAULT_K = 64
DEFAULT_PROBE = 64


class Level(enum.Enum):
    LV1 = "Lv1"
    LV2 = "Lv2"

    @classmethod
    def parse(cls, text: str) -> "Level":
        for lv in cls:
            if text.strip().lower() == lv.value.lower():
                return lv
        raise ValueError(f"unknown level {text!r}; expected lv1 or lv2")


class Path(enum.Enum):
    """The three matmuls of a linear layer: Y = X W^T, G_W = G_Y^T X, G_X = G_Y W."""

    FWD = "fwd"
    GW = "gw"
    GX = "gx"


class Axis(enum.Enum):
    ROWS = "rows"
    COLS = "cols"


class StrategyKind(enum.Enum):
    IHT = "IHT"
    OE_LEFT_IHT = "OE_LEFT_IHT"
    OE_RIGHT_IHT = "OE_RIGHT_IHT"
    FULL_PRECISION = "FULL_PRECISION"
    OHT_REFERENCE = "OHT_REFERENCE"


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    k_extract: int = DEFAULT_K

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if self.k_extract < 1:
            raise ValueError(f"k_extract must be >= 1, got {self.k_extract}")


@dataclass(frozen=True)
class PatternPair:
    left: OutlierPattern
    right: OutlierPattern
    path: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "left", OutlierPattern(self.left))
        object.__setattr__(self, "right", OutlierPattern(self.right))
        if self.path is not None:
            object.__setattr__(self, "path", Path(self.path))

    @property
    def code(self) -> str:
        return self.left.value + self.right.value

    @classmethod
    def parse(cls, code: str, path: Optional[Path] = None) -> "PatternPair":
        if len(code) != 2:
            raise ValueError(f"pattern pair code must be two letters, got {code!r}")
        return cls(OutlierPattern.parse(code[0]), OutlierPattern.parse(code[1]), path)

    def __str__(self) -> str:
        return self.code


ALL_PAIRS = tuple(
    PatternPair.parse(c) for c in ("RR", "RN", "RC", "NR", "NN", "NC", "CR", "CN", "CC")
)

_TABLE = {
    "CN": StrategyKind.IHT,
    "NN": StrategyKind.IHT,
    "CR": StrategyKind.IHT,
    "NR": StrategyKind.IHT,
    "RN": StrategyKind.OE_LEFT_IHT,
    "RR": StrategyKind.OE_LEFT_IHT,
    "RC": StrategyKind.OE_RIGHT_IHT,
    "NC": StrategyKind.OE_RIGHT_IHT,
}


def strategy_for_pair(pair: PatternPair, level: Level = Level.LV1, k_extract: int = DEFAULT_K) -> Strategy:
    level = Level(level)
    if pair.code == "CC":
        kind = StrategyKind.OE_RIGHT_IHT if level is Level.LV1 else StrategyKind.FULL_PRECISION
    else:
        kind = _TABLE[pair.code]
    return Strategy(kind, k_extract)


@dataclass
class StrategyPlan:
    level: Level
    assignments: dict = field(default_factory=dict)  # (layer, Path) -> (PatternPair, Strategy)

    def assign(self, layer: str, path: Path, pair: PatternPair, k_extract: int = DEFAULT_K) -> Strategy:
        strat = strategy_for_pair(pair, self.level, k_extract)
        self.assignments[(layer, Path(path))] = (pair, strat)
        return strat

    def strategy(self, layer: str, path: Path) -> Strategy:
        return self.assignments[(layer, Path(path))][1]

    def to_dict(self) -> dict:
        return {
            "level": self.level.value,
            "assignments": [
                {"layer": layer, "path": path.value, "pair": pair.code,
                 "strategy": strat.kind.value, "k": strat.k_extract}
                for (layer, path), (pair, strat) in self.assignments.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyPlan":
        plan = cls(Level(d["level"]))
        for row in d["assignments"]:
            path = Path(row["path"])
            pair = PatternPair.parse(row["pair"], path)
            plan.assignments[(row["layer"], path)] = (pair, Strategy(StrategyKind(row["strategy"]), row["k"]))
        return plan


# -- outlier extraction ------------------------------------------------------

def _slice_variance(x: np.ndarray, axis: Axis, probe: Optional[int]) -> np.ndarray:
    x = x.astype(np.float64)
    if axis is Axis.ROWS:
        return (x if probe is None else x[:, :probe]).var(axis=1)
    return (x if probe is None else x[:probe, :]).var(axis=0)


def foid_indices(a, axis: Axis, k: int = DEFAULT_K, probe: Optional[int] = DEFAULT_PROBE) -> np.ndarray:
    """Top-k rows/cols by variance of their first ``probe`` entries, sorted.

    Ties go to the lower index. ``probe=None`` scores the full slice.
    """
    x = as_matrix(a)
    axis = Axis(axis)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if probe is not None and probe < 1:
        raise ValueError(f"probe must be >= 1, got {probe}")
    var = _slice_variance(x, axis, probe)
    k = min(k, var.size)
    order = np.argsort(-var, kind="stable")
    return np.sort(order[:k])


@dataclass(frozen=True)
class OEDecomposition:
    residual: np.ndarray
    outlier_part: np.ndarray
    indices: np.ndarray
    axis: Axis


def oe_decompose(a, axis: Axis, k: int = DEFAULT_K, probe: Optional[int] = DEFAULT_PROBE) -> OEDecomposition:
    x = as_matrix(a)
    axis = Axis(axis)
    idx = foid_indices(x, axis, k, probe)
    residual = x.copy()
    outlier = np.zeros_like(x)
    if axis is Axis.ROWS:
        outlier[idx, :] = x[idx, :]
        residual[idx, :] = 0
    else:
        outlier[:, idx] = x[:, idx]
        residual[:, idx] = 0
    return OEDecomposition(residual, outlier, idx, axis)


def _check_shared(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] % BLOCK_SIZE:
        raise ShapeError(f"shared dimension {a.shape[1]} not divisible by {BLOCK_SIZE}")


def oe_left_matmul(a, b, cfg: HadamardConfig = HadamardConfig(), k: int = DEFAULT_K,
                   probe: Optional[int] = DEFAULT_PROBE, quantizer: Quantizer = fake_quantize) -> np.ndarray:
    """``Q(A_res H) Q(H^T B) + A_out B`` with the top-k rows of A extracted."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    _check_shared(a, b)
    dec = oe_decompose(a, Axis.ROWS, k, probe)
    out = iht_matmul(dec.residual, b, cfg, quantizer)
    # Compact k x n high-precision product, scattered into the extracted rows.
    out[dec.indices, :] += matmul_exact(a[dec.indices, :], b)
    return out


def oe_right_matmul(a, b, cfg: HadamardConfig = HadamardConfig(), k: int = DEFAULT_K,
                    probe: Optional[int] = DEFAULT_PROBE, quantizer: Quantizer = fake_quantize) -> np.ndarray:
    """``Q(A H) Q(H^T B_res) + A B_out`` with the top-k columns of B extracted."""
    a = as_matrix(a, name="a")
    b = as_matrix(b, name="b")
    _check_shared(a, b)
    dec = oe_decompose(b, Axis.COLS, k, probe)
    out = iht_matmul(a, dec.residual, cfg, quantizer)
    out[:, dec.indices] += matmul_exact(a, b[:, dec.indices])
    return out


def execute(a, b, strategy: Strategy, cfg: HadamardConfig = HadamardConfig(),
            probe: Optional[int] = DEFAULT_PROBE, quantizer: Quantizer = fake_quantize) -> np.ndarray:
    kind = strategy.kind
    if kind is StrategyKind.FULL_PRECISION:
        return matmul_exact(a, b)
    if kind is StrategyKind.IHT:
        return iht_matmul(a, b, cfg, quantizer)
    if kind is StrategyKind.OE_LEFT_IHT:
        return oe_left_matmul(a, b, cfg, strategy.k_extract, probe, quantizer)
    if kind is StrategyKind.OE_RIGHT_IHT:
        return oe_right_matmul(a, b, cfg, strategy.k_extract, probe, quantizer)
    if kind is StrategyKind.OHT_REFERENCE:
        return oht_matmul(a, b, cfg, quantizer)
    raise ValueError(f"unhandled strategy {kind}")
