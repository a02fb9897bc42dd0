"""Outlier-pattern detection from dimension-normalized coefficients of variation,
and calibration by majority vote over a stream of per-step tensors."""

from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor_core import InputError, ShapeError, as_matrix

# Population CV of an iid zero-mean Gaussian: std / E|x| = sqrt(pi / 2).
GAUSSIAN_CV = math.sqrt(math.pi / 2)


class OutlierPattern(enum.Enum):
    ROW = "R"
    COLUMN = "C"
    NONE = "N"

    def __str__(self) -> str:
        return self.value

    def transposed(self) -> "OutlierPattern":
        return _TRANSPOSED[self]

    @classmethod
    def parse(cls, text: str) -> "OutlierPattern":
        key = text.strip().upper()
        for p in cls:
            if key in (p.value, p.name, p.name[:3]):
                return p
        raise ValueError(f"unknown outlier pattern {text!r}")


_TRANSPOSED = {
    OutlierPattern.ROW: OutlierPattern.COLUMN,
    OutlierPattern.COLUMN: OutlierPattern.ROW,
    OutlierPattern.NONE: OutlierPattern.NONE,
}

# Majority-vote tie priority.
VOTE_PRIORITY = (OutlierPattern.ROW, OutlierPattern.COLUMN, OutlierPattern.NONE)


class Normalization(enum.Enum):
    """How the raw mean CV is made size independent.

    ``GAUSSIAN``: divide by the CV of an iid Gaussian, so an unstructured
    tensor scores about 1 at any size and ``tau`` reads as "tau times more
    dispersed than Gaussian".
    ``SQRT_DIM``: divide by the square root of the vector length. A
    population CV never exceeds sqrt(length), so this score stays below 1
    and only makes sense with a threshold well under 1.
    """

    GAUSSIAN = "gaussian"
    SQRT_DIM = "sqrt-dim"


@dataclass(frozen=True)
class DetectionConfig:
    tau: float = 2.0
    epsilon: float = 1e-8
    normalization: Normalization = Normalization.GAUSSIAN

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "normalization", Normalization(self.normalization))


def _mean_cv(x: np.ndarray, axis: int, eps: float) -> float:
    std = x.std(axis=axis)
    mean_abs = np.abs(x).mean(axis=axis)
    return float(np.mean(std / (mean_abs + eps)))


def normalized_cvs(a, cfg: DetectionConfig = DetectionConfig()) -> tuple[float, float]:
    """Return ``(cv_row_hat, cv_col_hat)``.

    ``cv_row`` averages the CV of every row (high when a few *columns* are
    large); ``cv_col`` averages the CV of every column (high when a few
    *rows* are large). Standard deviations are population ones.
    """
    x = as_matrix(a).astype(np.float64)
    m, n = x.shape
    if m < 2 or n < 2:
        raise ShapeError(f"pattern detection needs at least 2x2, got {x.shape}")
    cv_row = _mean_cv(x, 1, cfg.epsilon)
    cv_col = _mean_cv(x, 0, cfg.epsilon)
    if cfg.normalization is Normalization.SQRT_DIM:
        return cv_row / math.sqrt(n), cv_col / math.sqrt(m)
    return cv_row / GAUSSIAN_CV, cv_col / GAUSSIAN_CV


def classify(cv_row_hat: float, cv_col_hat: float, tau: float) -> OutlierPattern:
    if cv_col_hat > tau and cv_col_hat >= cv_row_hat:
        return OutlierPattern.ROW
    if cv_row_hat > tau:
        return OutlierPattern.COLUMN
    return OutlierPattern.NONE


def detect_pattern(a, cfg: DetectionConfig = DetectionConfig()) -> OutlierPattern:
    return classify(*normalized_cvs(a, cfg), cfg.tau)


def majority_vote(patterns: Iterable[OutlierPattern]) -> OutlierPattern:
    counts = Counter(patterns)
    if not counts:
        raise InputError("cannot vote over an empty pattern sequence")
    best = max(counts.values())
    return next(p for p in VOTE_PRIORITY if counts[p] == best)


@dataclass(frozen=True)
class CalibrationRecord:
    tensor_id: str
    per_step_patterns: tuple[OutlierPattern, ...]
    final_pattern: OutlierPattern = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        steps = tuple(self.per_step_patterns)
        object.__setattr__(self, "per_step_patterns", steps)
        voted = majority_vote(steps)
        if self.final_pattern is None:
            object.__setattr__(self, "final_pattern", voted)
        elif self.final_pattern is not voted:
            raise ValueError(
                f"final pattern {self.final_pattern} disagrees with the vote result {voted}"
            )

    def to_dict(self) -> dict:
        return {
            "tensor_id": self.tensor_id,
            "per_step": [p.value for p in self.per_step_patterns],
            "final": self.final_pattern.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationRecord":
        return cls(
            tensor_id=d["tensor_id"],
            per_step_patterns=tuple(OutlierPattern(p) for p in d["per_step"]),
            final_pattern=OutlierPattern(d["final"]),
        )


def calibrate(stream: Sequence, cfg: DetectionConfig = DetectionConfig(),
              tensor_id: str = "tensor") -> CalibrationRecord:
    """Detect the pattern of every step in ``stream`` and freeze the vote."""
    if len(stream) == 0:
        raise InputError(f"calibration stream for {tensor_id!r} is empty")
    return CalibrationRecord(tensor_id, tuple(detect_pattern(t, cfg) for t in stream))
