"""Outlier-pattern-aware MXFP4 matmul emulation.

Modules, bottom up: ``tensor_core`` (dense matrices, statistics, AHT1 files),
``mxfp4`` (block quantizer), ``hadamard`` (transforms, IHT/OHT products),
``pattern`` (R/C/N detection and calibration), ``synth`` (seeded synthetic
tensors), ``strategy`` (pair table and outlier extraction), ``analysis``
(sweeps and theory checks), ``toytrain`` (toy trainer) and ``cli``.
"""

from .hadamard import HadamardConfig, fwht, fwht_cols, fwht_rows, iht_matmul, oht_matmul
from .mxfp4 import BlockAxis, MxfpTensor, dequantize, fake_quantize, matmul_quantized, quantize
from .pattern import (CalibrationRecord, DetectionConfig, OutlierPattern, calibrate, detect_pattern,
                      majority_vote)
from .strategy import (Level, Path, PatternPair, Strategy, StrategyKind, StrategyPlan, execute,
                       foid_indices, oe_left_matmul, oe_right_matmul, strategy_for_pair)
from .synth import SynthSpec, generate, generate_pair
from .tensor_core import (DegenerateInputError, FormatError, InputError, ShapeError, matmul_exact,
                          outlier_factor, read_matrix, write_matrix)

__version__ = "0.1.0"

__all__ = [
    "HadamardConfig", "fwht", "fwht_cols", "fwht_rows", "iht_matmul", "oht_matmul",
    "BlockAxis", "MxfpTensor", "dequantize", "fake_quantize", "matmul_quantized", "quantize",
    "CalibrationRecord", "DetectionConfig", "OutlierPattern", "calibrate", "detect_pattern",
    "majority_vote",
    "Level", "Path", "PatternPair", "Strategy", "StrategyKind", "StrategyPlan", "execute",
    "foid_indices", "oe_left_matmul", "oe_right_matmul", "strategy_for_pair",
    "SynthSpec", "generate", "generate_pair",
    "DegenerateInputError", "FormatError", "InputError", "ShapeError", "matmul_exact",
    "outlier_factor", "read_matrix", "write_matrix",
]
