"""Command-line front end.

Every subcommand writes machine-readable output (CSV, JSON or AHT1) to
``--out`` (atomically) or to stdout. Exit status: 0 success, 1 domain or
file error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import tempfile
from typing import Optional, Sequence

import numpy as np

from . import analysis, toytrain
from .hadamard import HadamardConfig
from .mxfp4 import BlockAxis, fake_quantize
from .pattern import DetectionConfig, Normalization, calibrate, classify, normalized_cvs
from .strategy import ALL_PAIRS, DEFAULT_K, DEFAULT_PROBE, Level
from .synth import SynthSpec, TuningError, generate, planted_indices, resolved_spec
from .tensor_core import (DegenerateInputError, FormatError, InputError, ShapeError, read_matrix,
                          write_atomic, write_matrix)

DOMAIN_ERRORS = (InputError, ShapeError, FormatError, DegenerateInputError, TuningError,
                 ValueError, OSError)

_STEP_FILE = re.compile(r"^(?P<tensor>.+)\.(?P<step>\d+)\.aht$")


# -- argument helpers --------------------------------------------------------

def _dims(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.split(",") if p.strip()]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be integers, got {text!r}") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"dims must be R,K,N or a single size, got {text!r}")
    return tuple(vals)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _seed_count(text: str) -> int:
    v = _positive_int(text)
    if v < 3:
        raise argparse.ArgumentTypeError(f"need at least 3 seeds, got {v}")
    return v


def _level(text: str) -> Level:
    try:
        return Level.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        write_atomic(out, text.encode())
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _seed_list(seed: int, n: int) -> list[int]:
    """``n`` consecutive seeds starting at ``seed``."""
    return [seed + i for i in range(n)]


# -- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    with open(args.spec) as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise InputError(f"{args.spec}: expected a JSON object")
    d.setdefault("seed", args.seed)
    if args.kurtosis is not None:
        d["target_kurtosis"] = args.kurtosis
    spec = SynthSpec.from_dict(d)
    write_matrix(args.out, generate(spec))
    if args.resolved:
        r = resolved_spec(spec)
        info = {"rows": r.rows, "cols": r.cols, "pattern": r.pattern.value,
                "outlier_count": r.outlier_count, "outlier_scale": r.outlier_scale,
                "seed": r.seed, "indices": list(planted_indices(r))}
        write_atomic(args.resolved, _json(info).encode())
    return 0


def _detection(args) -> DetectionConfig:
    return DetectionConfig(tau=args.tau, normalization=Normalization(args.normalization))


def cmd_detect(args) -> int:
    cfg = _detection(args)
    x = read_matrix(args.file)
    cv_row, cv_col = normalized_cvs(x, cfg)
    pattern = classify(cv_row, cv_col, cfg.tau)
    if args.json:
        _emit(_json({"file": args.file, "pattern": pattern.value, "cv_row_hat": cv_row,
                     "cv_col_hat": cv_col, "tau": cfg.tau}), args.out)
    else:
        _emit(f"{pattern.value}\ncv_row_hat {cv_row!r}\ncv_col_hat {cv_col!r}\n", args.out)
    return 0


def _step_files(directory: str) -> dict[str, list[str]]:
    """Group ``<tensor>.<step>.aht`` files by tensor, in step order."""
    groups: dict[str, list[tuple[int, str]]] = {}
    for name in sorted(os.listdir(directory)):
        m = _STEP_FILE.match(name)
        if m:
            groups.setdefault(m["tensor"], []).append((int(m["step"]), os.path.join(directory, name)))
    return {t: [p for _, p in sorted(files)] for t, files in sorted(groups.items())}


def cmd_calibrate(args) -> int:
    cfg = _detection(args)
    groups = _step_files(args.dir)
    if args.tensor:
        groups = {t: v for t, v in groups.items() if t == args.tensor}
    if not groups:
        raise InputError(f"{args.dir}: no <tensor>.<step>.aht files found")
    records = []
    for tid, paths in groups.items():
        stream = [read_matrix(p) for p in paths[: args.steps]]
        records.append(calibrate(stream, cfg, tensor_id=tid).to_dict())
    _emit(_json(records[0] if len(records) == 1 else records), args.out)
    return 0


def cmd_sweep(args) -> int:
    results = analysis.sweep_pairs(
        dims=args.dims, seeds=_seed_list(args.seed, args.seeds), target_kurtosis=args.kurtosis,
        cfg=HadamardConfig(args.block), level=args.level, k_extract=args.k, probe=args.probe,
        pairs=ALL_PAIRS,
    )
    _emit(analysis.sweep_to_csv(results), args.out)
    if args.json:
        write_atomic(args.json, (analysis.sweep_to_json(results) + "\n").encode())
    return 0


def cmd_verify_theory(args) -> int:
    seeds = _seed_list(args.seed, args.seeds)
    gamma = [analysis.verify_gamma_reduction(args.m, s) for s in seeds]
    oe = [analysis.verify_oe_bound(args.dims, s, target_kurtosis=args.kurtosis, k_extract=args.k,
                                   probe=args.probe, cfg=HadamardConfig(args.block)) for s in seeds]
    report = {
        "gamma_reduction": [vars(r) for r in gamma],
        "oe_bound": [dict(vars(r), dims=list(r.dims), passed=r.passed) for r in oe],
        "gamma_reduction_passed": all(r.passed for r in gamma),
        "oe_bound_passed": all(r.passed for r in oe),
    }
    _emit(_json(report), args.out)
    if args.strict and not (report["gamma_reduction_passed"] and report["oe_bound_passed"]):
        return 1
    return 0


def _toy_config(args) -> toytrain.ToyModelConfig:
    return toytrain.ToyModelConfig(
        layer_dims=tuple(args.layers), activation=toytrain.Activation(args.activation),
        batch=args.batch, steps_calib=args.calib_steps, steps_train=args.steps, lr=args.lr,
        seed=args.seed, k_extract=args.k, probe=args.probe, block_size=args.block, tau=args.tau,
        final_window=min(args.final_window, args.steps),
    )


def cmd_train(args) -> int:
    cfg = _toy_config(args)
    backends = [toytrain.BackendKind.parse(b) for b in args.backends.split(",") if b.strip()]
    report = toytrain.train(cfg, backends)
    _emit(report.to_json() + "\n", args.out)
    if args.csv:
        write_atomic(args.csv, report.losses_csv().encode())
    return 0


def cmd_stability(args) -> int:
    cfg = _detection(args)
    if args.dir:
        groups = _step_files(args.dir)
        if not groups:
            raise InputError(f"{args.dir}: no <tensor>.<step>.aht files found")
        streams = {t: [read_matrix(p) for p in ps] for t, ps in groups.items()}
    else:
        with tempfile.TemporaryDirectory() as tmp:
            toytrain.record_streams(_toy_config(args), tmp, steps=args.steps)
            streams = {t: [read_matrix(p) for p in ps] for t, ps in _step_files(tmp).items()}
    rows = analysis.track_stability(streams, cfg, warmup=args.warmup)
    _emit(analysis.stability_to_csv(rows), args.out)
    if args.json:
        summary = [{"tensor": r.tensor_id, "modal": r.modal.value, "stability": r.stability}
                   for r in rows]
        write_atomic(args.json, _json(summary).encode())
    return 0


def cmd_quantize(args) -> int:
    x = read_matrix(args.file)
    axis = BlockAxis(args.axis)
    q = fake_quantize(x, axis)
    write_matrix(args.out, q)
    x64, q64 = x.astype(np.float64), q.astype(np.float64)
    err = x64 - q64
    norm = float(np.linalg.norm(x64))
    stats = {
        "rows": int(x.shape[0]), "cols": int(x.shape[1]), "block_axis": axis.value,
        "mse": float(np.mean(err * err)),
        "max_abs_error": float(np.abs(err).max()),
        "rel_frobenius_error": float(np.linalg.norm(err) / norm) if norm > 0 else 0.0,
    }
    text = _json(stats)
    if args.stats:
        write_atomic(args.stats, text.encode())
    else:
        sys.stdout.write(text)
    return 0


# -- parser ------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # Flags without a default (None / store_true False) say so in their own text.
        if action.default in (None, False):
            return action.help
        return super()._get_help_string(action)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=42, help="base seed; every random draw derives from it")


def _add_detection(p):
    p.add_argument("--tau", type=_positive_float, default=2.0,
                   help="pattern threshold on the normalized coefficient of variation")
    p.add_argument("--normalization", choices=[n.value for n in Normalization],
                   default=Normalization.GAUSSIAN.value,
                   help="CV normalization: 'gaussian' scores an iid Gaussian at ~1; "
                        "'sqrt-dim' divides by sqrt(vector length)")


def _add_strategy(p):
    p.add_argument("--k", type=_positive_int, default=DEFAULT_K,
                   help="rows/columns routed to the high-precision outlier path")
    p.add_argument("--probe", type=_positive_int, default=DEFAULT_PROBE,
                   help="prefix length scored by the outlier-index variance probe")
    p.add_argument("--block", type=_positive_int, default=32,
                   help="Hadamard block size (power of two)")


def _add_toy(p, steps_default: int):
    p.add_argument("--layers", type=lambda s: [int(v) for v in s.split(",")], default="64,256,64",
                   help="comma-separated layer widths, each a multiple of 32")
    p.add_argument("--activation", choices=[a.value for a in toytrain.Activation], default="relu",
                   help="hidden activation")
    p.add_argument("--batch", type=_positive_int, default=256, help="tokens per step")
    p.add_argument("--steps", type=_positive_int, default=steps_default, help="training steps")
    p.add_argument("--calib-steps", type=_positive_int, default=30,
                   help="full-precision calibration steps before the strategy plan freezes")
    p.add_argument("--lr", type=_positive_float, default=toytrain.ToyModelConfig.lr, help="SGD learning rate")
    p.add_argument("--final-window", type=_positive_int, default=20,
                   help="trailing steps averaged into the final loss")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adahop", formatter_class=_Formatter,
        description="Outlier-pattern-aware MXFP4 matmul emulation: synthetic tensors, pattern "
                    "detection, strategy sweeps, theory checks and a toy trainer.",
        epilog="Exit status: 0 success, 1 domain or file error, 2 usage error.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", formatter_class=_Formatter,
                       help="synthetic tensor from a JSON spec -> AHT1 file",
                       description="Generate a seeded synthetic tensor with planted row/column "
                                   "outliers. The JSON object takes rows, cols, pattern (R/C/N), "
                                   "outlier_count, outlier_scale and optionally seed, "
                                   "target_kurtosis and indices.")
    p.add_argument("spec", help="path to the JSON spec")
    p.add_argument("--out", required=True, help="output AHT1 path")
    p.add_argument("--kurtosis", type=float, default=None,
                   help="tune the outlier scale to this excess kurtosis (overrides the spec)")
    p.add_argument("--resolved", default=None, help="also write the spec with the tuned scale as JSON here")
    _add_seed(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("detect", formatter_class=_Formatter,
                       help="AHT1 tensor -> outlier pattern and normalized CVs",
                       description="Classify a tensor as Row-wise (R), Column-wise (C) or None (N) "
                                   "from its dimension-normalized coefficients of variation.")
    p.add_argument("file", help="AHT1 tensor file")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text lines")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    _add_detection(p)
    _add_seed(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", formatter_class=_Formatter,
                       help="directory of per-step AHT1 files -> calibration record JSON",
                       description="Detect the pattern of each step file <tensor>.<step>.aht and "
                                   "freeze one pattern per tensor by majority vote "
                                   "(ties resolve R > C > N).")
    p.add_argument("dir", help="directory holding <tensor>.<step>.aht files")
    p.add_argument("--tensor", default=None, help="only calibrate this tensor id")
    p.add_argument("--steps", type=_positive_int, default=30, help="number of leading steps to use")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    _add_detection(p)
    _add_seed(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sweep", formatter_class=_Formatter,
                       help="nine-pair MSE sweep -> CSV",
                       description="Quantization MSE of plain MXFP4, inner and outer Hadamard "
                                   "transforms and the table strategy for all nine pattern pairs, "
                                   "averaged over seeds --seed .. --seed+N-1.")
    p.add_argument("--dims", type=_dims, default=(256, 256, 256), help="R,K,N or one size for a cube")
    p.add_argument("--seeds", type=_seed_count, default=3, help="number of seeds (at least 3)")
    p.add_argument("--kurtosis", type=float, default=analysis.SWEEP_KURTOSIS,
                   help="target excess kurtosis of the outlier operands")
    p.add_argument("--level", type=_level, default="lv1", help="strategy level: lv1 or lv2")
    p.add_argument("--out", default=None, help="CSV output path (stdout when omitted)")
    p.add_argument("--json", default=None, help="also write per-seed detail as JSON here")
    _add_strategy(p)
    _add_seed(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theory", formatter_class=_Formatter,
                       help="outlier-factor reduction and outlier-extraction bound reports -> JSON",
                       description="Measure how full-size Hadamard mixing changes the outlier "
                                   "factor of a single-row-outlier tensor, and compare outlier "
                                   "extraction + IHT against IHT and plain MXFP4.")
    p.add_argument("--m", type=_positive_int, default=256, help="size of the square gamma-reduction tensor")
    p.add_argument("--dims", type=_dims, default=(256, 256, 256), help="R,K,N for the extraction check")
    p.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds")
    p.add_argument("--kurtosis", type=float, default=analysis.SWEEP_KURTOSIS,
                   help="target excess kurtosis of the extraction operand")
    p.add_argument("--strict", action="store_true", help="exit 1 if any check fails")
    p.add_argument("--out", default=None, help="output path (stdout when omitted)")
    _add_strategy(p)
    _add_seed(p)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("train", formatter_class=_Formatter,
                       help="toy teacher-student training per backend -> report JSON",
                       description="Train the toy MLP with each backend from the same data and "
                                   "initialization and report final-loss gaps against full precision.")
    p.add_argument("--backends", default=",".join(b.value for b in toytrain.ALL_BACKENDS),
                   help="comma-separated backends")
    p.add_argument("--out", default=None, help="report JSON path (stdout when omitted)")
    p.add_argument("--csv", default=None, help="also write per-step losses (step,backend,loss) here")
    _add_toy(p, 300)
    _add_strategy(p)
    p.add_argument("--tau", type=_positive_float, default=2.0, help="pattern threshold used during calibration")
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stability", formatter_class=_Formatter,
                       help="per-step pattern table -> CSV",
                       description="Detect patterns per step for every tensor stream. Streams come "
                                   "from DIR (<tensor>.<step>.aht files) or, without DIR, from a "
                                   "fresh full-precision toy-trainer recording.")
    p.add_argument("dir", nargs="?", default=None, help="directory of recorded step files")
    p.add_argument("--warmup", type=int, default=10, help="leading steps excluded from the stability score")
    p.add_argument("--out", default=None, help="CSV output path (stdout when omitted)")
    p.add_argument("--json", default=None, help="also write per-tensor modal pattern and score here")
    _add_toy(p, 40)
    _add_strategy(p)
    _add_detection(p)
    _add_seed(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("quantize", formatter_class=_Formatter,
                       help="AHT1 tensor -> dequantized AHT1 + error stats JSON",
                       description="Round-trip a tensor through MXFP4 (32-element blocks, shared "
                                   "power-of-two scale, E2M1 elements).")
    p.add_argument("file", help="input AHT1 tensor")
    p.add_argument("--out", required=True, help="output AHT1 path for the dequantized tensor")
    p.add_argument("--axis", choices=[a.value for a in BlockAxis], default=BlockAxis.ALONG_COLS.value,
                   help="'cols': blocks run along each row; 'rows': blocks run down each column")
    p.add_argument("--stats", default=None, help="error stats JSON path (stdout when omitted)")
    _add_seed(p)
    p.set_defaults(func=cmd_quantize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as e:
        where = f"{e.filename}: " if isinstance(e, OSError) and e.filename else ""
        msg = e.strerror if isinstance(e, OSError) and e.strerror else e
        print(f"adahop {args.command}: error: {where}{msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
