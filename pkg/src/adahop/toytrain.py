"""Manual-backprop MLP trainer whose linear-layer matmuls run through a
pluggable quantization backend.

Each layer ``l`` holds ``W_l`` (d_out x d_in) and issues three products:

    fwd  Y   = X W^T
    gw   G_W = G_Y^T X
    gx   G_X = G_Y W      (skipped for the first layer)

The task is teacher-student regression: a fixed random teacher network of
the same shape labels Gaussian inputs. Two outlier sources mimic what
transformer training shows: a few input channels have a larger spread
(channel outliers in activations), and a few tokens per batch carry a larger
loss weight (high-impact tokens, giving token outliers in gradients).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .hadamard import HadamardConfig, iht_matmul
from .mxfp4 import BLOCK_SIZE, Quantizer, fake_quantize, matmul_quantized
from .pattern import CalibrationRecord, DetectionConfig, OutlierPattern, detect_pattern, majority_vote
from .strategy import DEFAULT_K, DEFAULT_PROBE, Level, Path, PatternPair, StrategyPlan, execute
from .synth import make_rng
from .tensor_core import InputError, ShapeError, write_matrix

# RNG streams under the config seed.
_TEACHER, _STUDENT, _CHANNELS, _DATA = 10, 11, 12, 13


class Activation(enum.Enum):
    RELU = "relu"
    GELU = "gelu"


class BackendKind(enum.Enum):
    FULL_PRECISION = "FullPrecision"
    NAIVE_MXFP4 = "NaiveMXFP4"
    UNIFORM_IHT = "UniformIHT"
    ADAHOP_LV1 = "AdaHOPLv1"
    ADAHOP_LV2 = "AdaHOPLv2"

    @classmethod
    def parse(cls, text: str) -> "BackendKind":
        key = text.strip().lower().replace("-", "").replace("_", "")
        for b in cls:
            if key == b.value.lower():
                return b
        raise ValueError(f"unknown backend {text!r}; expected one of {[b.value for b in cls]}")


ALL_BACKENDS = tuple(BackendKind)


@dataclass(frozen=True)
class ToyModelConfig:
    layer_dims: tuple[int, ...] = (64, 256, 64)
    activation: Activation = Activation.RELU
    batch: int = 256
    steps_calib: int = 30
    steps_train: int = 300
    lr: float = 0.01
    seed: int = 42
    input_outlier_channels: int = 2
    input_outlier_scale: float = 40.0
    outlier_tokens: int = 4
    outlier_token_weight: float = 50.0
    k_extract: int = DEFAULT_K
    probe: int = DEFAULT_PROBE
    block_size: int = 32
    tau: float = 2.0
    final_window: int = 20

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(dims) < 2:
            raise ValueError("need at least an input and an output width")
        if any(d < 1 or d % BLOCK_SIZE for d in dims):
            raise ShapeError(f"layer widths {dims} must be positive multiples of {BLOCK_SIZE}")
        if self.batch < 1 or self.batch % BLOCK_SIZE:
            raise ShapeError(f"batch {self.batch} must be a positive multiple of {BLOCK_SIZE}")
        if self.steps_calib < 1:
            raise ValueError("steps_calib must be >= 1")
        if self.steps_train < 1:
            raise ValueError("steps_train must be >= 1")
        if not 0 <= self.input_outlier_channels <= dims[0]:
            raise ValueError("input_outlier_channels outside [0, input width]")
        if not 0 <= self.outlier_tokens <= self.batch:
            raise ValueError("outlier_tokens outside [0, batch]")
        if self.outlier_token_weight <= 0:
            raise ValueError("outlier_token_weight must be positive")
        if not 1 <= self.final_window <= self.steps_train:
            raise ValueError("final_window must be in [1, steps_train]")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        d = dict(d)
        if "layer_dims" in d:
            d["layer_dims"] = tuple(d["layer_dims"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        d["activation"] = self.activation.value
        return d


# -- activations -------------------------------------------------------------

_GELU_C = math.sqrt(2 / math.pi)


def _act(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0)
    # tanh approximation of GELU
    return 0.5 * z * (1 + np.tanh(_GELU_C * (z + 0.044715 * z ** 3)))


def _act_grad(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    u = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1 + 3 * 0.044715 * z ** 2)
    return 0.5 * (1 + t) + 0.5 * z * (1 - t * t) * du


# -- matmul backends ---------------------------------------------------------

class Diverged(ArithmeticError):
    """A matmul operand went non-finite."""


class MatmulBackend:
    """Full-precision products; subclasses override ``_quantized``."""

    kind = BackendKind.FULL_PRECISION

    def __init__(self, cfg: ToyModelConfig, quantizer: Quantizer = fake_quantize):
        self.cfg = cfg
        self.quantizer = quantizer
        self.hcfg = HadamardConfig(cfg.block_size)
        self.step = 0

    def begin_step(self, step: int) -> None:
        self.step = step

    def matmul(self, layer: int, path: Path, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"L{layer}.{path.value}: cannot multiply {a.shape} by {b.shape}")
        # float32 is the narrowest format any backend casts to.
        if not (np.all(np.abs(a) < 3e38) and np.all(np.abs(b) < 3e38)):
            raise Diverged(f"L{layer}.{path.value}: non-finite or overflowing operand")
        return self._quantized(layer, path, a, b)

    def _quantized(self, layer: int, path: Path, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a @ b

    def finish(self) -> dict:
        """Backend-specific report fields."""
        return {}


class NaiveMXFP4Backend(MatmulBackend):
    kind = BackendKind.NAIVE_MXFP4

    def _quantized(self, layer, path, a, b):
        return matmul_quantized(a, b, self.quantizer).astype(np.float64)


class UniformIHTBackend(MatmulBackend):
    kind = BackendKind.UNIFORM_IHT

    def _quantized(self, layer, path, a, b):
        return iht_matmul(a, b, self.hcfg, self.quantizer).astype(np.float64)


def tensor_id(layer: int, path: Path, side: str) -> str:
    return f"L{layer}.{path.value}.{side}"


class AdaHOPBackend(MatmulBackend):
    """Full precision while calibrating, then the frozen per-matmul strategy."""

    def __init__(self, cfg: ToyModelConfig, level: Level, quantizer: Quantizer = fake_quantize):
        super().__init__(cfg, quantizer)
        self.level = Level(level)
        self.kind = BackendKind.ADAHOP_LV1 if self.level is Level.LV1 else BackendKind.ADAHOP_LV2
        self.det = DetectionConfig(tau=cfg.tau)
        self.observed: dict[str, list[OutlierPattern]] = {}
        self.plan: Optional[StrategyPlan] = None

    @property
    def calibrating(self) -> bool:
        return self.step < self.cfg.steps_calib

    def _quantized(self, layer, path, a, b):
        if self.calibrating:
            for side, x in (("A", a), ("B", b)):
                self.observed.setdefault(tensor_id(layer, path, side), []).append(detect_pattern(x, self.det))
            return a @ b
        if self.plan is None:
            self._freeze()
        strat = self.plan.strategy(f"L{layer}", path)
        return execute(a, b, strat, self.hcfg, self.cfg.probe, self.quantizer).astype(np.float64)

    def _freeze(self) -> None:
        plan = StrategyPlan(self.level)
        for tid in self.observed:
            layer, path_name, side = tid.split(".")
            if side != "A":
                continue
            path = Path(path_name)
            left = majority_vote(self.observed[tid])
            right = majority_vote(self.observed[f"{layer}.{path_name}.B"])
            plan.assign(layer, path, PatternPair(left, right, path), self.cfg.k_extract)
        self.plan = plan

    def records(self) -> list[CalibrationRecord]:
        return [CalibrationRecord(tid, tuple(p)) for tid, p in self.observed.items()]

    def finish(self) -> dict:
        if self.plan is None and self.observed:
            self._freeze()
        return {
            "calibration": [r.to_dict() for r in self.records()],
            "plan": self.plan.to_dict() if self.plan else None,
        }


def make_backend(kind: Union[BackendKind, str], cfg: ToyModelConfig,
                 quantizer: Quantizer = fake_quantize) -> MatmulBackend:
    kind = BackendKind.parse(kind) if isinstance(kind, str) else BackendKind(kind)
    if kind is BackendKind.FULL_PRECISION:
        return MatmulBackend(cfg, quantizer)
    if kind is BackendKind.NAIVE_MXFP4:
        return NaiveMXFP4Backend(cfg, quantizer)
    if kind is BackendKind.UNIFORM_IHT:
        return UniformIHTBackend(cfg, quantizer)
    return AdaHOPBackend(cfg, Level.LV1 if kind is BackendKind.ADAHOP_LV1 else Level.LV2, quantizer)


# -- model -------------------------------------------------------------------

def _init_weights(cfg: ToyModelConfig, stream: int) -> list[np.ndarray]:
    rng = make_rng(cfg.seed, stream)
    dims = cfg.layer_dims
    return [rng.standard_normal((dims[i + 1], dims[i])) / math.sqrt(dims[i]) for i in range(cfg.n_layers)]


def _channel_scales(cfg: ToyModelConfig) -> np.ndarray:
    scales = np.ones(cfg.layer_dims[0])
    if cfg.input_outlier_channels:
        rng = make_rng(cfg.seed, _CHANNELS)
        idx = rng.choice(cfg.layer_dims[0], size=cfg.input_outlier_channels, replace=False)
        scales[idx] = cfg.input_outlier_scale
    return scales


def batch_data(cfg: ToyModelConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and per-token loss weights for ``step``; identical for every backend."""
    rng = make_rng(cfg.seed, _DATA, step)
    x = rng.standard_normal((cfg.batch, cfg.layer_dims[0])) * _channel_scales(cfg)
    weights = np.ones(cfg.batch)
    if cfg.outlier_tokens:
        weights[rng.choice(cfg.batch, size=cfg.outlier_tokens, replace=False)] = cfg.outlier_token_weight
    return x, weights


def _plain_forward(weights: Sequence[np.ndarray], x: np.ndarray, act: Activation) -> np.ndarray:
    h = x
    for i, w in enumerate(weights):
        h = h @ w.T
        if i < len(weights) - 1:
            h = _act(h, act)
    return h


@dataclass
class StepTrace:
    """Everything one forward/backward pass produced."""

    loss: float
    inputs: list      # X_l fed to each layer
    grads_out: list   # G_Y of each layer
    grads_w: list     # G_W of each layer
    grad_x: Optional[np.ndarray] = None  # G_X of the first layer (diagnostics only)


def weighted_loss(y: np.ndarray, target: np.ndarray, token_weights: np.ndarray) -> float:
    """``sum_i w_i |y_i - t_i|^2 / (tokens * width)``."""
    d = y - target
    return float(np.sum(token_weights[:, None] * d * d) / d.size)


def forward_backward(weights: Sequence[np.ndarray], x: np.ndarray, target: np.ndarray,
                     token_weights: np.ndarray, act: Activation, backend: MatmulBackend,
                     want_input_grad: bool = False) -> StepTrace:
    """Weighted squared-error loss and its weight gradients via the three products."""
    n = len(weights)
    inputs, pre = [], []
    h = x
    for i, w in enumerate(weights):
        inputs.append(h)
        z = backend.matmul(i, Path.FWD, h, w.T)
        pre.append(z)
        h = _act(z, act) if i < n - 1 else z
    diff = h - target
    loss = weighted_loss(h, target, token_weights)
    g = 2.0 * token_weights[:, None] * diff / diff.size
    grads_out: list = [None] * n
    grads_w: list = [None] * n
    grad_x = None
    for i in reversed(range(n)):
        if i < n - 1:
            g = g * _act_grad(pre[i], act)
        grads_out[i] = g
        gt = g.T
        if gt.shape != (weights[i].shape[0], x.shape[0]):
            raise ShapeError(f"L{i}.gw: left operand has shape {gt.shape}")
        grads_w[i] = backend.matmul(i, Path.GW, gt, inputs[i])
        if i > 0:
            g = backend.matmul(i, Path.GX, g, weights[i])
        elif want_input_grad:
            grad_x = g @ weights[0]
    return StepTrace(loss, inputs, grads_out, grads_w, grad_x)


# -- training ----------------------------------------------------------------

@dataclass
class BackendRun:
    backend: BackendKind
    losses: list
    diverged: bool
    final_loss: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"backend": self.backend.value, "losses": self.losses, "diverged": self.diverged,
                "final_loss": self.final_loss, **self.extra}


def run_backend(cfg: ToyModelConfig, backend: Union[BackendKind, str, MatmulBackend],
                quantizer: Quantizer = fake_quantize) -> BackendRun:
    """Train one student from the shared initialization with ``backend``.

    Weight updates are plain SGD on float64 master weights. A non-finite loss
    stops the run and marks it diverged.
    """
    be = backend if isinstance(backend, MatmulBackend) else make_backend(backend, cfg, quantizer)
    teacher = _init_weights(cfg, _TEACHER)
    weights = _init_weights(cfg, _STUDENT)
    losses: list = []
    diverged = False
    for step in range(cfg.steps_train):
        be.begin_step(step)
        x, tw = batch_data(cfg, step)
        t = _plain_forward(teacher, x, cfg.activation)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                trace = forward_backward(weights, x, t, tw, cfg.activation, be)
        except Diverged:
            trace = None
        if trace is None or not math.isfinite(trace.loss) or not all(np.all(np.isfinite(g)) for g in trace.grads_w):
            diverged = True
            losses.append(float("nan"))
            break
        losses.append(trace.loss)
        for w, gw in zip(weights, trace.grads_w):
            w -= cfg.lr * gw
    final = float("nan") if diverged else float(np.mean(losses[-cfg.final_window:]))
    return BackendRun(be.kind, losses, diverged, final, be.finish())


@dataclass
class TrainReport:
    config: ToyModelConfig
    runs: dict  # BackendKind -> BackendRun

    def gap(self, kind: BackendKind) -> float:
        """Final-loss difference against the full-precision run."""
        return self.runs[kind].final_loss - self.runs[BackendKind.FULL_PRECISION].final_loss

    def gaps(self) -> dict:
        return {k.value: self.gap(k) for k in self.runs}

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "gaps": self.gaps(),
            "runs": [self.runs[k].to_dict() for k in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "backend", "loss"])
        for kind, run in self.runs.items():
            for step, loss in enumerate(run.losses):
                w.writerow([step, kind.value, repr(loss)])
        return buf.getvalue()


def train(cfg: ToyModelConfig, backends: Union[BackendKind, str, Sequence] = ALL_BACKENDS,
          quantizer: Quantizer = fake_quantize) -> TrainReport:
    """Train every requested backend; the full-precision reference always runs."""
    if isinstance(backends, (BackendKind, str)):
        backends = [backends]
    kinds = [BackendKind.parse(b) if isinstance(b, str) else BackendKind(b) for b in backends]
    order = [BackendKind.FULL_PRECISION] + [k for k in ALL_BACKENDS if k in kinds and k is not BackendKind.FULL_PRECISION]
    return TrainReport(cfg, {k: run_backend(cfg, k, quantizer) for k in order})


# -- gradient check ----------------------------------------------------------

@dataclass
class GradCheckReport:
    coordinates: int
    max_rel_error: float
    worst: str
    passed: bool
    tol: float


class GradientMismatch(AssertionError):
    pass


def gradient_check(cfg: Optional[ToyModelConfig] = None, samples: int = 120, tol: float = 1e-3,
                   h: float = 1e-5, raise_on_fail: bool = False) -> GradCheckReport:
    """Central finite differences of the loss against the analytic G_W and G_X.

    Runs in float64 on the full-precision backend. Relative error is
    ``|fd - an| / max(|fd|, |an|, 1e-8)``.
    """
    if cfg is None:
        cfg = ToyModelConfig(layer_dims=(32, 32, 32), activation=Activation.GELU, batch=32,
                             steps_train=1, final_window=1)
    be = MatmulBackend(cfg)
    weights = _init_weights(cfg, _STUDENT)
    x, tw = batch_data(cfg, 0)
    t = _plain_forward(_init_weights(cfg, _TEACHER), x, cfg.activation)
    trace = forward_backward(weights, x, t, tw, cfg.activation, be, want_input_grad=True)

    def loss_at(ws, xx):
        return weighted_loss(_plain_forward(ws, xx, cfg.activation), t, tw)

    rng = make_rng(cfg.seed, 99)
    worst, worst_name = 0.0, ""
    # Split samples between weight coordinates and input coordinates.
    n_x = max(1, samples // 4)
    for j in range(samples):
        if j < samples - n_x:
            li = int(rng.integers(len(weights)))
            r, c = (int(rng.integers(s)) for s in weights[li].shape)
            ws_p = [w.copy() for w in weights]
            ws_m = [w.copy() for w in weights]
            ws_p[li][r, c] += h
            ws_m[li][r, c] -= h
            fd = (loss_at(ws_p, x) - loss_at(ws_m, x)) / (2 * h)
            an = float(trace.grads_w[li][r, c])
            name = f"G_W[L{li}][{r},{c}]"
        else:
            r, c = (int(rng.integers(s)) for s in x.shape)
            xp, xm = x.copy(), x.copy()
            xp[r, c] += h
            xm[r, c] -= h
            fd = (loss_at(weights, xp) - loss_at(weights, xm)) / (2 * h)
            an = float(trace.grad_x[r, c])
            name = f"G_X[{r},{c}]"
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        if rel > worst:
            worst, worst_name = rel, name
    report = GradCheckReport(samples, worst, worst_name, worst <= tol, tol)
    if raise_on_fail and not report.passed:
        raise GradientMismatch(f"gradient mismatch at {worst_name}: rel error {worst:.3g} > {tol}")
    return report


# -- stream recording --------------------------------------------------------

def record_streams(cfg: ToyModelConfig, out_dir: str, steps: Optional[int] = None) -> dict:
    """Train in full precision and dump X, W and G_Y of every layer per step.

    Files are named ``L{layer}.{X|W|G_Y}.{step:05d}.aht``. Returns
    ``{tensor_id: [paths in step order]}``.
    """
    steps = cfg.steps_train if steps is None else steps
    if steps < 1:
        raise InputError("need at least one step to record")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise OSError(f"{out_dir}: {e.strerror or e}") from e
    be = MatmulBackend(cfg)
    teacher = _init_weights(cfg, _TEACHER)
    weights = _init_weights(cfg, _STUDENT)
    written: dict = {}
    for step in range(steps):
        x, tw = batch_data(cfg, step)
        t = _plain_forward(teacher, x, cfg.activation)
        trace = forward_backward(weights, x, t, tw, cfg.activation, be)
        for li in range(cfg.n_layers):
            for name, arr in (("X", trace.inputs[li]), ("W", weights[li]), ("G_Y", trace.grads_out[li])):
                tid = f"L{li}.{name}"
                path = os.path.join(out_dir, f"{tid}.{step:05d}.aht")
                write_matrix(path, arr.astype(np.float32))
                written.setdefault(tid, []).append(path)
        for w, gw in zip(weights, trace.grads_w):
            w -= cfg.lr * gw
    return written
