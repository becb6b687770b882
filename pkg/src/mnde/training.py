"""Optimization and evaluation: Huber loss, AdamW, z-scoring, horizon metrics.

Training runs in the normalized domain; predictions are mapped back to
original units before any metric is computed.  The loop is deterministic
for a fixed seed: shuffling draws from a dedicated substream and batch
gradients are summed in window order, so loss curves and checkpoints are
bit-identical across runs.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DataError, NumericsError, ShapeError
from .model import ModelConfig, ModelParams, forward_views
from .rng import substream

DEFAULT_CHECKPOINTS = (23, 47, 95)
# ground-truth flow bins: [0,100), [100,200), ... [500,600), [600, inf)
DEFAULT_BIN_EDGES = (0.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Normalizer:
    """Z-score transform fitted on the training split (population std)."""

    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        arr = np.asarray(values, dtype=np.float64)
        finite = arr[np.isfinite(arr)]  # missing entries do not contribute
        if finite.size == 0:
            raise DataError("cannot fit normalizer: no finite values")
        mean = float(np.mean(finite))
        std = float(np.std(finite))
        if std == 0.0:
            raise DataError("cannot fit normalizer: constant training data")
        return cls(mean, std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# loss


def huber_loss(pred: tc.Tensor, target, delta: float = 1.0) -> tc.Tensor:
    """Mean Huber loss: quadratic inside |e| <= delta, linear outside.

    Built from relu primitives so the backward pass needs no dedicated op:
    with a = |e| and m = min(a, delta), the loss is 0.5*m^2 + delta*(a - m).
    """
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    t = target if isinstance(target, tc.Tensor) else tc.Tensor(np.asarray(target, dtype=np.float64))
    if pred.shape != t.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {t.shape}")
    err = pred - t
    mag = tc.relu(err) + tc.relu(-err)
    clipped = delta - tc.relu(delta - mag)
    return tc.reduce_mean(0.5 * clipped * clipped + delta * (mag - clipped))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """AdamW moment buffers plus hyperparameters (decoupled weight decay)."""

    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: ModelParams, lr: float = 1e-3,
             weight_decay: float = 1e-3) -> "OptimizerState":
        state = cls(lr=lr, weight_decay=weight_decay)
        for p in params:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adamw_step(params: ModelParams, grads: Mapping[str, np.ndarray],
               state: OptimizerState) -> None:
    """One in-place AdamW update; weight decay bypasses the moment buffers.

    All gradients are validated before anything moves, so a rejected step
    leaves parameters and moment buffers untouched.
    """
    checked = {}
    for p in params:
        g = np.asarray(grads[p.name], dtype=np.float64)
        if g.shape != p.value.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.value.shape} in {p.name}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in parameter {p.name}")
        checked[p.name] = g
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        g = checked[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        # Finite but extreme gradients can saturate v (or v / bc2) to inf.  The
        # denominator then dominates and the update collapses to zero for those
        # coordinates, which is exactly the damping we want mid-run, so the
        # overflow is expected rather than an error.
        with np.errstate(over="ignore"):
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.value -= state.lr * update + state.lr * state.weight_decay * p.value


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricRow:
    mae: float
    rmse: float
    mape: float


@dataclass(frozen=True)
class BinStats:
    count: int
    mae: float
    rmse: float
    mape: Optional[float]  # None when the bin holds no nonzero ground truth


@dataclass
class EvalReport:
    """Horizon-checkpoint metrics plus an optional flow-rate-range breakdown."""

    checkpoints: "OrderedDict[int, MetricRow]"
    ranges: Optional["OrderedDict[str, BinStats]"] = None

    def to_jsonable(self) -> dict:
        out: dict = {"checkpoints": {
            str(j): {"mae": row.mae, "rmse": row.rmse, "mape": row.mape}
            for j, row in self.checkpoints.items()}}
        if self.ranges is not None:
            out["ranges"] = {
                label: {"count": b.count, "mae": b.mae, "rmse": b.rmse, "mape": b.mape}
                for label, b in self.ranges.items()}
        return out


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    if p.ndim < 2:
        raise ShapeError(f"expected (..., locations, horizon), got shape {p.shape}")
    return p, y


def _row(err: np.ndarray, truth: np.ndarray) -> MetricRow:
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    nz = truth != 0.0
    if not np.any(nz):
        raise DataError("MAPE undefined: ground truth is all zero")
    mape = float(np.mean(np.abs(err[nz] / truth[nz])) * 100.0)
    return MetricRow(mae, rmse, mape)


def metrics(pred, truth, checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS) -> EvalReport:
    """Per-checkpoint MAE/RMSE/MAPE over all locations (and windows, if batched).

    MAPE skips entries whose ground truth is exactly zero and is reported
    in percent.
    """
    p, y = _check_pair(pred, truth)
    horizon = p.shape[-1]
    rows: "OrderedDict[int, MetricRow]" = OrderedDict()
    for j in checkpoints:
        if not 0 <= j < horizon:
            raise ConfigError(f"checkpoint index {j} outside horizon 0..{horizon - 1}")
        rows[int(j)] = _row(p[..., j] - y[..., j], y[..., j])
    return EvalReport(rows)


def range_breakdown(pred, truth,
                    edges: Sequence[float] = DEFAULT_BIN_EDGES) -> "OrderedDict[str, BinStats]":
    """Metrics grouped by the flow-rate bin of each ground-truth entry.

    The final edge opens an unbounded bin; empty bins are omitted rather
    than reported as zero.
    """
    p, y = _check_pair(pred, truth)
    e = [float(x) for x in edges]
    if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
        raise ConfigError(f"bin edges must be ascending, got {edges}")
    labels = [f"{_fmt_edge(a)}-{_fmt_edge(b)}" for a, b in zip(e, e[1:])] + [f">{_fmt_edge(e[-1])}"]
    flat_p = p.reshape(-1)
    flat_y = y.reshape(-1)
    idx = np.digitize(flat_y, e[1:], right=False) + np.where(flat_y < e[0], -1, 0)
    out: "OrderedDict[str, BinStats]" = OrderedDict()
    for b, label in enumerate(labels):
        mask = idx == b
        count = int(np.sum(mask))
        if count == 0:
            continue
        err = flat_p[mask] - flat_y[mask]
        yb = flat_y[mask]
        nz = yb != 0.0
        mape = float(np.mean(np.abs(err[nz] / yb[nz])) * 100.0) if np.any(nz) else None
        out[label] = BinStats(
            count=count,
            mae=float(np.mean(np.abs(err))),
            rmse=float(np.sqrt(np.mean(err * err))),
            mape=mape,
        )
    return out


def _fmt_edge(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams  # parameters at the best validation loss
    curve: list
    best_epoch: int
    best_val_loss: float


def loss_curve_csv(curve: Sequence[CurvePoint]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    for pt in curve:
        lines.append(f"{pt.epoch},{repr(pt.train_loss)},{repr(pt.val_loss)}")
    return "\n".join(lines) + "\n"


def _check_windows(inputs, targets, cfg: ModelConfig, what: str):
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (cfg.n, cfg.l):
        raise ShapeError(f"{what} inputs must be (N, {cfg.n}, {cfg.l}), got {x.shape}")
    if y.ndim != 3 or y.shape[1:] != (cfg.n, cfg.l_prime):
        raise ShapeError(f"{what} targets must be (N, {cfg.n}, {cfg.l_prime}), got {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{what} has {x.shape[0]} inputs but {y.shape[0]} targets")
    if x.shape[0] == 0:
        raise DataError(f"{what} split holds no windows")
    return x, y


def dataset_loss(params: ModelParams, inputs: np.ndarray, targets: np.ndarray,
                 delta: float = 1.0, batch_size: int = 64) -> float:
    """Mean Huber loss over a window set, computed without recording a tape."""
    x, y = _check_windows(inputs, targets, params.cfg, "evaluation")
    bound = params.constants()
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        pred = forward_views(bound, params.cfg, params.variant, xb)
        total += float(huber_loss(pred, yb, delta).data) * xb.shape[0]
    return total / x.shape[0]


def predict(params: ModelParams, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Forward pass over (N, n, l) windows in batches; returns (N, n, l')."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (params.cfg.n, params.cfg.l):
        raise ShapeError(
            f"inputs must be (N, {params.cfg.n}, {params.cfg.l}), got {x.shape}")
    bound = params.constants()
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        out = forward_views(bound, params.cfg, params.variant, x[start:start + batch_size])
        chunks.append(out.data)
    return np.concatenate(chunks, axis=0)


def train(params: ModelParams,
          train_inputs, train_targets, val_inputs, val_targets,
          epochs: int, batch_size: int = 64, seed: int = 0,
          lr: float = 1e-3, weight_decay: float = 1e-3, delta: float = 1.0,
          patience: int = 20, log=None) -> TrainResult:
    """Shuffled mini-batch AdamW loop with best-validation checkpointing.

    The input params are never mutated; the returned params are the state
    with the lowest validation loss (or the untouched copy when epochs=0).
    Training stops early after `patience` epochs without improvement.

    The spatio-temporal field is quadratic in the state, so individual
    batches can send a trajectory into finite-time blowup while the model
    explores; such batches are reported through `log` and skipped without
    touching parameters or optimizer state. An epoch whose validation pass
    diverges records an infinite validation loss and is never selected as
    best.
    """
    cfg = params.cfg
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    work = params.copy()
    if epochs == 0:
        return TrainResult(params=work, curve=[], best_epoch=0, best_val_loss=float("inf"))

    x, y = _check_windows(train_inputs, train_targets, cfg, "training")
    xv, yv = _check_windows(val_inputs, val_targets, cfg, "validation")
    state = OptimizerState.init(work, lr=lr, weight_decay=weight_decay)
    rng = substream(seed, "shuffle")

    best = work.copy()
    best_val = float("inf")
    best_epoch = 0
    since_improve = 0
    curve: list[CurvePoint] = []

    for epoch in range(1, epochs + 1):
        perm = rng.permutation(x.shape[0])
        epoch_loss = 0.0
        used = 0
        for bi, start in enumerate(range(0, x.shape[0], batch_size)):
            take = perm[start:start + batch_size]
            xb = x[take]
            yb = y[take]
            tape = tc.Tape()
            bound = work.bind(tape)
            try:
                pred = forward_views(bound, cfg, work.variant, xb)
                loss = huber_loss(pred, yb, delta)
                tape.backward(loss)
                grads = {name: tape.grad(t) for name, t in bound.items()}
                adamw_step(work, grads, state)
            except NumericsError as exc:
                if log is not None:
                    log(f"epoch {epoch} batch {bi}: skipped diverged batch ({exc})")
                continue
            epoch_loss += float(loss.data) * xb.shape[0]
            used += xb.shape[0]
        train_loss = epoch_loss / used if used else float("inf")
        try:
            val_loss = dataset_loss(work, xv, yv, delta=delta, batch_size=batch_size)
        except NumericsError:
            val_loss = float("inf")
        curve.append(CurvePoint(epoch, train_loss, val_loss))
        if log is not None:
            log(f"epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = work.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= patience:
                break
    return TrainResult(params=best, curve=curve, best_epoch=best_epoch,
                       best_val_loss=best_val)


def evaluate(params: ModelParams, inputs, targets, normalizer: Normalizer,
             checkpoints: Sequence[int] = DEFAULT_CHECKPOINTS,
             batch_size: int = 64, with_ranges: bool = True) -> EvalReport:
    """Forecast raw-unit windows and score them in original units.

    Inputs are z-scored with the training-split normalizer before the
    forward pass; predictions are inverted back so MAE/RMSE/MAPE and the
    range breakdown read in flow units.
    """
    x, y = _check_windows(inputs, targets, params.cfg, "evaluation")
    pred = normalizer.invert(predict(params, normalizer.apply(x), batch_size))
    report = metrics(pred, y, checkpoints)
    if with_ranges:
        report.ranges = range_breakdown(pred, y)
    return report
