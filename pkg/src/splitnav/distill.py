"""Depth-network training: supervised teacher, then two-stage distillation.

Stage one (head) retrains a student's head-stage blocks so its intermediate
activations match the teacher's, block by block, with everything else
frozen.  Stage two (tail) fine-tunes the remaining blocks against the sum
of a soft loss (match the teacher's depth) and a hard loss (match ground
truth), with the head frozen.  Freezing is enforced by optimising only the
stage's parameter set, so the other stage's weights stay bit-identical.
"""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import TrainingFault
from .nn import restore, snapshot
from .storage import Dataset
from .tensor import Adam, Tensor, TrainControl, TrainSignal

log = logging.getLogger(__name__)


@dataclass
class FitConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    decay_factor: float = 0.5
    decay_every: int = 10
    min_delta: float = 1e-4


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float = 0.0


def _shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _run_epochs(name: str, cfg: FitConfig, rng: np.random.Generator,
                params: dict[str, Tensor], train_step, val_loss) -> list[EpochStats]:
    """Shared epoch loop: batches, validation, lr decay, early stop, best-weights."""
    opt = Adam(params.values(), lr=cfg.lr)
    ctrl = TrainControl(lr=cfg.lr, decay_factor=cfg.decay_factor,
                        decay_every=cfg.decay_every, patience=cfg.patience,
                        min_delta=cfg.min_delta)
    initial = val_loss()
    history = [EpochStats(0, float("nan"), initial, cfg.lr)]
    best = snapshot(params)
    best_val = initial
    log.info("%s: initial val loss %.5f", name, initial)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        total, count = 0.0, 0
        for idx in _shuffled_batches(train_step.n, cfg.batch_size, rng):
            opt.zero_grad()
            loss = train_step(idx)
            if loss.has_nonfinite():
                raise TrainingFault(f"{name}: non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        val = val_loss()
        signal = ctrl.update(val)
        opt.lr = ctrl.lr
        stats = EpochStats(epoch, total / max(count, 1), val, ctrl.lr,
                           time.monotonic() - t0)
        history.append(stats)
        log.info("%s: epoch %d train %.5f val %.5f lr %.2e (%.1fs)",
                 name, epoch, stats.train_loss, val, ctrl.lr, stats.seconds)
        if ctrl.last_improved:
            best = snapshot(params)
            best_val = val
        if signal is TrainSignal.FAULT:
            raise TrainingFault(f"{name}: non-finite validation loss at epoch {epoch}")
        if signal is TrainSignal.STOP:
            log.info("%s: early stop at epoch %d", name, epoch)
            break
    restore(params, best)
    log.info("%s: best val loss %.5f", name, best_val)
    return history


class _Step:
    def __init__(self, n: int, fn):
        self.n = n
        self._fn = fn

    def __call__(self, idx):
        return self._fn(idx)


# ---------------------------------------------------------------------------
# teacher


def _batched_l1(model, ds: Dataset, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        for lo in range(0, len(ds), batch_size):
            hi = min(lo + batch_size, len(ds))
            pred = model.forward(Tensor(ds.images[lo:hi]))
            loss = T.l1_loss(pred, Tensor(ds.depths[lo:hi]))
            total += loss.item() * (hi - lo)
    return total / len(ds)


def train_teacher(teacher, train_ds: Dataset, val_ds: Dataset, cfg: FitConfig,
                  rng: np.random.Generator) -> list[EpochStats]:
    """Supervised L1 regression of normalised depth from RGB."""
    params = dict(teacher.named_parameters())

    def step(idx):
        pred = teacher.forward(Tensor(train_ds.images[idx]))
        return T.l1_loss(pred, Tensor(train_ds.depths[idx]))

    return _run_epochs("teacher", cfg, rng, params,
                       _Step(len(train_ds), step),
                       lambda: _batched_l1(teacher, val_ds, cfg.batch_size))


# ---------------------------------------------------------------------------
# distillation stages


def knowledge_distillation_loss(student, teacher, images: Tensor) -> Tensor:
    """Sum of per-block L2 between student and teacher activations."""
    with T.no_grad():
        teacher_outputs: dict[int, Tensor] = {}
        teacher.forward(images, teacher_outputs)
    student_outputs = student.block_outputs(images)
    total = None
    for i in student.kd_set:
        term = T.l2_loss(student_outputs[i], teacher_outputs[i].detach())
        total = term if total is None else T.add(total, term)
    return total


def _kd_val_loss(student, teacher, ds: Dataset, batch_size: int) -> float:
    total = 0.0
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        with T.no_grad():
            loss = knowledge_distillation_loss(student, teacher, Tensor(ds.images[lo:hi]))
        total += loss.item() * (hi - lo)
    return total / len(ds)


@contextmanager
def _frozen_complement(student, stage_params: dict[str, Tensor]):
    """Disable gradients for everything outside the stage being trained."""
    keep = {id(p) for p in stage_params.values()}
    others = [p for _, p in student.named_parameters() if id(p) not in keep]
    for p in others:
        p.requires_grad = False
        p.grad = None
    try:
        yield
    finally:
        for p in others:
            p.requires_grad = True


def train_head(student, teacher, train_ds: Dataset, val_ds: Dataset, cfg: FitConfig,
               rng: np.random.Generator) -> list[EpochStats]:
    """Stage one: fit head-stage blocks to the teacher's activations.

    Only ``student.stage_parameters("head")`` is optimised; every other
    parameter is left untouched bit for bit.
    """
    head_params = student.stage_parameters("head")

    def step(idx):
        return knowledge_distillation_loss(student, teacher, Tensor(train_ds.images[idx]))

    with _frozen_complement(student, head_params):
        return _run_epochs(f"head[{student.spec.name}]", cfg, rng, head_params,
                           _Step(len(train_ds), step),
                           lambda: _kd_val_loss(student, teacher, val_ds, cfg.batch_size))


def soft_hard_loss(student, teacher, images: Tensor, truth: Tensor) -> Tensor:
    """L2 to the teacher's depth plus L2 to ground truth, unweighted."""
    with T.no_grad():
        teacher_depth = teacher.forward(images)
    student_depth = student.forward(images)
    return T.add(T.l2_loss(student_depth, teacher_depth.detach()),
                 T.l2_loss(student_depth, truth))


def _soft_hard_val_loss(student, teacher, ds: Dataset, batch_size: int) -> float:
    total = 0.0
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        with T.no_grad():
            loss = soft_hard_loss(student, teacher, Tensor(ds.images[lo:hi]),
                                  Tensor(ds.depths[lo:hi]))
        total += loss.item() * (hi - lo)
    return total / len(ds)


def train_tail(student, teacher, train_ds: Dataset, val_ds: Dataset, cfg: FitConfig,
               rng: np.random.Generator) -> list[EpochStats]:
    """Stage two: fine-tune tail-stage blocks; the head stays frozen."""
    tail_params = student.stage_parameters("tail")

    def step(idx):
        return soft_hard_loss(student, teacher, Tensor(train_ds.images[idx]),
                              Tensor(train_ds.depths[idx]))

    with _frozen_complement(student, tail_params):
        return _run_epochs(f"tail[{student.spec.name}]", cfg, rng, tail_params,
                           _Step(len(train_ds), step),
                           lambda: _soft_hard_val_loss(student, teacher, val_ds,
                                                       cfg.batch_size))


# ---------------------------------------------------------------------------
# evaluation metrics


@dataclass
class DepthBin:
    lo_m: float
    hi_m: float
    rmse_m: float
    count: int


@dataclass
class DepthMetrics:
    mape_pct: float
    rmse_m: float
    bins: list[DepthBin] = field(default_factory=list)
    horizon_rmse_m: float = float("nan")
    horizon_count: int = 0


def depth_metrics(pred: np.ndarray, truth: np.ndarray, clip_m: float = 100.0,
                  bin_width_m: float = 10.0) -> DepthMetrics:
    """Error statistics in denormalised metres.

    MAPE uses a 1 m denominator floor.  Per-bin RMSE is computed over
    ``bin_width_m`` ground-truth bins below the horizon; pixels at the clip
    distance (sky) are reported separately.
    """
    pred_m = np.asarray(pred, dtype=np.float64) * clip_m
    truth_m = np.asarray(truth, dtype=np.float64) * clip_m
    err = pred_m - truth_m
    mape = float(np.mean(np.abs(err) / np.maximum(truth_m, 1.0)) * 100.0)
    rmse = float(np.sqrt(np.mean(err ** 2)))

    horizon = truth_m >= clip_m - 1e-6
    hz_err = err[horizon]
    bins: list[DepthBin] = []
    near = truth_m[~horizon]
    near_err = err[~horizon]
    if near.size:
        n_bins = int(np.ceil(near.max() / bin_width_m))
        for b in range(n_bins):
            lo, hi = b * bin_width_m, (b + 1) * bin_width_m
            mask = (near >= lo) & (near < hi)
            if mask.any():
                bins.append(DepthBin(lo, hi, float(np.sqrt(np.mean(near_err[mask] ** 2))),
                                     int(mask.sum())))
    return DepthMetrics(
        mape_pct=mape, rmse_m=rmse, bins=bins,
        horizon_rmse_m=float(np.sqrt(np.mean(hz_err ** 2))) if hz_err.size else float("nan"),
        horizon_count=int(horizon.sum()))


def predict_dataset(model, ds: Dataset, batch_size: int = 16,
                    quantized: bool = False) -> np.ndarray:
    """Model depth for every sample; quantized mode codes each image separately."""
    out = np.empty_like(ds.depths)
    with T.no_grad():
        if quantized:
            for i in range(len(ds)):
                out[i] = model.forward_quantized(Tensor(ds.images[i])).data
        else:
            for lo in range(0, len(ds), batch_size):
                hi = min(lo + batch_size, len(ds))
                out[lo:hi] = model.forward(Tensor(ds.images[lo:hi])).data
    return out
