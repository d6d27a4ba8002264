"""SGD with momentum, the step learning-rate schedule, top-k evaluation and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .data import Dataset, Preproc, make_batches
from .errors import ConfigurationError, ContractError, DegenerateBatchError, DimensionError, NumericalError
from .nn import Module

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,lr,train_loss,val_top1,val_top5"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_epochs: int = 15
    decay: float = 0.1
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    dtype: str = "f32"
    max_steps: Optional[int] = None  # stop after this many optimizer steps

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ConfigurationError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.step_epochs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("step_epochs, epochs and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.dtype not in ("f32", "f64"):
            raise ConfigurationError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass
class Metrics:
    top1: float
    top5: float
    mean_loss: float
    epoch: int = -1


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """``lr0 * decay ** floor(epoch / step_epochs)``, by repeated multiplication so 0.01 -> 0.001 is exact."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    lr = cfg.lr0
    for _ in range(epoch // cfg.step_epochs):
        lr *= cfg.decay
    return lr


def sgd_step(params: Iterable, lr: float, momentum: float, weight_decay: float) -> None:
    """Classic coupled-L2 momentum SGD, in place.

    ``g = grad + weight_decay * w``; ``v = momentum * v + g``; ``w -= lr * v``.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.velocity *= momentum
        p.velocity += g
        p.value -= lr * p.velocity


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean hit per row.  Ties rank the lower class index first."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    true = logits[np.arange(len(labels)), labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (cls < labels[:, None])).sum(axis=1)
    return rank < k


def metrics_from_logits(logits, labels, mean_loss: float = float("nan"), epoch: int = -1,
                        k_list: Sequence[int] = (1, 5)) -> Metrics:
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    k1, k5 = k_list
    return Metrics(float(topk_hits(logits, labels, k1).mean()), float(topk_hits(logits, labels, k5).mean()),
                   mean_loss, epoch)


def evaluate(model: Module, dataset: Dataset, preproc: Optional[Preproc] = None, batch_size: int = 256,
             k_list: Sequence[int] = (1, 5), epoch: int = -1) -> Metrics:
    """Eval-mode forward over ``dataset`` in order; returns top-k accuracies and mean cross-entropy."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    preproc = (preproc or Preproc()).without_augmentation()
    was_training = model.training
    model.eval()
    logits, labels, loss_sum = [], [], 0.0
    try:
        with ag.no_grad():
            for b in make_batches(dataset, batch_size, 0, preproc, train_mode=False, dtype=model.dtype):
                out = model(ag.Node(b.x)).value
                loss_sum += float(ag.cross_entropy(ag.Node(out), b.y).value) * len(b.y)
                logits.append(out)
                labels.append(b.y)
    finally:
        model.train(was_training)
    return metrics_from_logits(np.concatenate(logits), np.concatenate(labels), loss_sum / len(dataset),
                               epoch, k_list)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _state(model: Module):
    for name, p in model.named_parameters():
        yield name, p.value
    yield from model.named_buffers()


def save_checkpoint(model: Module, run_dir, stem: str = "best") -> None:
    """Write ``{stem}.ckpt`` (little-endian float32, concatenated) and ``manifest.csv``.

    The manifest lists ``name,shape,offset`` with ``shape`` as ``AxBxC`` and
    ``offset`` in bytes from the start of the checkpoint file.
    """
    os.makedirs(run_dir, exist_ok=True)
    rows, offset = [], 0
    with open(os.path.join(run_dir, f"{stem}.ckpt"), "wb") as f:
        for name, arr in _state(model):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            f.write(data)
            rows.append((name, "x".join(str(d) for d in arr.shape), offset))
            offset += len(data)
    with open(os.path.join(run_dir, "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name", "shape", "offset"])
        w.writerows(rows)


def load_checkpoint(model: Module, run_dir, stem: str = "best") -> None:
    raw = np.fromfile(os.path.join(run_dir, f"{stem}.ckpt"), dtype="<f4")
    with open(os.path.join(run_dir, "manifest.csv"), newline="") as f:
        entries = {r["name"]: r for r in csv.DictReader(f)}
    for name, arr in _state(model):
        if name not in entries:
            raise DimensionError(f"checkpoint has no entry for {name}")
        e = entries[name]
        shape = tuple(int(d) for d in e["shape"].split("x")) if e["shape"] else ()
        if shape != arr.shape:
            raise DimensionError(f"{name}: checkpoint shape {shape} vs model shape {arr.shape}")
        start = int(e["offset"]) // 4
        arr[...] = raw[start:start + arr.size].reshape(shape)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # one Metrics per epoch, mean_loss = train loss
    lrs: list = field(default_factory=list)
    best_top1: float = -1.0
    steps: int = 0


def _fmt(x: float) -> str:
    return repr(float(x))


def train(model: Module, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig,
          run_dir=None, preproc: Optional[Preproc] = None) -> TrainResult:
    """Run SGD for ``cfg.epochs`` epochs (or ``cfg.max_steps`` steps).

    Each epoch reshuffles with a generator seeded from ``(cfg.seed, epoch)``,
    logs train loss and validation top-1/top-5 to ``run_dir/metrics.csv``
    and checkpoints whenever validation top-1 improves.  Without a
    validation set the training set is evaluated instead.
    """
    preproc = preproc or Preproc()
    model.to(cfg.np_dtype)
    params = model.parameters()
    result = TrainResult()
    metrics_file = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_file = open(os.path.join(run_dir, "metrics.csv"), "w", newline="")
        metrics_file.write(METRICS_HEADER + "\n")
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            model.train()
            loss_sum, seen = 0.0, 0
            epoch_seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])
            for step, b in enumerate(make_batches(train_set, cfg.batch_size, epoch_seed, preproc,
                                                  train_mode=True, dtype=cfg.np_dtype)):
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
                model.zero_grad()
                try:
                    loss = ag.cross_entropy(model(ag.Node(b.x)), b.y)
                except DegenerateBatchError as e:
                    log.warning("epoch %d step %d: skipping batch of %d (%s)", epoch, step, len(b.y), e)
                    continue
                value = float(loss.value)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                ag.backward(loss)
                sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
                result.steps += 1
                loss_sum += value * len(b.y)
                seen += len(b.y)
            train_loss = loss_sum / seen if seen else float("nan")
            m = evaluate(model, val_set if val_set is not None else train_set, preproc, epoch=epoch)
            result.history.append(Metrics(m.top1, m.top5, train_loss, epoch))
            result.lrs.append(lr)
            log.info("epoch %d lr %g train_loss %.4f val_top1 %.4f val_top5 %.4f",
                     epoch, lr, train_loss, m.top1, m.top5)
            if metrics_file is not None:
                metrics_file.write(",".join([str(epoch), _fmt(lr), _fmt(train_loss), _fmt(m.top1), _fmt(m.top5)]) + "\n")
                metrics_file.flush()
            if m.top1 > result.best_top1:
                result.best_top1 = m.top1
                if run_dir is not None:
                    save_checkpoint(model, run_dir)
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return result
