"""SGD training with a warmup-cosine schedule and a non-finite guard.

The guard snapshots the model at the start of every epoch.  A non-finite
loss, gradient or weight rolls the epoch back, scales the learning rate by
``backoff_factor`` for the rest of the run, and retries; too many
consecutive retries of the same epoch abort with :class:`TrainingDiverged`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .data import Dataset
from .network import PLACEMENTS, Model
from .nn import softmax_cross_entropy
from .tensor import backward, build_graph

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc", "backoff_count")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, attempts: int):
        super().__init__(f"training diverged at epoch {epoch} after {attempts} learning-rate backoffs")
        self.epoch = epoch
        self.attempts = attempts


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 0.1
    warmup_epochs: int = 2
    total_epochs: int = 20
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    backoff_factor: float = 0.5
    max_backoffs: int = 3
    clip_activation_placement: Optional[str] = None  # overrides the network's placement when set
    flip: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if not 0 < self.backoff_factor < 1:
            raise ValueError("backoff_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.max_backoffs < 0:
            raise ValueError("batch_size must be positive and max_backoffs non-negative")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be non-negative")
        if self.clip_activation_placement not in (None,) + PLACEMENTS:
            raise ValueError(f"clip_activation_placement must be one of {PLACEMENTS}")


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then half a cosine down to 0."""
    if not 0 <= epoch_fraction <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch_fraction} outside [0, {cfg.total_epochs}]")
    if epoch_fraction < cfg.warmup_epochs:
        return cfg.peak_lr * epoch_fraction / cfg.warmup_epochs
    progress = (epoch_fraction - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Momentum SGD: ``v = mu v + g + wd w``; ``w -= lr v``."""

    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def step(self, lr: float) -> None:
        grads = {}
        for k, p in self.model.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {k}")
            grads[k] = g
        for k, p in self.model.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k] + self.weight_decay * p.data
            p.data -= lr * v

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = {k: v.copy() for k, v in state.items()}


def sgd_step(model: Model, lr: float, cfg: TrainConfig, optimizer: Optional[SGD] = None) -> SGD:
    """One update from the gradients stored on ``model``'s parameters."""
    opt = optimizer or SGD(model, cfg.momentum, cfg.weight_decay)
    opt.step(lr)
    return opt


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy."""
    logits = model.predict_logits(ds.images, batch_size)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-np.mean(logp[np.arange(len(ds)), ds.labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return loss, acc


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)
    backoffs: int = 0

    def metrics_csv(self) -> str:
        return format_metrics(self.metrics)


def format_metrics(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})
    return buf.getvalue()


StepHook = Callable[[Model, int, int], None]


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    step_hook: Optional[StepHook] = None,
    checkpoint_path: Union[str, Path, None] = None,
    metrics_path: Union[str, Path, None] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Train ``model`` in place.

    ``step_hook(model, epoch, step)`` runs after every update; tests use it to
    inject faults.  With ``checkpoint_path`` the model is saved after every
    finite epoch.
    """
    from .checkpoint import save_checkpoint

    if data.images.shape[1] != model.config.in_channels:
        raise ValueError(f"dataset has {data.images.shape[1]} channels, model expects {model.config.in_channels}")
    if data.class_count > model.config.num_classes:
        raise ValueError(f"dataset has {data.class_count} classes, model head has {model.config.num_classes}")
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    result = TrainResult(model)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    lr_scale = 1.0
    epoch = 0
    attempts = 0
    snapshot = (model.copy(), opt.state())
    while epoch < cfg.total_epochs:
        # the shuffle depends only on (seed, epoch) so a retried epoch sees the same batches
        rng = np.random.default_rng([cfg.seed, epoch])
        batches = _epoch_batches(len(data), cfg.batch_size, rng)
        model.train()
        lr = 0.0
        failed = False
        for step, idx in enumerate(batches):
            lr = lr_at(epoch + step / steps_per_epoch, cfg) * lr_scale
            x = data.images[idx]
            if cfg.flip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            model.zero_grad()
            with np.errstate(all="ignore"):
                loss = softmax_cross_entropy(model(x), data.labels[idx])
                if not np.isfinite(loss.data):
                    failed = True
                    break
                backward(build_graph(loss), loss)
            try:
                opt.step(lr)
            except NonFiniteGradient:
                failed = True
                break
            if step_hook is not None:
                step_hook(model, epoch, step)
            if not model.all_finite():
                failed = True
                break
        if failed:
            attempts += 1
            result.backoffs += 1
            if log:
                log(f"epoch {epoch}: non-finite values, restoring and scaling lr by {cfg.backoff_factor}")
            if attempts > cfg.max_backoffs:
                raise TrainingDiverged(epoch, attempts - 1)
            _restore(model, snapshot[0])
            opt.load_state(snapshot[1])
            lr_scale *= cfg.backoff_factor
            continue
        attempts = 0
        with np.errstate(all="ignore"):
            train_loss, train_acc = evaluate(model, data)
            val_loss, val_acc = evaluate(model, val) if val is not None else (None, None)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": train_loss,
            "train_acc": train_acc,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "backoff_count": result.backoffs,
        }
        result.metrics.append(row)
        if log:
            log(f"epoch {epoch + 1}: loss {train_loss:.4f} acc {train_acc:.4f} lr {lr:.4g}")
        if metrics_path is not None:
            Path(metrics_path).write_text(format_metrics(result.metrics))
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        snapshot = (model.copy(), opt.state())
        epoch += 1
    model.eval()
    return result


def _restore(model: Model, saved: Model) -> None:
    for k, p in model.params.items():
        p.data = saved.params[k].data.copy()
        p.grad = None
    for k in model.buffers:
        model.buffers[k][...] = saved.buffers[k]


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
