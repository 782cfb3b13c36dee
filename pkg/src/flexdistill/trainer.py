"""Joint SGD training of all sub-models of a flexible network."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batches
from .errors import ConfigError, NumericError, ValidationError
from .losses import DistillConfig, flexible_loss, one_hot, teacher_weights
from .params import ParamStore

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: list | None = None  # None -> 50% and 75% of epochs
    lr_factor: float = 0.1
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2 (batch norm), got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")
        if self.milestones is None:
            self.milestones = sorted({m for m in (self.epochs // 2, (3 * self.epochs) // 4) if m >= 1})
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 1 <= m <= self.epochs for m in ms):
            raise ConfigError(f"train.milestones must be strictly ascending within [1, epochs], got {ms}")
        self.milestones = ms

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed once per milestone already passed."""
        passed = sum(1 for m in self.milestones if epoch > m)
        return self.lr * self.lr_factor ** passed


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g (+ wd*theta); theta -= lr*v``."""

    def __init__(self, store: ParamStore, momentum=0.9, weight_decay=0.0):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in store.trainable()}

    def step(self, lr: float):
        params = self.store.trainable()
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        for p in params:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.value -= lr * v
        self.store.zero_grad()


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest class."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model, dataset: Dataset, which="all", batch_size=1024) -> list[float]:
    """Per-sub-model accuracy in eval mode. ``which`` is ``"all"`` or an index."""
    idx = list(range(1, model.num_submodels + 1)) if which == "all" else [int(which)]
    correct = np.zeros(len(idx))
    for s in range(0, len(dataset), batch_size):
        x = dataset.inputs[s:s + batch_size]
        y = dataset.labels[s:s + batch_size]
        if which == "all":
            outs = model.forward_all(x, train=False)
        else:
            outs = [model.forward_one(x, idx[0], train=False)]
        model._pending = None
        for k, a in enumerate(outs):
            correct[k] += np.sum(np.argmax(a, axis=1) == y)
    return (correct / len(dataset)).tolist()


@dataclass
class Snapshot:
    epoch: int
    avg_accuracy: float
    accuracies: list
    state: dict = field(repr=False)


@dataclass
class TrainResult:
    history: list  # one dict per evaluated epoch
    best: Snapshot
    step_losses: list
    store: ParamStore


def loss_term_names(n: int, strategy) -> list[str]:
    names = [f"ce_exit{i}" for i in range(1, n + 1)]
    for i, plan in teacher_weights(n, strategy).items():
        names += [f"kd_{i}from{j}" for j, _ in plan]
    return names


def train(model, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          distill: DistillConfig, on_epoch=None) -> TrainResult:
    """Train every sub-model jointly with one optimizer on the summed loss.

    Each epoch shuffles with ``(cfg.seed, epoch)``, runs
    forward_all -> flexible_loss -> backward -> SGD step per mini-batch, and on
    evaluation epochs records per-sub-model validation accuracy. The returned
    ``best`` snapshot is the evaluated epoch with the highest mean accuracy
    over sub-models (first one on ties).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("train and validation sets must be nonempty")
    if train_set.num_classes != model.num_classes or val_set.num_classes != model.num_classes:
        raise ValidationError(
            f"dataset has {train_set.num_classes} classes, model head has {model.num_classes}")
    if len(train_set) < 2:
        raise ValidationError("batch norm training needs at least 2 training samples")

    n = model.num_submodels
    names = model.sub_model_names
    term_names = loss_term_names(n, distill.strategy)
    opt = SGD(model.store, cfg.momentum, cfg.weight_decay)
    model.store.zero_grad()
    history, step_losses = [], []
    best = None
    y_all = one_hot(train_set.labels, model.num_classes)

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums = dict.fromkeys(term_names, 0.0)
        loss_sum, count = 0.0, 0
        for b, idx in enumerate(batches(len(train_set), cfg.batch_size, cfg.seed, epoch, min_batch=2), start=1):
            x = train_set.inputs[idx]
            logits = model.forward_all(x, train=True)
            res = flexible_loss(logits, y_all[idx], distill)
            if not math.isfinite(res.total):
                raise NumericError(f"loss is {res.total} at epoch {epoch}, batch {b}")
            model.backward(res.grads)
            opt.step(lr)
            step_losses.append(res.total)
            loss_sum += res.total
            count += 1
            for k, v in res.terms.items():
                sums[k] += v

        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        accs = evaluate(model, val_set)
        avg = float(np.mean(accs))
        row = {"epoch": epoch, "lr": lr}
        row.update(zip(names, accs))
        row["avg"] = avg
        row["loss"] = loss_sum / count
        row.update({k: sums[k] / count for k in term_names})
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f avg acc %.4f", epoch, lr, row["loss"], avg)
        if best is None or avg > best.avg_accuracy:
            best = Snapshot(epoch, avg, accs, model.store.state())
        if on_epoch is not None:
            on_epoch(row)

    return TrainResult(history, best, step_losses, model.store)
