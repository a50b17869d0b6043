"""Shared training machinery: schedules, SGD with momentum, batch iteration,
metrics CSV emission, and plain cross-entropy training for base networks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, NonFiniteLossError
from .losses import cross_entropy, cross_entropy_grad
from .models import PlainModel
from .nn import Parameter

OPTIMIZERS = ("sgd",)


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer settings plus an epoch/milestone learning-rate plan.

    The learning rate starts at ``initial_lr`` and is multiplied by
    ``lr_decay_factor`` at each milestone epoch (0-based).
    """

    epochs: int
    initial_lr: float
    batch_size: int = 64
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    milestones: tuple[int, ...] = ()
    optimizer: str = "sgd"

    def __post_init__(self):
        problems = []
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if not (self.initial_lr > 0):
            problems.append(f"initial_lr must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.momentum < 1.0):
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0.0 < self.lr_decay_factor < 1.0):
            problems.append(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            problems.append(f"milestones must be strictly increasing, got {ms}")
        if any(m < 1 or m >= self.epochs for m in ms):
            problems.append(f"milestones must lie in [1, epochs), got {ms} for {self.epochs} epochs")
        if problems:
            raise InvalidArgumentError("; ".join(problems))
        object.__setattr__(self, "milestones", ms)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.initial_lr * self.lr_decay_factor**drops

    def scaled(self, factor: float) -> "TrainSchedule":
        """Proportionally shorter (or longer) schedule for desk-scale runs."""
        if not (factor > 0):
            raise InvalidArgumentError(f"scale factor must be positive, got {factor}")
        if factor == 1.0:
            return self
        epochs = max(1, round(self.epochs * factor))
        milestones = []
        for m in self.milestones:
            scaled = min(max(1, round(m * factor)), epochs - 1)
            if epochs > 1 and (not milestones or scaled > milestones[-1]):
                milestones.append(scaled)
        return replace(self, epochs=epochs, milestones=tuple(milestones))


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params: Mapping[str, Parameter], momentum: float = 0.9):
        self._params = dict(params)
        self._momentum = momentum
        self._velocity = {name: np.zeros(p.value.shape) for name, p in self._params.items()}

    def step(self, lr: float) -> None:
        for name, p in self._params.items():
            if p.grad is None:
                continue
            v = self._velocity[name]
            v *= self._momentum
            v += p.grad
            p.value -= (lr * v).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None


def collect_params(parts: Mapping[str, object]) -> dict[str, Parameter]:
    """Flatten ``{part: layer}`` into ``{part.param: Parameter}``."""
    named = {}
    for part_name, part in parts.items():
        for name, p in part.params().items():
            named[f"{part_name}.{name}"] = p
    return named


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering [0, n); shuffled when an rng is given."""
    order = np.arange(n)
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def check_finite(value: float, context: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss ({value}) during {context}")
    return value


def to_model_grad(grad: np.ndarray) -> np.ndarray:
    """Cast a (float64) loss gradient to float32 at the model boundary, so
    backward matmuls run at parameter precision."""
    return np.asarray(grad, dtype=np.float32)


def write_metrics_csv(path, rows: Sequence[Mapping[str, object]]) -> Path:
    """Write per-epoch metric rows as CSV, one column per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise InvalidArgumentError("no metric rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return path


def train_classifier(
    model: PlainModel, data, schedule: TrainSchedule, seed: int, val_data=None, augment_fn=None
):
    """Plain cross-entropy training of a backbone + classifier.

    Used to produce base teacher networks and as the from-scratch student
    baseline. Returns per-epoch metric rows; the model is updated in place.
    ``augment_fn(images, rng)`` is applied per batch when given.
    """
    if len(data) == 0:
        raise InvalidArgumentError("training split is empty")
    optimizer = SGD(collect_params(model.parts()), schedule.momentum)
    shuffle_rng = np.random.default_rng([int(seed), 10])
    augment_rng = np.random.default_rng([int(seed), 11])
    records = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        loss_sum = 0.0
        hits = 0
        for idx in iterate_batches(len(data), schedule.batch_size, shuffle_rng):
            x, y = data.images[idx], data.labels[idx]
            if augment_fn is not None:
                x = augment_fn(x, augment_rng)
            feats = model.backbone.forward(x, need_grad=True)
            logits = model.classifier.forward(feats, need_grad=True)
            if not np.isfinite(logits).all():
                raise NonFiniteLossError(f"logits became non-finite during epoch {epoch}")
            loss = check_finite(cross_entropy(logits, y), f"epoch {epoch}")
            optimizer.zero_grad()
            dfeats = model.classifier.backward(to_model_grad(cross_entropy_grad(logits, y)))
            model.backbone.backward(dfeats)
            optimizer.step(lr)
            loss_sum += loss * len(idx)
            hits += int((logits.argmax(axis=1) == y).sum())
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / len(data),
            "train_acc": hits / len(data),
        }
        if val_data is not None and len(val_data) > 0:
            logits = model.native_logits(val_data.images)
            row["val_acc"] = float((logits.argmax(axis=1) == val_data.labels).mean())
        records.append(row)
    return records
