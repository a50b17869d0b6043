"""Student distillation under a self-analyzed teacher.

Two schemes are provided: granularity-wise distillation (``gwd``), which
matches every student head to its teacher counterpart, and stable
excitation (``se``), which supervises the student's native head with the
ensemble of the teacher's native logits and branch outputs. Both accept a
pluggable base-distillation hook whose value and student-head gradients
are simply added to the scheme objective.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import DatasetSplit
from .errors import InvalidArgumentError, NonFiniteLossError
from .losses import (
    cross_entropy,
    cross_entropy_grad,
    ensemble_loss_grad,
    gwd_terms,
    gwd_loss_grad,
    hkd_loss,
    hkd_loss_grad,
    se_terms,
)
from .models import (
    GranularityOutputs,
    PlainModel,
    StudentBundle,
    TeacherBundle,
    forward_student,
    forward_teacher,
)
from .self_analyze import DEFAULT_TAU_AKB, DEFAULT_TAU_DKB
from .train import SGD, TrainSchedule, collect_params, iterate_batches, to_model_grad

DEFAULT_TAU_NK = 4.0


class DistillScheme(str, enum.Enum):
    GWD = "gwd"
    SE = "se"

    @classmethod
    def parse(cls, value) -> "DistillScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(
                f"unknown scheme {value!r}; valid schemes: {[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class DistillTemperatures:
    """Per-head distillation temperatures. The encoder heads default to the
    self-analysis temperatures; the native head defaults to 4.0."""

    tau_ak: float = DEFAULT_TAU_AKB
    tau_nk: float = DEFAULT_TAU_NK
    tau_dk: float = DEFAULT_TAU_DKB

    def __post_init__(self):
        for name in ("tau_ak", "tau_nk", "tau_dk"):
            if not (getattr(self, name) > 0):
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")

    def head_map(self) -> dict[str, float]:
        return {"ak": self.tau_ak, "nk": self.tau_nk, "dk": self.tau_dk}


@dataclass(frozen=True)
class BaseKDHook:
    """A pluggable base distillation loss.

    ``fn(teacher_outs, student_outs, labels)`` returns ``(value, grads)``
    where ``value`` is a finite nonnegative scalar and ``grads`` maps
    student head keys (``"ak"``/``"nk"``/``"dk"``) to gradient arrays;
    heads missing from the map receive no gradient.
    """

    name: str
    fn: Callable[[GranularityOutputs, GranularityOutputs, np.ndarray], tuple[float, dict]]

    def __call__(self, teacher_outs, student_outs, labels):
        value, grads = self.fn(teacher_outs, student_outs, labels)
        value = float(value)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"hook {self.name!r} returned non-finite loss {value}")
        if value < 0:
            raise InvalidArgumentError(f"hook {self.name!r} returned negative loss {value}")
        return value, grads


def null_hook() -> BaseKDHook:
    """A hook contributing nothing; the scheme loss runs alone."""
    return BaseKDHook(name="null", fn=lambda t, s, y: (0.0, {}))


def hkd_reference_hook(tau_nk: float = DEFAULT_TAU_NK, include_ce: bool = True) -> BaseKDHook:
    """Classic temperature-scaled distillation on the native head.

    Value is the tempered KL of the student's native logits against the
    teacher's, plus (by default) ground-truth cross entropy so the student
    also learns the true labels.
    """

    def fn(teacher_outs, student_outs, labels):
        value = hkd_loss(teacher_outs.f_nk, student_outs.f_nk, tau_nk)
        grad = hkd_loss_grad(teacher_outs.f_nk, student_outs.f_nk, tau_nk)
        if include_ce:
            value += cross_entropy(student_outs.f_nk, labels)
            grad = grad + cross_entropy_grad(student_outs.f_nk, labels)
        return value, {"nk": grad}

    return BaseKDHook(name="hkd", fn=fn)


HOOKS = {"null": null_hook, "hkd": hkd_reference_hook}


def make_hook(name: str, **kwargs) -> BaseKDHook:
    if name not in HOOKS:
        raise InvalidArgumentError(
            f"unknown hook {name!r}; valid hooks: {sorted(HOOKS)}"
        )
    return HOOKS[name](**kwargs)


# Gradient of each loss term lands on one student head; the ensemble term
# supervises the native head.
_TERM_HEAD = {"ak": "ak", "nk": "nk", "dk": "dk", "en": "nk"}


def _require_finite_heads(outs: GranularityOutputs, context: str) -> None:
    for name in ("f_ak", "f_nk", "f_dk"):
        arr = getattr(outs, name)
        if arr is not None and not np.isfinite(arr).all():
            raise NonFiniteLossError(f"student head {name} became non-finite during {context}")


def _resolve_weights(term_weights) -> dict[str, float]:
    weights = {key: 1.0 for key in _TERM_HEAD}
    if term_weights:
        for key, value in term_weights.items():
            if key not in weights:
                raise InvalidArgumentError(
                    f"unknown loss term {key!r}; valid terms: {sorted(weights)}"
                )
            if not (float(value) >= 0):
                raise InvalidArgumentError(f"term weight {key} must be >= 0, got {value}")
            weights[key] = float(value)
    return weights


def _scheme_terms_and_grads(scheme, t_outs, s_outs, temps, weights):
    tau_map = temps.head_map()
    t_map = t_outs.head_map()
    s_map = s_outs.head_map()
    if scheme is DistillScheme.GWD:
        terms = gwd_terms(t_map, s_map, tau_map)
        grads = gwd_loss_grad(t_map, s_map, tau_map)
        grads = {head: weights[head] * g for head, g in grads.items()}
    else:
        b_map = t_outs.branch_map()
        terms = se_terms(t_map, b_map, s_map, tau_map)
        grads = {
            "ak": weights["ak"] * hkd_loss_grad(t_map["ak"], s_map["ak"], tau_map["ak"]),
            "nk": weights["en"]
            * ensemble_loss_grad(b_map["akb"], t_map["nk"], b_map["dkb"], s_map["nk"], tau_map["nk"]),
            "dk": weights["dk"] * hkd_loss_grad(t_map["dk"], s_map["dk"], tau_map["dk"]),
        }
    weighted = {key: weights[key] * value for key, value in terms.items()}
    return weighted, grads


def _eval_epoch(t_sa, student, scheme, temps, hook, data, batch_size, weights):
    """Total scheme loss and accuracy on a held-out split, no gradients."""
    loss_sum = 0.0
    hits = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        t_outs = forward_teacher(t_sa, x)
        s_outs = forward_student(student, x)
        base_val, _ = hook(t_outs, s_outs, y)
        terms, _ = _scheme_terms_and_grads(scheme, t_outs, s_outs, temps, weights)
        loss_sum += (sum(terms.values()) + base_val) * len(y)
        hits += int((s_outs.f_nk.argmax(axis=1) == y).sum())
    return loss_sum / len(data), hits / len(data)


def run_distillation(
    t_sa: TeacherBundle,
    student: StudentBundle,
    scheme: DistillScheme,
    temps: DistillTemperatures,
    hook: BaseKDHook,
    schedule: TrainSchedule,
    data: DatasetSplit,
    val_data: Optional[DatasetSplit] = None,
    seed: int = 0,
    term_weights=None,
    augment_fn=None,
) -> tuple[StudentBundle, list[dict]]:
    """Optimize the whole student (backbone, classifier, both encoders)
    under the frozen self-analyzed teacher.

    Returns the student and per-epoch metric rows carrying the learning
    rate, the per-term loss decomposition (``loss_nk`` under ``gwd``,
    ``loss_en`` under ``se``), the hook contribution, train accuracy, and
    validation loss/accuracy when a validation split is given.
    ``term_weights`` optionally re-weights individual loss terms; the
    default is unit weights for every term.
    """
    scheme = DistillScheme.parse(scheme)
    weights = _resolve_weights(term_weights)
    if len(data) == 0:
        raise InvalidArgumentError("training split is empty")
    if student.spec != t_sa.spec:
        raise InvalidArgumentError(
            f"student encoder spec {student.spec} does not match teacher spec {t_sa.spec}"
        )
    optimizer = SGD(collect_params(student.trainable_parts()), schedule.momentum)
    shuffle_rng = np.random.default_rng([int(seed), 30])
    augment_rng = np.random.default_rng([int(seed), 32])

    records = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        term_sums: dict[str, float] = {}
        hook_sum = 0.0
        hits = 0
        for idx in iterate_batches(len(data), schedule.batch_size, shuffle_rng):
            x, y = data.images[idx], data.labels[idx]
            if augment_fn is not None:
                x = augment_fn(x, augment_rng)
            t_outs = forward_teacher(t_sa, x)
            s_outs = forward_student(student, x, need_grad=True)
            _require_finite_heads(s_outs, f"epoch {epoch}")

            base_val, base_grads = hook(t_outs, s_outs, y)
            terms, grads = _scheme_terms_and_grads(scheme, t_outs, s_outs, temps, weights)
            total = sum(terms.values()) + base_val
            if not np.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite distillation loss at epoch {epoch}: "
                    f"terms={terms}, hook={base_val}"
                )
            for key, value in terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + value * len(idx)
            hook_sum += base_val * len(idx)
            hits += int((s_outs.f_nk.argmax(axis=1) == y).sum())

            head_grads = dict(grads)
            for key, g in base_grads.items():
                head_grads[key] = head_grads.get(key, 0.0) + g

            optimizer.zero_grad()
            dfeats = student.classifier.backward(to_model_grad(head_grads["nk"]))
            dfeats = dfeats + student.ake.backward(to_model_grad(head_grads["ak"]))
            dfeats = dfeats + student.dke.backward(to_model_grad(head_grads["dk"]))
            student.backbone.backward(dfeats)
            optimizer.step(lr)

        row = {"epoch": epoch, "lr": lr}
        for key in sorted(term_sums):
            row[f"loss_{key}"] = term_sums[key] / len(data)
        row["loss_hook"] = hook_sum / len(data)
        row["loss_total"] = sum(term_sums.values()) / len(data) + row["loss_hook"]
        row["train_acc"] = hits / len(data)
        if val_data is not None and len(val_data) > 0:
            val_loss, val_acc = _eval_epoch(
                t_sa, student, scheme, temps, hook, val_data, schedule.batch_size, weights
            )
            row["val_loss"] = val_loss
            row["val_acc"] = val_acc
        records.append(row)
    return student, records


def run_baseline_distillation(
    teacher,
    student: PlainModel,
    hook: BaseKDHook,
    schedule: TrainSchedule,
    data: DatasetSplit,
    val_data: Optional[DatasetSplit] = None,
    seed: int = 0,
    augment_fn=None,
) -> tuple[PlainModel, list[dict]]:
    """Train a plain (encoder-free) student with the hook loss alone.

    This is the conventional single-knowledge baseline the granularity
    schemes are compared against. The hook sees granularity outputs whose
    encoder heads are ``None``, so it must only use the native head (the
    bundled hooks do). ``teacher`` may be a TeacherBundle or PlainModel.
    """
    if len(data) == 0:
        raise InvalidArgumentError("training split is empty")
    optimizer = SGD(collect_params(student.parts()), schedule.momentum)
    shuffle_rng = np.random.default_rng([int(seed), 31])
    augment_rng = np.random.default_rng([int(seed), 33])

    def teacher_outs(x):
        f_nk = teacher.native_logits(x, batch_size=len(x))
        return GranularityOutputs(f_ak=None, f_nk=f_nk, f_dk=None)

    records = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        loss_sum = 0.0
        hits = 0
        for idx in iterate_batches(len(data), schedule.batch_size, shuffle_rng):
            x, y = data.images[idx], data.labels[idx]
            if augment_fn is not None:
                x = augment_fn(x, augment_rng)
            t_outs = teacher_outs(x)
            feats = student.backbone.forward(x, need_grad=True)
            f_nk = student.classifier.forward(feats, need_grad=True)
            s_outs = GranularityOutputs(f_ak=None, f_nk=f_nk, f_dk=None)
            _require_finite_heads(s_outs, f"epoch {epoch}")
            value, grads = hook(t_outs, s_outs, y)
            if not np.isfinite(value):
                raise NonFiniteLossError(f"non-finite baseline loss at epoch {epoch}")
            loss_sum += value * len(idx)
            hits += int((f_nk.argmax(axis=1) == y).sum())
            optimizer.zero_grad()
            student.backbone.backward(student.classifier.backward(to_model_grad(grads["nk"])))
            optimizer.step(lr)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": loss_sum / len(data),
            "train_acc": hits / len(data),
        }
        if val_data is not None and len(val_data) > 0:
            val_logits = student.native_logits(val_data.images)
            val_loss = 0.0
            for start in range(0, len(val_data), schedule.batch_size):
                x = val_data.images[start : start + schedule.batch_size]
                y = val_data.labels[start : start + schedule.batch_size]
                t_outs = teacher_outs(x)
                s_outs = GranularityOutputs(
                    f_ak=None, f_nk=val_logits[start : start + schedule.batch_size], f_dk=None
                )
                value, _ = hook(t_outs, s_outs, y)
                val_loss += value * len(y)
            row["val_loss"] = val_loss / len(val_data)
            row["val_acc"] = float((val_logits.argmax(axis=1) == val_data.labels).mean())
        records.append(row)
    return student, records


def early_loss_stability(records, fraction: float) -> float:
    """Population variance of the first ``ceil(fraction * len)`` loss values.

    A low value means the early optimization period was stable.
    """
    values = np.asarray(list(records), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise InvalidArgumentError("records must be a non-empty scalar sequence")
    if not (0.0 < fraction <= 1.0):
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(np.ceil(fraction * values.size))
    return float(np.var(values[:k]))
