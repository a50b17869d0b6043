"""Teacher self-analysis: train the two granularity branches against the
frozen native head and ground truth.

The backbone and classifier never receive gradients; only the encoder and
adapter layers of each branch are optimized. Both branch losses are summed
into one optimizer step per batch -- the branches share no parameters, so
this is update-for-update identical to stepping them one after the other
on the same batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetSplit
from .errors import InvalidArgumentError, NonFiniteLossError
from .losses import (
    cross_entropy,
    cross_entropy_grad,
    granularity_analysis_loss,
    granularity_analysis_loss_grad,
)
from .models import TeacherBundle, forward_teacher
from .train import SGD, TrainSchedule, check_finite, collect_params, iterate_batches, to_model_grad

DEFAULT_TAU_AKB = 2.5
DEFAULT_TAU_DKB = 8.0


@dataclass(frozen=True)
class SelfAnalyzeConfig:
    """Branch temperatures (strictly tau_akb < tau_dkb), schedule, and seed.

    ``cache_supervision`` precomputes the frozen teacher's representation
    and native logits once instead of per batch; the teacher is
    deterministic and per-sample, so both paths produce identical results.
    """

    schedule: TrainSchedule
    tau_akb: float = DEFAULT_TAU_AKB
    tau_dkb: float = DEFAULT_TAU_DKB
    seed: int = 0
    cache_supervision: bool = False

    def __post_init__(self):
        if not (self.tau_akb > 0 and self.tau_dkb > 0):
            raise InvalidArgumentError(
                f"temperatures must be positive, got ({self.tau_akb}, {self.tau_dkb})"
            )
        if not self.tau_akb < self.tau_dkb:
            raise InvalidArgumentError(
                f"tau_akb must be strictly less than tau_dkb, got "
                f"({self.tau_akb}, {self.tau_dkb})"
            )


def run_self_analysis(
    teacher: TeacherBundle, data: DatasetSplit, cfg: SelfAnalyzeConfig, augment_fn=None
) -> tuple[TeacherBundle, list[dict]]:
    """Optimize both branches under native-head and label supervision.

    Returns the (in-place updated) bundle and one metrics row per epoch:
    epoch, lr, per-branch analysis and cross-entropy losses, and branch
    agreement with the native head.
    """
    if len(data) == 0:
        raise InvalidArgumentError("training split is empty")
    if teacher.spec.num_classes != data.class_count:
        raise InvalidArgumentError(
            f"teacher has {teacher.spec.num_classes} classes, data has {data.class_count}"
        )
    if augment_fn is not None and cfg.cache_supervision:
        raise InvalidArgumentError("cache_supervision cannot be combined with augmentation")
    schedule = cfg.schedule
    optimizer = SGD(collect_params(teacher.trainable_parts()), schedule.momentum)
    shuffle_rng = np.random.default_rng([int(cfg.seed), 20])
    augment_rng = np.random.default_rng([int(cfg.seed), 21])

    cached = None
    if cfg.cache_supervision:
        feats = _batched_features(teacher, data.images)
        cached = (feats, teacher.classifier.forward(feats))

    records = []
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        sums = {"l_ga_akb": 0.0, "l_ce_akb": 0.0, "l_ga_dkb": 0.0, "l_ce_dkb": 0.0}
        for idx in iterate_batches(len(data), schedule.batch_size, shuffle_rng):
            y = data.labels[idx]
            if cached is not None:
                feats, f_nk = cached[0][idx], cached[1][idx]
            else:
                x = data.images[idx]
                if augment_fn is not None:
                    x = augment_fn(x, augment_rng)
                feats = teacher.backbone.forward(x)
                f_nk = teacher.classifier.forward(feats)

            f_ak = teacher.ake.forward(feats, need_grad=True)
            f_akb = teacher.ak_adapter.forward(f_ak, need_grad=True)
            f_dk = teacher.dke.forward(feats, need_grad=True)
            f_dkb = teacher.dk_adapter.forward(f_dk, need_grad=True)
            if not (np.isfinite(f_akb).all() and np.isfinite(f_dkb).all()):
                raise NonFiniteLossError(
                    f"branch outputs became non-finite during self-analysis epoch {epoch}"
                )

            terms = {
                "l_ga_akb": granularity_analysis_loss(f_nk, f_akb, cfg.tau_akb),
                "l_ce_akb": cross_entropy(f_akb, y),
                "l_ga_dkb": granularity_analysis_loss(f_nk, f_dkb, cfg.tau_dkb),
                "l_ce_dkb": cross_entropy(f_dkb, y),
            }
            check_finite(sum(terms.values()), f"self-analysis epoch {epoch}")
            for key, value in terms.items():
                sums[key] += value * len(idx)

            optimizer.zero_grad()
            g_akb = granularity_analysis_loss_grad(f_nk, f_akb, cfg.tau_akb)
            g_akb += cross_entropy_grad(f_akb, y)
            teacher.ake.backward(teacher.ak_adapter.backward(to_model_grad(g_akb)))
            g_dkb = granularity_analysis_loss_grad(f_nk, f_dkb, cfg.tau_dkb)
            g_dkb += cross_entropy_grad(f_dkb, y)
            teacher.dke.backward(teacher.dk_adapter.backward(to_model_grad(g_dkb)))
            optimizer.step(lr)

        agreement = branch_agreement(teacher, data)
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / len(data) for k, v in sums.items()})
        row.update(agreement)
        records.append(row)
    return teacher, records


def branch_agreement(bundle: TeacherBundle, data: DatasetSplit, batch_size: int = 256) -> dict[str, float]:
    """Fraction of samples whose branch argmax matches the native-head argmax."""
    if len(data) == 0:
        raise InvalidArgumentError("split is empty")
    akb_hits = 0
    dkb_hits = 0
    for start in range(0, len(data), batch_size):
        outs = forward_teacher(bundle, data.images[start : start + batch_size])
        native = outs.f_nk.argmax(axis=1)
        akb_hits += int((outs.f_akb.argmax(axis=1) == native).sum())
        dkb_hits += int((outs.f_dkb.argmax(axis=1) == native).sum())
    return {
        "akb_agreement": akb_hits / len(data),
        "dkb_agreement": dkb_hits / len(data),
    }


def _batched_features(bundle: TeacherBundle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate(
        [
            bundle.backbone.forward(images[start : start + batch_size])
            for start in range(0, images.shape[0], batch_size)
        ],
        axis=0,
    )
