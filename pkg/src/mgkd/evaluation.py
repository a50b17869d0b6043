"""Measurement suite: accuracy, representation similarity (CKA), per-head
knowledge similarity, correlation-matrix differences, noise robustness,
and frozen-backbone transfer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import DatasetSplit, add_gaussian_noise
from .errors import DegenerateColumnWarning, DegenerateInputError, InvalidArgumentError
from .losses import softmax_temp
from .nn import Affine
from .train import SGD, TrainSchedule, check_finite, iterate_batches, to_model_grad
from .losses import cross_entropy, cross_entropy_grad

DEFAULT_NOISE_GRID = tuple(round(0.02 * i, 2) for i in range(16))

CKA_ESTIMATOR_NOTE = {
    "estimator": "biased HSIC with double-centered kernels",
    "rbf_bandwidth_rule": "median pairwise distance",
}


def top1_accuracy(model, split: DatasetSplit, batch_size: int = 256) -> float:
    """Fraction of samples whose native-head argmax equals the label."""
    if len(split) == 0:
        raise InvalidArgumentError("split is empty")
    logits = model.native_logits(split.images, batch_size=batch_size)
    return float((logits.argmax(axis=1) == split.labels).mean())


def _as_representation(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name}: expected (N, d) matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DegenerateInputError(f"{name}: need at least 2 samples, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise InvalidArgumentError(f"{name}: entries must be finite")
    return arr


def _center_kernel(k: np.ndarray) -> np.ndarray:
    k = k - k.mean(axis=0, keepdims=True)
    return k - k.mean(axis=1, keepdims=True)


def _kernel_matrix(x: np.ndarray, kernel: str, bandwidth: Optional[float]) -> np.ndarray:
    if kernel == "linear":
        return x @ x.T
    if kernel == "rbf":
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
        if bandwidth is None:
            iu = np.triu_indices(x.shape[0], k=1)
            bandwidth = float(np.median(np.sqrt(d2[iu])))
        if not (bandwidth > 0):
            raise DegenerateInputError(
                f"rbf bandwidth is {bandwidth}; representations are degenerate"
            )
        return np.exp(-d2 / (2.0 * bandwidth**2))
    raise InvalidArgumentError(f"unknown kernel {kernel!r}; valid kernels: linear, rbf")


def cka_similarity(x, y, kernel: str = "linear", rbf_bandwidth: Optional[float] = None) -> float:
    """Centered kernel alignment between two representation matrices.

    Both inputs are column-centered, kernel matrices are double-centered,
    and the score is HSIC(Kx, Ky) / sqrt(HSIC(Kx, Kx) * HSIC(Ky, Ky)),
    which lies in [0, 1]. The linear kernel is invariant to orthogonal
    transformations and nonzero isotropic scaling of either input; the RBF
    bandwidth defaults to the median pairwise distance.
    """
    x = _as_representation("x", x)
    y = _as_representation("y", y)
    if x.shape[0] != y.shape[0]:
        raise InvalidArgumentError(
            f"x and y must share the sample axis, got {x.shape[0]} vs {y.shape[0]}"
        )
    x = x - x.mean(axis=0, keepdims=True)
    y = y - y.mean(axis=0, keepdims=True)
    kx = _center_kernel(_kernel_matrix(x, kernel, rbf_bandwidth))
    ky = _center_kernel(_kernel_matrix(y, kernel, rbf_bandwidth))
    cross = (kx * ky).sum()
    denom = np.sqrt((kx * kx).sum() * (ky * ky).sum())
    if not (denom > 0) or not np.isfinite(denom):
        raise DegenerateInputError("zero-variance representation; CKA undefined")
    return float(cross / denom)


@dataclass(frozen=True)
class SimilarityReport:
    """Row-averaged similarity metrics between two same-shaped output
    matrices. Rows unusable for a metric (zero norm for cosine, zero
    variance for Pearson) are skipped and counted."""

    ssim: float
    cosine: float
    pearson: float
    l2: float
    skipped_cosine: int = 0
    skipped_pearson: int = 0


def _global_ssim_rows(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    # Single-window form over each 1-D vector pair; the dynamic range is the
    # teacher row's peak-to-peak value (guarded to 1 for constant rows).
    mu_t = t.mean(axis=1)
    mu_s = s.mean(axis=1)
    var_t = t.var(axis=1)
    var_s = s.var(axis=1)
    cov = ((t - mu_t[:, None]) * (s - mu_s[:, None])).mean(axis=1)
    dyn = np.ptp(t, axis=1)
    dyn = np.where(dyn > 0, dyn, 1.0)
    c1 = (0.01 * dyn) ** 2
    c2 = (0.03 * dyn) ** 2
    num = (2 * mu_t * mu_s + c1) * (2 * cov + c2)
    den = (mu_t**2 + mu_s**2 + c1) * (var_t + var_s + c2)
    return num / den


def knowledge_similarity(t_out, s_out) -> SimilarityReport:
    """Per-sample similarity of student outputs to teacher outputs,
    averaged over the batch: vectorized global SSIM, cosine, Pearson
    correlation, and Euclidean distance."""
    t = _as_representation("t_out", t_out)
    s = _as_representation("s_out", s_out)
    if t.shape != s.shape:
        raise InvalidArgumentError(f"shapes must match, got {t.shape} vs {s.shape}")

    l2 = float(np.linalg.norm(t - s, axis=1).mean())
    ssim = float(_global_ssim_rows(t, s).mean())

    t_norm = np.linalg.norm(t, axis=1)
    s_norm = np.linalg.norm(s, axis=1)
    cos_ok = (t_norm > 0) & (s_norm > 0)
    if not cos_ok.any():
        raise DegenerateInputError("every row has zero norm; cosine undefined")
    cosine = float(
        ((t[cos_ok] * s[cos_ok]).sum(axis=1) / (t_norm[cos_ok] * s_norm[cos_ok])).mean()
    )

    tc = t - t.mean(axis=1, keepdims=True)
    sc = s - s.mean(axis=1, keepdims=True)
    t_sd = np.linalg.norm(tc, axis=1)
    s_sd = np.linalg.norm(sc, axis=1)
    pear_ok = (t_sd > 0) & (s_sd > 0)
    if not pear_ok.any():
        raise DegenerateInputError("every row has zero variance; Pearson undefined")
    pearson = float(
        ((tc[pear_ok] * sc[pear_ok]).sum(axis=1) / (t_sd[pear_ok] * s_sd[pear_ok])).mean()
    )

    return SimilarityReport(
        ssim=ssim,
        cosine=cosine,
        pearson=pearson,
        l2=l2,
        skipped_cosine=int((~cos_ok).sum()),
        skipped_pearson=int((~pear_ok).sum()),
    )


def _column_correlation(probs: np.ndarray, label: str) -> np.ndarray:
    n, c = probs.shape
    centered = probs - probs.mean(axis=0, keepdims=True)
    sd = centered.std(axis=0)
    valid = sd > 0
    if not valid.all():
        warnings.warn(
            f"{label}: {int((~valid).sum())} constant probability columns; "
            "their correlation entries are set to 0",
            DegenerateColumnWarning,
            stacklevel=3,
        )
    z = np.zeros_like(centered)
    z[:, valid] = centered[:, valid] / sd[valid]
    return (z.T @ z) / n


def correlation_matrix_difference(t_logits, s_logits, use_probabilities: bool = True) -> np.ndarray:
    """Teacher-minus-student difference of class-correlation matrices.

    Each model's logits are turned into probabilities (softmax at
    temperature 1, unless ``use_probabilities`` is off) and the Pearson
    correlation between class columns is computed, yielding a CxC matrix
    per model. Constant columns produce zero entries and a warning.
    """
    t = _as_representation("t_logits", t_logits)
    s = _as_representation("s_logits", s_logits)
    if t.shape != s.shape:
        raise InvalidArgumentError(f"shapes must match, got {t.shape} vs {s.shape}")
    if use_probabilities:
        t = softmax_temp(t, 1.0)
        s = softmax_temp(s, 1.0)
    return _column_correlation(t, "teacher") - _column_correlation(s, "student")


@dataclass(frozen=True)
class NoiseCurve:
    """Accuracy deltas (in percentage points, relative to the clean run)
    over an increasing noise grid, plus the population variance of the
    deltas. Absolute accuracies ride along for plotting."""

    sigmas: tuple[float, ...]
    accuracy_delta: tuple[float, ...]
    variance: float
    accuracies: tuple[float, ...] = ()


def noise_robustness_sweep(
    model,
    split: DatasetSplit,
    sigmas: Sequence[float] = DEFAULT_NOISE_GRID,
    seed: int = 0,
) -> NoiseCurve:
    """Evaluate accuracy under per-pixel Gaussian noise of growing strength.

    The grid must start at 0 and increase; each noise level draws from a
    seed derived from (seed, grid index), so the sweep is bit-reproducible.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if not sigmas:
        raise InvalidArgumentError("sigma grid is empty")
    if any(s < 0 for s in sigmas):
        raise InvalidArgumentError(f"sigmas must be nonnegative, got {sigmas}")
    if sigmas[0] != 0.0:
        raise InvalidArgumentError(f"sigma grid must start at 0, got {sigmas[0]}")
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise InvalidArgumentError("sigma grid must be strictly increasing")
    accuracies = []
    for i, sigma in enumerate(sigmas):
        noisy = add_gaussian_noise(split, sigma, seed=[int(seed), i])
        accuracies.append(top1_accuracy(model, noisy))
    base = accuracies[0]
    deltas = tuple(100.0 * (a - base) for a in accuracies)
    return NoiseCurve(
        sigmas=sigmas,
        accuracy_delta=deltas,
        variance=float(np.var(np.asarray(deltas))),
        accuracies=tuple(accuracies),
    )


def transfer_finetune(
    student,
    train_split: DatasetSplit,
    eval_split: DatasetSplit,
    schedule: TrainSchedule,
    seed: int = 0,
    classifier: Optional[Affine] = None,
) -> float:
    """Freeze the student's backbone and fit a fresh classifier on a target
    dataset; returns target top-1 accuracy.

    The backbone is only ever run forward (its features are precomputed
    once), so its parameters cannot change. A caller-provided classifier
    must already be sized to the target class count.
    """
    if len(train_split) == 0 or len(eval_split) == 0:
        raise InvalidArgumentError("transfer splits must be non-empty")
    backbone = student.backbone
    feature_dim = backbone.feature_dim
    if classifier is None:
        classifier = Affine(feature_dim, train_split.class_count, np.random.default_rng([int(seed), 40]))
    elif classifier.out_dim != train_split.class_count:
        raise InvalidArgumentError(
            f"classifier has {classifier.out_dim} outputs, target has "
            f"{train_split.class_count} classes"
        )
    feats_train = _batched(backbone, train_split.images)
    feats_eval = _batched(backbone, eval_split.images)

    optimizer = SGD(classifier.params(), schedule.momentum)
    shuffle_rng = np.random.default_rng([int(seed), 41])
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for idx in iterate_batches(len(train_split), schedule.batch_size, shuffle_rng):
            logits = classifier.forward(feats_train[idx], need_grad=True)
            check_finite(cross_entropy(logits, train_split.labels[idx]), f"transfer epoch {epoch}")
            optimizer.zero_grad()
            classifier.backward(to_model_grad(cross_entropy_grad(logits, train_split.labels[idx])))
            optimizer.step(lr)
    logits = classifier.forward(feats_eval)
    return float((logits.argmax(axis=1) == eval_split.labels).mean())


def _batched(backbone, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate(
        [
            backbone.forward(images[start : start + batch_size])
            for start in range(0, images.shape[0], batch_size)
        ],
        axis=0,
    )
