"""Distillation loss algebra on plain numpy arrays.

A logits batch is an (N, d) float matrix with one row per sample; a
probability batch is row-stochastic of the same shape; labels are an
integer vector of length N. All losses are means over the batch.

Every loss that supervises a student-side quantity has a companion
``*_grad`` function returning the analytic gradient with respect to that
argument. Teacher-side arguments are always treated as constants: no
gradient for them is ever defined or exposed.

Granularity-keyed maps use the keys ``"ak"``, ``"nk"``, ``"dk"`` for the
abstracted / native / detailed heads, and ``"akb"`` / ``"dkb"`` for the
teacher branch (adapter) outputs.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import InvalidArgumentError

GRANULARITIES = ("ak", "nk", "dk")

# Lower clamp applied to the second (student-side) distribution inside the
# KL sum, so log(0) never occurs. Small enough not to bias gradients at
# float64 precision.
Q_CLAMP = 1e-12

# Row-sum tolerance when validating probability batches.
_PROB_TOL = 1e-6


def _as_logits(name: str, values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name}: expected a 2-D (N, d) matrix, got shape {arr.shape}")
    n, d = arr.shape
    if n < 1 or d < 2:
        raise InvalidArgumentError(f"{name}: need N >= 1 and d >= 2, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidArgumentError(f"{name}: entries must all be finite")
    return arr


def _as_probs(name: str, values) -> np.ndarray:
    arr = _as_logits(name, values)
    if arr.min() < -_PROB_TOL or arr.max() > 1.0 + _PROB_TOL:
        raise InvalidArgumentError(f"{name}: entries must lie in [0, 1]")
    row_sums = arr.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > _PROB_TOL:
        raise InvalidArgumentError(f"{name}: rows must sum to 1 within {_PROB_TOL}")
    return arr


def _as_labels(name: str, labels, num_classes: int, n: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise InvalidArgumentError(f"{name}: expected {n} labels, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidArgumentError(f"{name}: labels must be integers")
    if arr.min() < 0 or arr.max() >= num_classes:
        raise InvalidArgumentError(f"{name}: labels must lie in [0, {num_classes})")
    return arr.astype(np.int64)


def _check_tau(tau) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise InvalidArgumentError(f"temperature must be a positive finite real, got {tau}")
    return tau


def _check_same_shape(a_name: str, a: np.ndarray, b_name: str, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"{a_name} and {b_name} must have identical shapes, got {a.shape} vs {b.shape}"
        )


def softmax_temp(logits, tau) -> np.ndarray:
    """Row-wise tempered softmax ``softmax(logits / tau)``.

    Uses the max-subtraction form, so arbitrarily large logit magnitudes
    are safe. The output is row-stochastic with strictly positive entries
    (up to float underflow for extreme logit gaps).
    """
    logits = _as_logits("logits", logits)
    tau = _check_tau(tau)
    z = logits / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_divergence(p, q) -> float:
    """Batch-mean KL divergence KL(p || q) between row-stochastic matrices.

    Per row: sum_c p_c * ln(p_c / q_c), with the 0*ln(0) = 0 convention on
    the p side and q clamped below by ``Q_CLAMP`` so the log is always
    defined.
    """
    p = _as_probs("p", p)
    q = _as_probs("q", q)
    _check_same_shape("p", p, "q", q)
    log_q = np.log(np.maximum(q, Q_CLAMP))
    log_p = np.log(np.maximum(p, Q_CLAMP))
    per_row = np.where(p > 0.0, p * (log_p - log_q), 0.0).sum(axis=1)
    return float(per_row.mean())


def hkd_loss(f_t, f_s, tau) -> float:
    """Temperature-scaled distillation loss between teacher and student logits.

    Computes ``tau**2 * KL(softmax(f_t/tau) || softmax(f_s/tau))``, averaged
    over the batch. Zero exactly when both sides induce identical tempered
    distributions. The gradient (see :func:`hkd_loss_grad`) flows only into
    ``f_s``; ``f_t`` is constant supervision.
    """
    f_t = _as_logits("f_t", f_t)
    f_s = _as_logits("f_s", f_s)
    _check_same_shape("f_t", f_t, "f_s", f_s)
    tau = _check_tau(tau)
    return tau**2 * kl_divergence(softmax_temp(f_t, tau), softmax_temp(f_s, tau))


def hkd_loss_grad(f_t, f_s, tau) -> np.ndarray:
    """Analytic gradient of :func:`hkd_loss` with respect to ``f_s``."""
    f_t = _as_logits("f_t", f_t)
    f_s = _as_logits("f_s", f_s)
    _check_same_shape("f_t", f_t, "f_s", f_s)
    tau = _check_tau(tau)
    p = softmax_temp(f_t, tau)
    q = softmax_temp(f_s, tau)
    return (tau / f_s.shape[0]) * (q - p)


def cross_entropy(f, y) -> float:
    """Batch-mean cross entropy of logits ``f`` against integer labels ``y``."""
    f = _as_logits("f", f)
    y = _as_labels("y", y, f.shape[1], f.shape[0])
    z = f - f.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(f.shape[0]), y].mean())


def cross_entropy_grad(f, y) -> np.ndarray:
    """Analytic gradient of :func:`cross_entropy` with respect to ``f``."""
    f = _as_logits("f", f)
    y = _as_labels("y", y, f.shape[1], f.shape[0])
    n = f.shape[0]
    grad = softmax_temp(f, 1.0)
    grad[np.arange(n), y] -= 1.0
    return grad / n


def granularity_analysis_loss(f_nk_t, f_b_t, tau_b) -> float:
    """Branch-to-native analysis loss: the tempered KL of the branch output
    against the (constant) native logits. Definitionally identical to
    :func:`hkd_loss` with the native head in the teacher position."""
    return hkd_loss(f_nk_t, f_b_t, tau_b)


def granularity_analysis_loss_grad(f_nk_t, f_b_t, tau_b) -> np.ndarray:
    """Gradient of :func:`granularity_analysis_loss` with respect to the branch output."""
    return hkd_loss_grad(f_nk_t, f_b_t, tau_b)


def self_analyze_loss(f_nk_t, f_b_t, tau_b, y) -> float:
    """Branch training objective: analysis loss plus ground-truth cross entropy.

    Both terms carry unit weight.
    """
    return granularity_analysis_loss(f_nk_t, f_b_t, tau_b) + cross_entropy(f_b_t, y)


def self_analyze_loss_grad(f_nk_t, f_b_t, tau_b, y) -> np.ndarray:
    """Gradient of :func:`self_analyze_loss` with respect to the branch output."""
    return granularity_analysis_loss_grad(f_nk_t, f_b_t, tau_b) + cross_entropy_grad(f_b_t, y)


def ensemble_average(a, n, d) -> np.ndarray:
    """Elementwise arithmetic mean of three same-shaped logits batches."""
    a = _as_logits("a", a)
    n = _as_logits("n", n)
    d = _as_logits("d", d)
    _check_same_shape("a", a, "n", n)
    _check_same_shape("a", a, "d", d)
    return (a + n + d) / 3.0


def ensemble_loss(f_akb, f_nk_t, f_dkb, f_nk_s, tau_nk) -> float:
    """Distillation of the branch/native ensemble into the student's native head.

    The supervision is ``ensemble_average(f_akb, f_nk_t, f_dkb)``, compared
    against ``f_nk_s`` at the native distillation temperature.
    """
    return hkd_loss(ensemble_average(f_akb, f_nk_t, f_dkb), f_nk_s, tau_nk)


def ensemble_loss_grad(f_akb, f_nk_t, f_dkb, f_nk_s, tau_nk) -> np.ndarray:
    """Gradient of :func:`ensemble_loss` with respect to ``f_nk_s``."""
    return hkd_loss_grad(ensemble_average(f_akb, f_nk_t, f_dkb), f_nk_s, tau_nk)


def _check_map(name: str, outs: Mapping[str, np.ndarray], keys) -> dict[str, np.ndarray]:
    missing = [k for k in keys if k not in outs]
    if missing:
        raise InvalidArgumentError(f"{name}: missing granularity keys {missing}")
    return {k: _as_logits(f"{name}[{k!r}]", outs[k]) for k in keys}


def _check_temps(temps: Mapping[str, float], keys) -> dict[str, float]:
    missing = [k for k in keys if k not in temps]
    if missing:
        raise InvalidArgumentError(f"temps: missing granularity keys {missing}")
    return {k: _check_tau(temps[k]) for k in keys}


def _check_base_kd(base_kd) -> float:
    base_kd = float(base_kd)
    if not np.isfinite(base_kd):
        raise InvalidArgumentError("base_kd must be finite")
    return base_kd


def gwd_terms(teacher_outs, student_outs, temps) -> dict[str, float]:
    """Per-head loss terms of the granularity-wise objective, keyed ak/nk/dk."""
    t = _check_map("teacher_outs", teacher_outs, GRANULARITIES)
    s = _check_map("student_outs", student_outs, GRANULARITIES)
    taus = _check_temps(temps, GRANULARITIES)
    return {k: hkd_loss(t[k], s[k], taus[k]) for k in GRANULARITIES}


def gwd_loss(teacher_outs, student_outs, temps, base_kd=0.0) -> float:
    """Granularity-wise distillation objective.

    Sum of per-head tempered KL terms over the abstracted, native and
    detailed heads plus a precomputed base distillation contribution, so any
    external distillation loss can plug in without this module knowing its
    form.
    """
    base_kd = _check_base_kd(base_kd)
    terms = gwd_terms(teacher_outs, student_outs, temps)
    return sum(terms[k] for k in GRANULARITIES) + base_kd


def gwd_loss_grad(teacher_outs, student_outs, temps) -> dict[str, np.ndarray]:
    """Per-head gradients of :func:`gwd_loss` with respect to the student outputs."""
    t = _check_map("teacher_outs", teacher_outs, GRANULARITIES)
    s = _check_map("student_outs", student_outs, GRANULARITIES)
    taus = _check_temps(temps, GRANULARITIES)
    return {k: hkd_loss_grad(t[k], s[k], taus[k]) for k in GRANULARITIES}


def se_terms(teacher_outs, teacher_branch_outs, student_outs, temps) -> dict[str, float]:
    """Per-term losses of the stable-excitation objective, keyed ak/dk/en."""
    t = _check_map("teacher_outs", teacher_outs, GRANULARITIES)
    b = _check_map("teacher_branch_outs", teacher_branch_outs, ("akb", "dkb"))
    s = _check_map("student_outs", student_outs, GRANULARITIES)
    taus = _check_temps(temps, GRANULARITIES)
    return {
        "ak": hkd_loss(t["ak"], s["ak"], taus["ak"]),
        "dk": hkd_loss(t["dk"], s["dk"], taus["dk"]),
        "en": ensemble_loss(b["akb"], t["nk"], b["dkb"], s["nk"], taus["nk"]),
    }


def se_loss(teacher_outs, teacher_branch_outs, student_outs, temps, base_kd=0.0) -> float:
    """Stable-excitation distillation objective.

    The per-head sum runs over the abstracted and detailed heads only; the
    native head is supervised through the ensemble of the two branch
    outputs and the native logits. ``base_kd`` is added as in
    :func:`gwd_loss`.
    """
    base_kd = _check_base_kd(base_kd)
    terms = se_terms(teacher_outs, teacher_branch_outs, student_outs, temps)
    return terms["ak"] + terms["dk"] + terms["en"] + base_kd


def se_loss_grad(teacher_outs, teacher_branch_outs, student_outs, temps) -> dict[str, np.ndarray]:
    """Per-head gradients of :func:`se_loss` with respect to the student outputs.

    The ensemble term's gradient lands on the student's native head, so the
    returned dict is keyed ak/nk/dk like the student outputs.
    """
    t = _check_map("teacher_outs", teacher_outs, GRANULARITIES)
    b = _check_map("teacher_branch_outs", teacher_branch_outs, ("akb", "dkb"))
    s = _check_map("student_outs", student_outs, GRANULARITIES)
    taus = _check_temps(temps, GRANULARITIES)
    return {
        "ak": hkd_loss_grad(t["ak"], s["ak"], taus["ak"]),
        "nk": ensemble_loss_grad(b["akb"], t["nk"], b["dkb"], s["nk"], taus["nk"]),
        "dk": hkd_loss_grad(t["dk"], s["dk"], taus["dk"]),
    }
