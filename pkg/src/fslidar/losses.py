"""Training objectives with analytic gradients.

Every loss takes a (P, C) matrix (one row per supervised point or pixel) and
returns a :class:`LossValue` whose ``grad`` has the shape of that input.
Dense class ids follow :class:`fslidar.classspace.ClassSpace`:
``[unlabeled, base..., novel...]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classspace import ClassSpace
from .errors import (BaseLabelInNovelStage, InvalidLabel, NonFiniteLogit, NotASimplexRow,
                     TeacherShapeMismatch)

SIMPLEX_TOL = 1e-6


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.grad + other.grad, {**self.parts, **other.parts})

    def scaled(self, k: float) -> "LossValue":
        return LossValue(k * self.value, k * self.grad, {n: k * v for n, v in self.parts.items()})


# --------------------------------------------------------------------------
# helpers

def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError(f"expected a non-empty (P, C) logit matrix, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise NonFiniteLogit("logits contain NaN or inf")
    return logits


def _check_labels(labels, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n_rows,):
        raise InvalidLabel(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabel(f"labels must lie in 0..{n_classes - 1}")
    return labels


def class_weights(counts) -> np.ndarray:
    """Inverse square-root frequency weights; empty classes are treated as one point."""
    counts = np.asarray(counts, dtype=np.float64)
    return 1.0 / np.sqrt(np.maximum(counts, 1.0))


def label_counts(label_arrays, n_classes: int) -> np.ndarray:
    total = np.zeros(n_classes, dtype=np.int64)
    for lab in label_arrays:
        total += np.bincount(np.asarray(lab, dtype=np.int64), minlength=n_classes)[:n_classes]
    return total


# --------------------------------------------------------------------------
# cross entropy family

def cross_entropy(logits, labels) -> LossValue:
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1], len(logits))
    n = len(logits)
    rows = np.arange(n)
    nll = logsumexp(logits) - logits[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return LossValue(float(nll.mean()), grad / n, {"ce": float(nll.mean())})


def weighted_cross_entropy(logits, labels, weights) -> LossValue:
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1], len(logits))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (logits.shape[1],):
        raise ValueError(f"need one weight per class ({logits.shape[1]}), got {weights.shape}")
    n = len(logits)
    rows = np.arange(n)
    scale = weights[labels] / weights.sum()
    nll = logsumexp(logits) - logits[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    grad *= (scale / n)[:, None]
    value = float((scale * nll).mean())
    return LossValue(value, grad, {"wce": value})


def grouped_log_probs(logits, group) -> np.ndarray:
    """Log-probabilities with the columns in ``group`` merged into one entry.

    Column 0 of the result is the merged group, followed by the remaining
    columns in their original order.
    """
    group = np.asarray(group)
    rest = np.setdiff1d(np.arange(logits.shape[1]), group)
    lse = logsumexp(logits)[:, None]
    merged = logsumexp(logits[:, group])[:, None]
    return np.concatenate([merged, logits[:, rest]], axis=1) - lse


def grouped_probs(probs, group) -> np.ndarray:
    group = np.asarray(group)
    rest = np.setdiff1d(np.arange(probs.shape[1]), group)
    return np.concatenate([probs[:, group].sum(axis=1, keepdims=True), probs[:, rest]], axis=1)


def unbiased_cross_entropy(logits, labels, cs: ClassSpace) -> LossValue:
    """Cross entropy where an unlabeled target means "any of {u} ∪ C_base"."""
    logits = _check_logits(logits)
    labels = _check_labels(labels, logits.shape[1], len(logits))
    if logits.shape[1] != cs.num_classes:
        raise ValueError(f"expected {cs.num_classes} logits per row, got {logits.shape[1]}")
    if ((labels > 0) & (labels < cs.num_base_outputs)).any():
        raise BaseLabelInNovelStage("base-class labels cannot supervise the novel stage")
    n = len(logits)
    rows = np.arange(n)
    group = cs.background_group
    lse = logsumexp(logits)
    # a single-member group reduces to the member's logit exactly, keeping the
    # value bit-identical to plain cross entropy when C_base is empty
    target = logits[rows, labels].copy()
    bg = labels == 0
    if len(group) > 1:
        target[bg] = logsumexp(logits[bg][:, group])
    nll = lse - target

    probs = softmax(logits)
    grad = probs.copy()
    novel_rows = ~bg
    grad[rows[novel_rows], labels[novel_rows]] -= 1.0
    if bg.any():
        pg = probs[bg][:, group]
        grad[np.ix_(bg, group)] -= pg / pg.sum(axis=1, keepdims=True)
    value = float(nll.mean())
    return LossValue(value, grad / n, {"ubce": value})


def unbiased_distillation(student_logits, teacher_probs, cs: ClassSpace, mode: str = "sum",
                          labels=None) -> LossValue:
    """Distillation from the base model, merging {u} ∪ C_novel of the student into one class.

    ``mode="sum"`` sums over the teacher's classes; ``mode="label"`` keeps only
    the term of each point's (grouped) ground-truth class.
    """
    z = _check_logits(student_logits)
    teacher = np.asarray(teacher_probs, dtype=np.float64)
    nb = cs.num_base_outputs
    if teacher.shape != (len(z), nb) or z.shape[1] != cs.num_classes:
        raise TeacherShapeMismatch(
            f"teacher {teacher.shape} / student {z.shape} do not match ({len(z)}, {nb}) / {cs.num_classes}")
    if np.abs(teacher.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
        raise NotASimplexRow("teacher rows must sum to 1")
    n = len(z)
    u_group = np.concatenate([[0], cs.novel_dense])
    lse = logsumexp(z)
    logq = z[:, :nb] - lse[:, None]
    logq[:, 0] = logsumexp(z[:, u_group]) - lse

    if mode == "sum":
        w = teacher
    elif mode == "label":
        if labels is None:
            raise ValueError("mode='label' needs the point labels")
        labels = _check_labels(labels, cs.num_classes, n)
        grouped = np.where(labels >= nb, 0, labels)
        w = np.zeros_like(teacher)
        w[np.arange(n), grouped] = teacher[np.arange(n), grouped]
    else:
        raise ValueError(f"unknown distillation mode {mode!r}")

    per_point = -(w * logq).sum(axis=1)
    q = softmax(z)
    grad = q * w.sum(axis=1, keepdims=True)
    grad[:, 1:nb] -= w[:, 1:]
    qg = q[:, u_group]
    grad[:, u_group] -= w[:, :1] * qg / qg.sum(axis=1, keepdims=True)
    value = float(per_point.mean())
    return LossValue(value, grad / n, {"ubkd": value})


def plain_distillation(student_logits, teacher_probs, cs: ClassSpace) -> LossValue:
    """Cross entropy between teacher and the student's base-head softmax."""
    z = _check_logits(student_logits)
    teacher = np.asarray(teacher_probs, dtype=np.float64)
    nb = cs.num_base_outputs
    if teacher.shape != (len(z), nb):
        raise TeacherShapeMismatch(f"teacher {teacher.shape} vs expected ({len(z)}, {nb})")
    zb = z[:, :nb]
    logq = zb - logsumexp(zb)[:, None]
    per_point = -(teacher * logq).sum(axis=1)
    grad = np.zeros_like(z)
    grad[:, :nb] = softmax(zb) * teacher.sum(axis=1, keepdims=True) - teacher
    value = float(per_point.mean())
    return LossValue(value, grad / len(z), {"kd": value})


# --------------------------------------------------------------------------
# Lovász-softmax

def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss at sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_class_loss(errors: np.ndarray, fg: np.ndarray):
    """Loss of one class and its gradient w.r.t. ``errors``."""
    order = np.argsort(-errors, kind="stable")
    g = lovasz_grad(fg[order])
    grad = np.empty_like(errors)
    grad[order] = g
    return float(errors[order] @ g), grad


def lovasz_softmax(probs, labels, class_set=None) -> LossValue:
    """Mean over ``class_set`` of the Lovász-extended Jaccard loss; ``grad`` is w.r.t. ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError(f"expected a non-empty (P, C) probability matrix, got {probs.shape}")
    if np.abs(probs.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
        raise NotASimplexRow("probability rows must sum to 1")
    labels = _check_labels(labels, probs.shape[1], len(probs))
    classes = np.arange(probs.shape[1]) if class_set is None else np.asarray(class_set)
    grad = np.zeros_like(probs)
    total = 0.0
    per_class = {}
    for c in classes:
        fg = (labels == c).astype(np.float64)
        sign = 1.0 - 2.0 * fg          # error = 1 - p on foreground, p elsewhere
        errors = fg + sign * probs[:, c]
        loss_c, g_err = lovasz_class_loss(errors, fg)
        per_class[int(c)] = loss_c
        total += loss_c
        grad[:, c] = g_err * sign
    k = len(classes)
    value = total / k
    return LossValue(value, grad / k, {"lovasz": value, "lovasz_per_class": per_class})


def lovasz_softmax_logits(logits, labels, class_set=None) -> LossValue:
    logits = _check_logits(logits)
    probs = softmax(logits)
    lv = lovasz_softmax(probs, labels, class_set)
    return LossValue(lv.value, softmax_backward(probs, lv.grad), lv.parts)


# --------------------------------------------------------------------------
# stage objectives

def base_stage_loss(logits, labels, weights, class_set=None) -> LossValue:
    wce = weighted_cross_entropy(logits, labels, weights)
    lov = lovasz_softmax_logits(logits, labels, class_set)
    out = wce + lov
    out.parts["lovasz_per_class"] = lov.parts["lovasz_per_class"]
    return out


def grouped_lovasz(logits, labels, cs: ClassSpace) -> LossValue:
    """Lovász loss over the novel classes of the distribution with {u} ∪ C_base merged."""
    logits = _check_logits(logits)
    probs = softmax(logits)
    group = cs.background_group
    gp = grouped_probs(probs, group)
    glabels = np.where(labels >= cs.num_base_outputs, labels - cs.num_base_outputs + 1, 0)
    lv = lovasz_softmax(gp, glabels, np.arange(1, gp.shape[1]))
    grad_p = np.empty_like(probs)
    grad_p[:, group] = lv.grad[:, :1]
    grad_p[:, cs.novel_dense] = lv.grad[:, 1:]
    return LossValue(lv.value, softmax_backward(probs, grad_p), {"lovasz": lv.value})


def novel_stage_loss(student_logits, labels, teacher_probs, cs: ClassSpace, lambda_kd: float = 1.0,
                     distill_mode: str = "sum", unbiased: bool = True, lovasz: bool = True) -> LossValue:
    """Fine-tuning objective: CE + lambda_kd * distillation (+ grouped Lovász).

    ``unbiased=False`` swaps in plain cross entropy and plain distillation.
    """
    logits = _check_logits(student_logits)
    labels = _check_labels(labels, logits.shape[1], len(logits))
    if unbiased:
        out = unbiased_cross_entropy(logits, labels, cs)
    else:
        if ((labels > 0) & (labels < cs.num_base_outputs)).any():
            raise BaseLabelInNovelStage("base-class labels cannot supervise the novel stage")
        out = cross_entropy(logits, labels)
    if lambda_kd:
        if unbiased:
            kd = unbiased_distillation(logits, teacher_probs, cs, distill_mode, labels)
        else:
            kd = plain_distillation(logits, teacher_probs, cs)
        out = out + kd.scaled(lambda_kd)
    if lovasz:
        out = out + grouped_lovasz(logits, labels, cs)
    return out
