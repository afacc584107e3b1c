"""Confusion-matrix accumulation and the base / novel / overall mIoU splits."""
from __future__ import annotations

import csv
import io

import numpy as np

from .classspace import ClassSpace
from .errors import EmptySubset, LengthMismatch, UnknownLabel


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions (dense class ids)."""

    def __init__(self, n_classes: int, ignore_index: int | None = 0):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def accumulate(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if gt.shape != pred.shape:
            raise LengthMismatch(f"{gt.size} ground-truth labels vs {pred.size} predictions")
        for arr in (gt, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n_classes):
                raise UnknownLabel(f"label outside 0..{self.n_classes - 1}")
        if self.ignore_index is not None:
            keep = gt != self.ignore_index
            gt, pred = gt[keep], pred[keep]
        self.counts += np.bincount(gt * self.n_classes + pred,
                                   minlength=self.n_classes ** 2).reshape(self.n_classes, self.n_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self, c: int, skip_absent: bool = False) -> float:
        tp = self.counts[c, c]
        fp = self.counts[:, c].sum() - tp
        fn = self.counts[c, :].sum() - tp
        denom = tp + fp + fn
        if denom == 0:
            return float("nan") if skip_absent else 0.0
        return float(tp / denom)

    def miou(self, subset, skip_absent: bool = False) -> float:
        subset = list(subset)
        if not subset:
            raise EmptySubset("mIoU needs at least one class")
        vals = [self.iou(int(c), skip_absent) for c in subset]
        if skip_absent:
            vals = [v for v in vals if not np.isnan(v)]
            return float(np.mean(vals)) if vals else 0.0
        return float(sum(vals) / len(vals))


def accumulate(cm: ConfusionMatrix, gt_labels, pred_labels) -> ConfusionMatrix:
    return cm.accumulate(gt_labels, pred_labels)


def iou(cm: ConfusionMatrix, c: int) -> float:
    return cm.iou(c)


def miou(cm: ConfusionMatrix, subset) -> float:
    return cm.miou(subset)


def splits(cm: ConfusionMatrix, cs: ClassSpace, skip_absent: bool = False) -> dict[str, float]:
    base, novel = cs.base_dense, cs.novel_dense
    return {
        "miou_base": cm.miou(base, skip_absent),
        "miou_novel": cm.miou(novel, skip_absent),
        "miou": cm.miou(np.concatenate([base, novel]), skip_absent),
    }


def iou_table(cm: ConfusionMatrix, cs: ClassSpace) -> dict[str, float]:
    """Per-class IoU (base then novel columns) followed by the three splits."""
    names = cs.dense_names()
    row = {names[c]: cm.iou(int(c)) for c in np.concatenate([cs.base_dense, cs.novel_dense])}
    row.update(splits(cm, cs))
    return row


def table_csv(rows: list[dict], float_fmt: str = "{:.6f}") -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: float_fmt.format(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
