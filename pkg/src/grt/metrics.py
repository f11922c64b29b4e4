"""Confusion-matrix based segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("static", "car", "pedestrian", "pedestrian_group", "bike", "truck")


class ConfusionMatrix:
    """C x C counts, rows are ground truth and columns predictions."""

    def __init__(self, num_classes: int = 6, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (num_classes, num_classes) or (self.counts < 0).any():
            raise ValueError("counts must be a non-negative C x C matrix")

    def update(self, predictions, labels, ignore=None) -> "ConfusionMatrix":
        """Add a batch; points flagged in ``ignore`` (e.g. padding copies) are skipped."""
        predictions = np.asarray(predictions, dtype=np.int64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if predictions.shape != labels.shape:
            raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
        if ignore is not None:
            keep = ~np.asarray(ignore, dtype=bool).ravel()
            predictions, labels = predictions[keep], labels[keep]
        c = self.num_classes
        for name, arr in (("prediction", predictions), ("label", labels)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValueError(f"{name} values must lie in [0, {c})")
        self.counts += np.bincount(labels * c + predictions, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn(self):
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn

    def present(self) -> np.ndarray:
        tp, fp, fn = self.tp_fp_fn()
        return (tp + fp + fn) > 0

    def iou(self, include_absent: bool = False):
        """Per-class IoU (NaN for absent classes) and their mean.

        Absent classes (no TP, FP or FN) are left out of the mean unless
        ``include_absent`` is set, in which case they count as zero.
        """
        tp, fp, fn = self.tp_fp_fn()
        return _scores(tp, tp + fp + fn, include_absent)

    def f1(self, include_absent: bool = False):
        tp, fp, fn = self.tp_fp_fn()
        return _scores(2 * tp, 2 * tp + fp + fn, include_absent)

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")


def _scores(num, den, include_absent):
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)
    if include_absent:
        mean = float(np.nan_to_num(per_class, nan=0.0).mean())
    else:
        mean = float(np.nanmean(per_class)) if np.any(den > 0) else float("nan")
    return per_class, mean


@dataclass
class EvaluationReport:
    iou: list[float]
    f1: list[float]
    miou: float
    macro_f1: float
    accuracy: float
    present: list[bool]
    confusion: list[list[int]]
    class_names: tuple[str, ...] = CLASS_NAMES

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, include_absent: bool = False) -> "EvaluationReport":
        iou, miou = cm.iou(include_absent)
        f1, mf1 = cm.f1(include_absent)
        names = CLASS_NAMES if cm.num_classes == len(CLASS_NAMES) else \
            tuple(f"class_{i}" for i in range(cm.num_classes))
        return cls(
            iou=[None if np.isnan(v) else float(v) for v in iou],
            f1=[None if np.isnan(v) else float(v) for v in f1],
            miou=miou,
            macro_f1=mf1,
            accuracy=cm.accuracy(),
            present=[bool(p) for p in cm.present()],
            confusion=cm.counts.tolist(),
            class_names=names,
        )

    def to_json(self, **extra) -> str:
        record = {
            "miou": self.miou,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": {
                name: {"iou": i, "f1": f, "present": p}
                for name, i, f, p in zip(self.class_names, self.iou, self.f1, self.present)
            },
            "confusion_matrix": self.confusion,
        }
        record.update(extra)
        return json.dumps(record, indent=2)

    def to_text(self) -> str:
        lines = [f"mIoU      {self.miou:.4f}", f"macro F1  {self.macro_f1:.4f}",
                 f"accuracy  {self.accuracy:.4f}", "", f"{'class':<18}{'IoU':>8}{'F1':>8}"]
        for name, i, f in zip(self.class_names, self.iou, self.f1):
            fmt = lambda v: "  absent" if v is None else f"{v:8.4f}"
            lines.append(f"{name:<18}{fmt(i)}{fmt(f)}")
        lines.append("")
        lines.append("confusion (rows = truth, cols = prediction)")
        lines.extend(" ".join(f"{c:7d}" for c in row) for row in self.confusion)
        return "\n".join(lines)
