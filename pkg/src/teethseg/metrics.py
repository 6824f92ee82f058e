"""One-vs-rest confusion counts and the segmentation metrics derived from them."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("acc", "dsc", "ji", "precision", "recall", "specificity")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionCounts:
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @property
    def num_classes(self) -> int:
        return self.tp.size

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def totals(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel class of an (..., C, H, W) probability map; ties go to the lowest index."""
    return np.asarray(probs).argmax(axis=-3)


def confusion_counts(pred, true, num_classes: int = 33) -> ConfusionCounts:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"confusion_counts: prediction {pred.shape} and truth {true.shape} differ")
    for name, grid in (("prediction", pred), ("truth", true)):
        bad = (grid < 0) | (grid >= num_classes)
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"confusion_counts: {name} label {grid[pos]} at {pos} is outside 0..{num_classes - 1}")
    pred = pred.astype(np.int64).reshape(-1)
    true = true.astype(np.int64).reshape(-1)
    cm = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den, absent):
    out = np.where(absent, 1.0, 0.0)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class MetricReport:
    per_class: dict[str, np.ndarray]
    present: np.ndarray  # classes with ground-truth support

    def macro(self, include_background: bool = False) -> dict[str, float]:
        mask = self.present.copy()
        if not include_background:
            mask[0] = False
        if not mask.any():
            return {m: float("nan") for m in METRIC_NAMES}
        return {m: float(self.per_class[m][mask].mean()) for m in METRIC_NAMES}


def metrics_from_counts(counts: ConfusionCounts) -> MetricReport:
    """Per-class accuracy, DSC, JI, precision, recall, specificity.

    A zero denominator yields 1 when the class is absent from both prediction
    and truth, else 0.
    """
    tp, fp, fn, tn = (np.asarray(a, dtype=np.float64) for a in (counts.tp, counts.fp, counts.fn, counts.tn))
    absent = (tp + fp + fn) == 0
    per = {
        "acc": _ratio(tp + tn, tp + fp + fn + tn, absent),
        "dsc": _ratio(2 * tp, 2 * tp + fp + fn, absent),
        "ji": _ratio(tp, tp + fp + fn, absent),
        "precision": _ratio(tp, tp + fp, absent),
        "recall": _ratio(tp, tp + fn, absent),
        "specificity": _ratio(tn, tn + fp, absent),
    }
    return MetricReport(per, (tp + fn) > 0)


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def report_csv(rows: list[tuple[str, dict[str, float]]]) -> str:
    """CSV text with columns ``model, acc, dsc, ji, precision, recall, specificity``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model",) + METRIC_NAMES)
    for name, vals in rows:
        w.writerow([name] + [_fmt(vals[m]) for m in METRIC_NAMES])
    return buf.getvalue()
