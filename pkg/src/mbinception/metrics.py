"""Confusion matrices, classification metrics and probability-density reports."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


class ConfusionMatrix:
    """``counts[i, j]`` = samples of true class ``i`` predicted as ``j``."""

    def __init__(self, num_classes, counts=None):
        if num_classes < 1:
            raise DomainError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts shape {counts.shape} != ({num_classes}, {num_classes})")
        if np.any(counts < 0):
            raise DomainError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, true_labels, predicted_labels):
        """Return a new matrix with the given pairs added."""
        t = np.asarray(true_labels, dtype=np.int64).ravel()
        p = np.asarray(predicted_labels, dtype=np.int64).ravel()
        if t.shape != p.shape:
            raise ShapeError(f"{t.size} true labels vs {p.size} predictions")
        k = self.num_classes
        for name, arr in (("true", t), ("predicted", p)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise DomainError(f"{name} label outside [0, {k})")
        added = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return ConfusionMatrix(k, self.counts + added)

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class matrices")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def confusion_matrix(true_labels, predicted_labels, num_classes):
    return ConfusionMatrix(num_classes).accumulate(true_labels, predicted_labels)


def accuracy(cm):
    n = cm.total
    if n == 0:
        raise DomainError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / n


def binary_metrics(tp, tn, fp, fn):
    """Two-class accuracy, precision, recall and F1 from raw outcome counts."""
    total = tp + tn + fp + fn
    if total == 0:
        raise DomainError("no outcomes")
    acc = (tp + tn) / total
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1}


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def precision_recall_f1(cm):
    """Per-class one-vs-rest precision, recall, F1, plus their macro and micro averages.

    A metric whose denominator is zero is reported as 0.
    """
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    tp_sum, pred_sum, act_sum = tp.sum(), predicted.sum(), actual.sum()
    micro_p = float(tp_sum / pred_sum) if pred_sum else 0.0
    micro_r = float(tp_sum / act_sum) if act_sum else 0.0
    micro_f1 = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "micro_precision": micro_p,
        "micro_recall": micro_r,
        "micro_f1": micro_f1,
    }


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    samples: int
    micro_precision: float = 0.0
    micro_recall: float = 0.0
    micro_f1: float = 0.0

    @classmethod
    def from_confusion(cls, cm):
        prf = precision_recall_f1(cm)
        return cls(
            accuracy(cm),
            prf["macro_precision"],
            prf["macro_recall"],
            prf["macro_f1"],
            prf["precision"],
            prf["recall"],
            prf["f1"],
            cm.total,
            prf["micro_precision"],
            prf["micro_recall"],
            prf["micro_f1"],
        )

    def as_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "samples": self.samples,
            "per_class_precision": [float(v) for v in self.per_class_precision],
            "per_class_recall": [float(v) for v in self.per_class_recall],
            "per_class_f1": [float(v) for v in self.per_class_f1],
        }


def probability_density_report(values, bins=20):
    """Histogram of probabilities on equal-width bins over [0, 1].

    Returns ``(edges, density)`` where ``density`` sums to 1. The last bin is
    closed, so a value of exactly 1.0 lands in it.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DomainError("probability density of an empty sample")
    if bins < 2:
        raise DomainError(f"need at least 2 bins, got {bins}")
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise DomainError("probabilities must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((values * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return edges, counts / values.size


def write_histogram_csv(path, edges, density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "density"])
        for lo, hi, d in zip(edges[:-1], edges[1:], density):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])


METRIC_COLUMNS = ["model", "dataset", "accuracy", "precision", "recall", "f1", "param_count", "epochs", "seed"]


def metric_row(model, dataset, report, param_count, epochs, seed):
    return {
        "model": model,
        "dataset": dataset,
        "accuracy": repr(float(report.accuracy)),
        "precision": repr(float(report.precision)),
        "recall": repr(float(report.recall)),
        "f1": repr(float(report.f1)),
        "param_count": int(param_count),
        "epochs": int(epochs),
        "seed": int(seed),
    }


def write_metric_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_metric_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
