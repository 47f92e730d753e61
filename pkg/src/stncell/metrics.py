"""Confusion-matrix metrics and the precision/recall/F1 report layout."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import ContractError
from .losses import CLASS_NAMES, NUM_CLASSES

REPORT_NAMES = ("granulocytes", "mitotic figures", "normal t. cells")


def confusion_matrix(truth, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns are predictions."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape:
        raise ContractError(f"truth {truth.shape} and predictions {pred.shape} differ in length")
    return np.bincount(truth * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Arg-max class per row; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    macro: Dict[str, float]
    weighted: Dict[str, float]

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @classmethod
    def from_confusion(cls, confusion) -> "MetricsReport":
        cm = np.asarray(confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {cm.shape}")
        if np.any(cm < 0):
            raise ContractError("confusion matrix entries must be non-negative")
        total = cm.sum()
        if total == 0:
            raise ContractError("cannot compute metrics on an empty test set")
        tp = np.diag(cm).astype(np.float64)
        predicted = cm.sum(axis=0)
        support = cm.sum(axis=1)
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
        w = support / total
        return cls(
            confusion=cm,
            precision=precision,
            recall=recall,
            f1=f1,
            support=support,
            accuracy=float(tp.sum() / total),
            macro={"precision": float(precision.mean()), "recall": float(recall.mean()), "f1": float(f1.mean())},
            weighted={
                "precision": float(precision @ w),
                "recall": float(recall @ w),
                "f1": float(f1 @ w),
            },
        )

    @classmethod
    def from_predictions(cls, truth, pred, num_classes: int = NUM_CLASSES) -> "MetricsReport":
        if len(truth) == 0:
            raise ContractError("cannot compute metrics on an empty test set")
        return cls.from_confusion(confusion_matrix(truth, pred, num_classes))

    def rows(self) -> List[tuple]:
        """Per-class rows plus the support-weighted ``avg / total`` row."""
        out = []
        for i in range(len(self.support)):
            name = REPORT_NAMES[i] if i < len(REPORT_NAMES) else str(i)
            out.append((name, self.precision[i], self.recall[i], self.f1[i], int(self.support[i])))
        out.append(("avg / total", self.weighted["precision"], self.weighted["recall"], self.weighted["f1"], self.total))
        return out


def render_table(reports: Dict[str, MetricsReport]) -> str:
    """Plain-text table with one block per model, e.g. ``CNN baseline`` and ``CNN-STN``."""
    header = f"{'approach':<16}{'name':<18}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>9}"
    rule = "-" * len(header)
    lines = [rule, header, rule]
    for model, report in reports.items():
        for i, (name, p, r, f, n) in enumerate(report.rows()):
            label = model if i == 0 else ""
            lines.append(f"{label:<16}{name:<18}{p:>10.3f}{r:>10.3f}{f:>10.3f}{n:>9d}")
        lines.append(f"{'':<16}{'accuracy':<18}{report.accuracy:>10.3f}")
        lines.append(rule)
    return "\n".join(lines) + "\n"


def metrics_csv(reports: Dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "class", "precision", "recall", "f1", "support"])
    for model, report in reports.items():
        for name, p, r, f, n in report.rows():
            if name != "avg / total":
                name = CLASS_NAMES[REPORT_NAMES.index(name)] if name in REPORT_NAMES else name
            else:
                name = "avg/total"
            writer.writerow([model, name, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}", n])
    return buf.getvalue()


def recount(pairs: Sequence[tuple], num_classes: int = NUM_CLASSES) -> Dict[str, object]:
    """Metrics straight from raw ``(truth, prediction)`` pairs, one class at a time."""
    n = len(pairs)
    out = {"precision": [], "recall": [], "f1": [], "accuracy": sum(1 for t, p in pairs if t == p) / n}
    for c in range(num_classes):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        out["precision"].append(prec)
        out["recall"].append(rec)
        out["f1"].append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return out
