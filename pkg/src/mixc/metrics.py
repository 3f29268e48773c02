"""Confusion matrices, per-class reports and run comparison tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mixc.synthgen import CLASSES

N = len(CLASSES)


def confusion_matrix(true, pred, n_classes: int = N) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    true, pred = np.asarray(true, dtype=int), np.asarray(pred, dtype=int)
    if true.shape != pred.shape:
        raise ValueError("true and predicted label arrays differ in shape")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


@dataclass
class ClassMetrics:
    name: str
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    support: int


@dataclass
class ClassReport:
    classes: list
    accuracy: float
    total: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "classes": [vars(c).copy() for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassReport":
        return cls([ClassMetrics(**c) for c in d["classes"]], d["accuracy"], d["total"])

    def to_text(self) -> str:
        def fmt(v):
            return "N/A" if v is None else f"{v:.2f}"

        width = max(len(c.name) for c in self.classes) + 2
        lines = [f"{'Class':<{width}}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}"]
        for c in self.classes:
            lines.append(f"{c.name:<{width}}{fmt(c.precision):>10}{fmt(c.recall):>10}{fmt(c.f1):>10}{c.support:>10}")
        lines.append(f"{'accuracy':<{width}}{'':>10}{'':>10}{self.accuracy:>10.4f}{self.total:>10}")
        return "\n".join(lines) + "\n"


def class_report(cm: np.ndarray, names=CLASSES) -> ClassReport:
    """Per-class precision/recall/F1. Zero-support classes get None (N/A);
    a zero denominator otherwise gives 0."""
    cm = np.asarray(cm)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    out = []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        support = int(cm[k].sum())
        predicted = int(cm[:, k].sum())
        if support == 0:
            out.append(ClassMetrics(names[k], None, None, None, 0))
            continue
        p = tp / predicted if predicted else 0.0
        r = tp / support
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out.append(ClassMetrics(names[k], p, r, f1, support))
    return ClassReport(out, float(np.trace(cm)) / total, total)


def evaluate(model, images: np.ndarray, labels: np.ndarray, channels: int = 3):
    """Returns (confusion matrix, report). References are argmax of the soft labels."""
    from mixc import netcore
    from mixc.trainer import to_input

    if len(images) == 0:
        raise ValueError("no samples to evaluate")
    probs = np.concatenate([netcore.forward(model, to_input(images[i:i + 128], channels))
                            for i in range(0, len(images), 128)])
    cm = confusion_matrix(np.asarray(labels).argmax(axis=1), probs.argmax(axis=1))
    return cm, class_report(cm)


# ---------------------------------------------------------------------------
# comparison tables


@dataclass
class ComparisonRow:
    name: str
    train_acc: float
    gap: float
    test_acc: Optional[float]


def compare_runs(runs: dict, last_n: int = 50) -> list:
    """One row per named RunHistory: last-window train accuracy, gap, test accuracy."""
    from mixc.trainer import last_train_acc, train_val_gap

    if len(runs) < 2:
        raise ValueError("need at least two runs to compare")
    return [ComparisonRow(name, last_train_acc(h, last_n), train_val_gap(h, last_n), h.test_acc)
            for name, h in runs.items()]


def _pct(v):
    return "N/A" if v is None else f"{100 * v:.1f}%"


def rows_to_text(rows) -> str:
    width = max(len("Model"), *(len(r.name) for r in rows)) + 2
    lines = [f"{'Model':<{width}}{'Training Acc.':>15}{'Gap':>8}{'Test Acc.':>11}"]
    for r in rows:
        lines.append(f"{r.name:<{width}}{_pct(r.train_acc):>15}{_pct(r.gap):>8}{_pct(r.test_acc):>11}")
    return "\n".join(lines) + "\n"


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "train_acc", "gap", "test_acc"])
    for r in rows:
        w.writerow([r.name, repr(r.train_acc), repr(r.gap), "" if r.test_acc is None else repr(r.test_acc)])
    return buf.getvalue()
