"""Confusion matrices and the accuracy / unweighted recall / macro-F1 scores.

Rows of a confusion matrix are actual classes, columns predicted classes.
Undefined per-class scores raise :class:`DegenerateError` instead of
silently becoming zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DegenerateError


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def as_confusion(cm) -> ConfusionMatrix:
    return cm if isinstance(cm, ConfusionMatrix) else ConfusionMatrix(np.asarray(cm))


def build_confusion(pairs: Iterable[tuple[int, int]], m: int) -> ConfusionMatrix:
    counts = np.zeros((m, m), dtype=np.int64)
    for actual, predicted in pairs:
        if not (0 <= actual < m and 0 <= predicted < m):
            raise ValueError(f"class id out of range [0, {m}): ({actual}, {predicted})")
        counts[actual, predicted] += 1
    return ConfusionMatrix(counts)


def accuracy(cm) -> float:
    cm = as_confusion(cm)
    if cm.total == 0:
        raise DegenerateError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts) / cm.total)


def recall_per_class(cm, label: int) -> float:
    cm = as_confusion(cm)
    row = cm.counts[label].sum()
    if row == 0:
        raise DegenerateError(f"recall undefined for class {label}: no actual samples")
    return float(cm.counts[label, label] / row)


def precision_per_class(cm, label: int) -> float:
    cm = as_confusion(cm)
    col = cm.counts[:, label].sum()
    if col == 0:
        raise DegenerateError(f"precision undefined for class {label}: never predicted")
    return float(cm.counts[label, label] / col)


def f1_per_class(cm, label: int) -> float:
    p = precision_per_class(cm, label)
    r = recall_per_class(cm, label)
    if p + r == 0:
        raise DegenerateError(f"F1 undefined for class {label}: precision and recall are both 0")
    return 2 * p * r / (p + r)


def recall_unweighted(cm) -> float:
    cm = as_confusion(cm)
    return float(np.mean([recall_per_class(cm, l) for l in range(cm.m)]))


def f1_macro(cm) -> float:
    cm = as_confusion(cm)
    return float(np.mean([f1_per_class(cm, l) for l in range(cm.m)]))


def score_report(cm) -> dict:
    """JSON-ready summary of every score plus the raw counts."""
    cm = as_confusion(cm)
    return {
        "accuracy": accuracy(cm),
        "recall_unweighted": recall_unweighted(cm),
        "f1_macro": f1_macro(cm),
        "per_class": {
            "precision": [precision_per_class(cm, l) for l in range(cm.m)],
            "recall": [recall_per_class(cm, l) for l in range(cm.m)],
            "f1": [f1_per_class(cm, l) for l in range(cm.m)],
        },
        "confusion": cm.counts.tolist(),
    }
