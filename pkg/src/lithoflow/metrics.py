"""Sequence-labeling metrics: weighted precision/recall/F1 and fragmentation.

Conventions: confusion-matrix rows index the true class, columns the
predicted class, so row sums equal class supports.  Weighted averages weight
per-class values by true-class support.  A class with no predicted samples
gets precision 0 (with a warning) rather than a crash.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import groupby
from typing import Optional

import numpy as np


class MetricsError(ValueError):
    """Raised for malformed metric inputs."""


def _check_labels(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int):
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise MetricsError("y_true and y_pred must be equal-length vectors")
    if y_true.size == 0:
        raise MetricsError("empty label vectors")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise MetricsError(f"{name} contains labels outside [0, {num_classes})")
    return y_true, y_pred


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """|C| x |C| count matrix with rows = truth, columns = prediction."""
    y_true, y_pred = _check_labels(y_true, y_pred, num_classes)
    mat = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(mat, (y_true, y_pred), 1)
    return mat


@dataclass(frozen=True)
class PRFReport:
    """Per-class and support-weighted precision / recall / F1."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float


def weighted_prf(y_true, y_pred, num_classes: int) -> PRFReport:
    """Precision, recall, and F1 per class plus support-weighted averages.

    Per class: precision = TP / predicted count, recall = TP / support,
    F1 their harmonic mean.  Degenerate denominators give 0; an absent
    predicted class additionally warns, since silent zeros have hidden real
    regressions before.  The weighted averages use true-class supports, so
    zero-support classes drop out of them naturally.
    """
    mat = confusion_matrix(y_true, y_pred, num_classes)
    support = mat.sum(axis=1)
    pred_count = mat.sum(axis=0)
    tp = np.diag(mat).astype(float)

    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    for c in range(num_classes):
        if pred_count[c] > 0:
            precision[c] = tp[c] / pred_count[c]
        elif support[c] > 0:
            warnings.warn(f"class {c} never predicted; precision set to 0")
        if support[c] > 0:
            recall[c] = tp[c] / support[c]
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)

    total = support.sum()
    return PRFReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        weighted_precision=float((support * precision).sum() / total),
        weighted_recall=float((support * recall).sum() / total),
        weighted_f1=float((support * f1).sum() / total),
        accuracy=float(tp.sum() / total),
    )


def run_lengths(labels) -> list[tuple[int, int]]:
    """Run-length encoding: (label, consecutive count) pairs in order."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise MetricsError("empty label vector")
    return [(int(k), len(list(g))) for k, g in groupby(labels.tolist())]


def fragmentation_rate(labels, interval: float,
                       min_thickness: Optional[float] = None) -> float:
    """Fraction of constant-label runs thinner than ``min_thickness`` meters.

    Thickness of a run is its sample count times the sampling interval.
    Default threshold is three sampling intervals, so isolated one- or
    two-sample islands count as fragments.  0 means every predicted bed is
    at least the minimum thickness; 1 means pure speckle.
    """
    if interval <= 0:
        raise MetricsError("interval must be positive")
    if min_thickness is None:
        min_thickness = 3.0 * interval
    if min_thickness <= 0:
        raise MetricsError("min_thickness must be positive")
    runs = run_lengths(labels)
    thin = sum(1 for _, n in runs if n * interval < min_thickness)
    return thin / len(runs)
