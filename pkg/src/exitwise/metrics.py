"""Confusion matrices and unweighted average recall."""

from __future__ import annotations

import logging

import numpy as np

from .errors import DataError, LabelError, ShapeError

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """C x C count matrix; rows are true classes, columns predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ShapeError(f"expected {(num_classes, num_classes)} counts, got {counts.shape}")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        self.num_classes = num_classes
        self.counts = counts

    def add(self, y_true, y_pred) -> None:
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        bad = (y_true < 0) | (y_true >= self.num_classes) | (y_pred < 0) | (y_pred >= self.num_classes)
        if bad.any():
            raise LabelError(f"label outside [0, {self.num_classes})")
        np.add.at(self.counts, (y_true, y_pred), 1)

    def to_lists(self) -> list[list[int]]:
        return self.counts.tolist()


def uar(cm: ConfusionMatrix) -> float:
    """Mean of per-class recalls, as a percentage.

    Classes with zero true samples are excluded from the average (a 0/0
    recall would poison the metric); the exclusion is logged.
    """
    row_sums = cm.counts.sum(axis=1)
    present = row_sums > 0
    if not present.any():
        raise DataError("confusion matrix has no populated rows")
    if not present.all():
        log.info("uar: excluding %d empty class rows", int((~present).sum()))
    recalls = cm.counts.diagonal()[present] / row_sums[present]
    return float(recalls.mean() * 100.0)
