"""Segmentation agreement metrics: per-class DICE, IoU and a mAP summary.

All metrics treat masks as multi-class label grids and compare one class at
a time.  The empty-vs-empty convention is perfect agreement (score 1.0) so
that frames without a structure do not drag down averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataset, ShapeMismatch

# IoU acceptance thresholds for mAP: 0.50 to 0.95 in steps of 0.05.
MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixelwise agreement counts for a single class."""

    true_positive: int
    false_positive: int
    false_negative: int


def confusion(predicted: np.ndarray, truth: np.ndarray, label: int) -> ConfusionCounts:
    """Count tp/fp/fn pixels for one label over same-shaped masks."""
    pred = np.asarray(predicted)
    true = np.asarray(truth)
    if pred.shape != true.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {true.shape}")
    p = pred == label
    t = true == label
    return ConfusionCounts(
        true_positive=int(np.count_nonzero(p & t)),
        false_positive=int(np.count_nonzero(p & ~t)),
        false_negative=int(np.count_nonzero(~p & t)),
    )


def _overlap_counts(predicted: np.ndarray, truth: np.ndarray, label: int):
    c = confusion(predicted, truth, label)
    return c.true_positive, c.false_positive, c.false_negative


def dice(predicted: np.ndarray, truth: np.ndarray, label: int) -> float:
    """DICE coefficient for one label: 2*tp / (2*tp + fp + fn)."""
    tp, fp, fn = _overlap_counts(predicted, truth, label)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


def iou(predicted: np.ndarray, truth: np.ndarray, label: int) -> float:
    """Intersection over union for one label: tp / (tp + fp + fn)."""
    tp, fp, fn = _overlap_counts(predicted, truth, label)
    denom = tp + fp + fn
    if denom == 0:
        return 1.0
    return tp / denom


@dataclass
class MapBreakdown:
    """mAP plus the per-class, per-threshold acceptance fractions."""

    map_score: float
    per_class: dict[int, float]
    fractions: dict[int, dict[float, float]] = field(default_factory=dict)
    counted_images: dict[int, int] = field(default_factory=dict)


def mean_average_precision(pairs, labels=(1, 2)) -> MapBreakdown:
    """mAP over (predicted, truth) mask pairs.

    For each class and IoU threshold in MAP_THRESHOLDS, score the fraction
    of images whose IoU meets the threshold; average over thresholds, then
    over classes.  Images where the class is absent from both masks are
    skipped for that class; a class absent everywhere is excluded from the
    class mean.  If every class is vacuous the score is 1.0 by the
    empty-agreement convention.
    """
    pair_list = list(pairs)
    if not pair_list:
        raise EmptyDataset("no mask pairs to score")
    ious: dict[int, list[float]] = {label: [] for label in labels}
    for predicted, truth in pair_list:
        for label in labels:
            tp, fp, fn = _overlap_counts(predicted, truth, label)
            if tp + fp + fn == 0:
                continue
            ious[label].append(tp / (tp + fp + fn))
    per_class: dict[int, float] = {}
    fractions: dict[int, dict[float, float]] = {}
    counted: dict[int, int] = {}
    for label in labels:
        scores = ious[label]
        counted[label] = len(scores)
        if not scores:
            continue
        row = {}
        for threshold in MAP_THRESHOLDS:
            row[threshold] = sum(1 for s in scores if s >= threshold) / len(scores)
        fractions[label] = row
        per_class[label] = sum(row.values()) / len(row)
    if not per_class:
        return MapBreakdown(map_score=1.0, per_class={}, fractions={},
                            counted_images=counted)
    map_score = sum(per_class.values()) / len(per_class)
    return MapBreakdown(map_score=map_score, per_class=per_class,
                        fractions=fractions, counted_images=counted)
