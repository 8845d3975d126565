"""Average precision and mAP for multi-label rankings.

``average_precision`` is the production implementation (stable sort by
descending score); ``ap_oracle`` recomputes the same quantity by brute-force
rank counting and shares no code with it, so the two can cross-check each
other in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UndefinedAveragePrecision",
    "RankedPredictions",
    "MetricsReport",
    "average_precision",
    "ap_oracle",
    "mean_average_precision",
]


class UndefinedAveragePrecision(ValueError):
    """AP is undefined when a class has no positive labels."""


@dataclass
class RankedPredictions:
    """Scores and binary relevance labels aligned by index."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError(f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length 1-D")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")


@dataclass
class MetricsReport:
    """Per-class AP (None where undefined), their mean, and bookkeeping."""

    per_class_ap: dict
    map: float
    n_samples: int
    excluded_classes: list = field(default_factory=list)


def average_precision(preds: RankedPredictions) -> float:
    """Non-interpolated AP; ties keep input order (stable descending sort)."""
    labels = preds.labels
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedAveragePrecision("no positive labels; AP undefined")
    order = np.argsort(-preds.scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precisions = hits[ranked == 1] / ranks[ranked == 1]
    return float(precisions.sum() / n_pos)


def ap_oracle(preds: RankedPredictions) -> float:
    """Deliberately naive O(n^2) AP by counting, for cross-checking.

    An item's rank is the number of items strictly ahead of it (higher score,
    or equal score and earlier input position) plus one — the same tie policy
    as :func:`average_precision`, derived without sorting.
    """
    scores = preds.scores
    labels = preds.labels
    n = len(scores)
    positives = [i for i in range(n) if labels[i] == 1]
    if not positives:
        raise UndefinedAveragePrecision("no positive labels; AP undefined")

    def rank_of(i):
        ahead = 0
        for j in range(n):
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                ahead += 1
        return ahead + 1

    total = 0.0
    for i in positives:
        r_i = rank_of(i)
        tp = 0
        for j in positives:
            if rank_of(j) <= r_i:
                tp += 1
        total += tp / r_i
    return total / len(positives)


def mean_average_precision(class_preds) -> MetricsReport:
    """Unweighted mean AP over classes that have at least one positive.

    ``class_preds`` maps class index -> :class:`RankedPredictions`. Classes
    with no positives are excluded from the mean and listed in the report.
    """
    per_class = {}
    excluded = []
    n_samples = 0
    for cls in sorted(class_preds):
        preds = class_preds[cls]
        n_samples = max(n_samples, len(preds.scores))
        try:
            per_class[cls] = average_precision(preds)
        except UndefinedAveragePrecision:
            per_class[cls] = None
            excluded.append(cls)
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        raise UndefinedAveragePrecision("every class has zero positives; mAP undefined")
    return MetricsReport(
        per_class_ap=per_class,
        map=float(np.mean(defined)),
        n_samples=n_samples,
        excluded_classes=excluded,
    )
