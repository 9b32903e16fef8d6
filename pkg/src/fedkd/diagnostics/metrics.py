"""Confusion counts and the accuracy / TPR / FPR triple.

Undefined rates (zero denominator) are ``None``, which the CSV writer emits as
an empty field; NaN never leaves this module.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

UNDEFINED = None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(y_true, y_pred, positive=1):
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    return ConfusionCounts(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p)))


def _ratio(num, den):
    return num / den if den > 0 else UNDEFINED


def compute_metrics(c):
    """``{"accuracy", "tpr", "fpr"}`` from confusion counts."""
    if c.total <= 0:
        raise ValueError("no samples evaluated")
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "tpr": _ratio(c.tp, c.tp + c.fn),
        "fpr": _ratio(c.fp, c.fp + c.tn),
    }


@dataclass
class MetricsRecord:
    round: int
    accuracy: float | None
    tpr: float | None
    fpr: float | None
    objective: float | None
    participants: int
    wall_time: float = 0.0

    @classmethod
    def from_counts(cls, t, counts, objective, participants, wall_time=0.0):
        m = compute_metrics(counts)
        return cls(t, m["accuracy"], m["tpr"], m["fpr"], objective, participants, wall_time)

    def as_dict(self, with_time=False):
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d
