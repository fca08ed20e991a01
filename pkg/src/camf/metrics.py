"""Binary classification metrics with SZ (label 1) as the positive class.

Zero-denominator conventions: F1 is 0 when 2TP + FP + FN = 0, MCC is 0 when any
marginal sum is 0. ``degenerate`` reports which of those fired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from camf.errors import CAMFError


class MetricError(CAMFError, ValueError):
    exit_code = 3


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise MetricError(f"{name} must be a nonnegative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts with the positive and negative class exchanged."""
        return ConfusionCounts(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    preds, labs = [int(p) for p in predictions], [int(y) for y in labels]
    if len(preds) != len(labs):
        raise MetricError(f"{len(preds)} predictions vs {len(labs)} labels")
    if not preds:
        raise MetricError("no predictions to score")
    if not set(preds) | set(labs) <= {0, 1}:
        raise MetricError("predictions and labels must be 0/1")
    tp = sum(p == 1 and y == 1 for p, y in zip(preds, labs))
    fp = sum(p == 1 and y == 0 for p, y in zip(preds, labs))
    tn = sum(p == 0 and y == 0 for p, y in zip(preds, labs))
    fn = sum(p == 0 and y == 1 for p, y in zip(preds, labs))
    return ConfusionCounts(tp, fp, tn, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise MetricError("accuracy of an empty confusion table")
    return (c.tp + c.tn) / c.total


def f1(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 0.0 if den == 0 else 2 * c.tp / den


def mcc(c: ConfusionCounts) -> float:
    # python ints are unbounded, so the products cannot overflow
    num = c.tp * c.tn - c.fp * c.fn
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


def degenerate(c: ConfusionCounts) -> list[str]:
    flags = []
    if 2 * c.tp + c.fp + c.fn == 0:
        flags.append("f1")
    if (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn) == 0:
        flags.append("mcc")
    return flags


def score(predictions, labels) -> dict:
    c = confusion(predictions, labels)
    return {"f1": f1(c), "acc": accuracy(c), "mcc": mcc(c)}
