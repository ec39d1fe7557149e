"""Confusion counts, per-class precision/recall/F1 and macro F1.

The positive class is covid (label 1). ``recall_pos``/``precision_pos``
correspond to the single Recall and Precision columns of the ablation table;
macro F1 averages the F1 of both classes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

REPORT_KEYS = (
    "recall_pos", "precision_pos", "f1_pos",
    "recall_neg", "precision_neg", "f1_neg",
    "macro_f1", "threshold", "tp", "fp", "fn", "tn",
)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "Confusion":
        """Counts after relabeling 0 <-> 1."""
        return Confusion(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def confusion(probs, labels, threshold: float = 0.5) -> Confusion:
    """Counts with the rule: predict positive iff ``prob >= threshold``."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pred = p >= threshold
    pos = y == 1
    return Confusion(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _class_scores(tp, fp, fn, name):
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if tp + fp == 0 and tp + fn == 0:
        warnings.warn(f"class {name!r} has no predicted and no actual instances; its F1 is set to 0", stacklevel=3)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class MetricsReport:
    recall_pos: float
    precision_pos: float
    f1_pos: float
    recall_neg: float
    precision_neg: float
    f1_neg: float
    macro_f1: float
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_text(self) -> str:
        lines = []
        for key, val in self.to_dict().items():
            lines.append(f"{key}: {val:.6f}" if isinstance(val, float) else f"{key}: {val}")
        return "\n".join(lines)


def metrics_report(c: Confusion, threshold: float = 0.5) -> MetricsReport:
    p_pos, r_pos, f_pos = _class_scores(c.tp, c.fp, c.fn, "positive")
    p_neg, r_neg, f_neg = _class_scores(c.tn, c.fn, c.fp, "negative")
    return MetricsReport(
        recall_pos=r_pos, precision_pos=p_pos, f1_pos=f_pos,
        recall_neg=r_neg, precision_neg=p_neg, f1_neg=f_neg,
        macro_f1=(f_pos + f_neg) / 2, threshold=threshold,
        tp=c.tp, fp=c.fp, fn=c.fn, tn=c.tn,
    )


def macro_f1(c: Confusion) -> float:
    return metrics_report(c).macro_f1


def evaluate(probs, labels, threshold: float = 0.5) -> MetricsReport:
    return metrics_report(confusion(probs, labels, threshold), threshold)
