"""Classification metrics and inter-rater agreement.

The negative-sentiment class is the positive class throughout: tp counts
messages that are negative and predicted negative.  Metrics with a zero
denominator are reported as None (undefined), never coerced to 0.
"""

from dataclasses import dataclass

import numpy as np

from .corpus import SentimentLabel
from .errors import InputError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InputError("confusion counts must be non-negative")
        if self.total == 0:
            raise InputError("confusion matrix must have at least one case")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self):
        """The same table with the positive-class convention flipped."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _as_binary(labels, name):
    out = []
    for value in labels:
        if isinstance(value, SentimentLabel):
            out.append(value.to_binary())
        elif value in (0, 1):
            out.append(int(value))
        else:
            raise InputError(f"{name}: labels must be SentimentLabel or 0/1, got {value!r}")
    return np.asarray(out, dtype=np.int64)


def confusion(gold, pred):
    """Confusion counts with negative sentiment as the positive class."""
    gold = _as_binary(gold, "gold")
    pred = _as_binary(pred, "pred")
    if gold.size != pred.size:
        raise InputError("gold and pred must have equal length")
    if gold.size == 0:
        raise InputError("confusion needs at least one case")
    gold_neg = gold == 0
    pred_neg = pred == 0
    return ConfusionMatrix(
        tp=int(np.sum(gold_neg & pred_neg)),
        fp=int(np.sum(~gold_neg & pred_neg)),
        fn=int(np.sum(gold_neg & ~pred_neg)),
        tn=int(np.sum(~gold_neg & ~pred_neg)),
    )


@dataclass(frozen=True)
class MetricSuite:
    car: float
    f1: float | None
    precision: float | None
    recall: float | None
    specificity: float | None

    def as_dict(self):
        return {"car": self.car, "f1": self.f1, "precision": self.precision,
                "recall": self.recall, "specificity": self.specificity}


def _ratio(num, den):
    return num / den if den > 0 else None


def metric_suite(cm):
    """Accuracy rate, F1, precision, recall, specificity for one table."""
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    specificity = _ratio(cm.tn, cm.tn + cm.fp)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricSuite(
        car=(cm.tp + cm.tn) / cm.total,
        f1=f1, precision=precision, recall=recall, specificity=specificity,
    )


@dataclass(frozen=True)
class AgreementResult:
    p_observed: float
    kappa: float | None


def agreement_and_kappa(rater_a, rater_b):
    """Observed agreement and Cohen's kappa for two aligned label vectors."""
    a = _as_binary(rater_a, "rater_a")
    b = _as_binary(rater_b, "rater_b")
    if a.size != b.size:
        raise InputError("rater vectors must have equal length")
    if a.size == 0:
        raise InputError("agreement needs at least one case")
    p_o = float(np.mean(a == b))
    p_e = 0.0
    for cls in (0, 1):
        p_e += float(np.mean(a == cls)) * float(np.mean(b == cls))
    if abs(1.0 - p_e) < 1e-15:
        return AgreementResult(p_o, None)  # degenerate marginals
    return AgreementResult(p_o, (p_o - p_e) / (1.0 - p_e))
