"""Confusion matrix, the eight evaluation criteria, ROC curve and AUC.

Ratios are evaluated in exact rational arithmetic on the integer counts and
rounded to float once. That makes ``auc`` of hard 0/1 scores bit-identical
to ``balanced_accuracy`` (both are the same rational number), which plain
float evaluation of ``(tp/P + tn/N) / 2`` cannot guarantee.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import EvaluationError, UsageError

# Table-style header, in report column order
CSV_HEADER = ["Model", "Accuracy", "BA", "Precision", "Recall", "Specificity", "F-measure", "G_mean", "AUC"]
_FIELD_ORDER = [
    "accuracy",
    "balanced_accuracy",
    "precision",
    "recall",
    "specificity",
    "f_measure",
    "g_mean",
    "auc",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise UsageError(f"confusion count {name}={value!r} must be a non-negative integer")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricsReport:
    """Metrics as fractions in [0, 1]; ``auc`` is None until scores are supplied."""

    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    specificity: float
    f_measure: float
    g_mean: float
    auc: Optional[float] = None

    def with_auc(self, value: float) -> "MetricsReport":
        d = asdict(self)
        d["auc"] = float(value)
        return MetricsReport(**d)

    def percentages(self) -> dict:
        """Each metric as a percentage rounded half away from zero to 3 decimals."""
        return {name: None if getattr(self, name) is None else percent(getattr(self, name)) for name in _FIELD_ORDER}

    def to_json(self, model: str = "model") -> str:
        body = {"model": model, "fractions": asdict(self), "percent": self.percentages()}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def csv_row(self, model: str = "model") -> list:
        pct = self.percentages()
        return [model] + ["" if pct[k] is None else format(pct[k], ".3f") for k in _FIELD_ORDER]

    def to_csv(self, model: str = "model") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerow(self.csv_row(model))
        return buf.getvalue()


def percent(fraction: float, places: int = 3) -> float:
    """100 * fraction rounded half away from zero (decimal, not binary, halves)."""
    q = Decimal(1).scaleb(-places)
    d = (Decimal(repr(float(fraction))) * 100).quantize(q, rounding=ROUND_HALF_UP)
    return float(d)


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or pred.ndim != 1:
        raise UsageError(f"predictions ({pred.shape}) and labels ({lab.shape}) must be 1-d and equally long")
    if pred.size == 0:
        raise UsageError("confusion matrix of an empty set is undefined")
    for name, arr in (("prediction", pred), ("label", lab)):
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise UsageError(f"{name} at index {int(bad[0])} is {arr[bad[0]]!r}, expected 0 or 1")
    p, y = pred == 1, lab == 1
    return ConfusionMatrix(
        tp=int(np.sum(p & y)), fp=int(np.sum(p & ~y)), fn=int(np.sum(~p & y)), tn=int(np.sum(~p & ~y))
    )


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, BA, precision, recall, specificity, F-measure and G-mean.

    Precision with no predicted positives is 0 (F-measure then 0 too).
    Recall or specificity on a set lacking that class raises
    :class:`EvaluationError`.
    """
    if cm.positives == 0 or cm.negatives == 0:
        missing = "positive" if cm.positives == 0 else "negative"
        raise EvaluationError(f"no {missing} samples: recall/specificity undefined for {cm}")
    accuracy = Fraction(cm.tp + cm.tn, cm.total)
    recall = Fraction(cm.tp, cm.positives)
    specificity = Fraction(cm.tn, cm.negatives)
    precision = Fraction(cm.tp, cm.tp + cm.fp) if cm.tp + cm.fp else Fraction(0)
    f_measure = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return MetricsReport(
        accuracy=float(accuracy),
        balanced_accuracy=float((recall + specificity) / 2),
        precision=float(precision),
        recall=float(recall),
        specificity=float(specificity),
        f_measure=float(f_measure),
        g_mean=_sqrt_fraction(recall * specificity),
    )


def _sqrt_fraction(x: Fraction) -> float:
    # correctly rounded enough for 1e-12 checks; math.sqrt of a rounded ratio
    return math.sqrt(x.numerator / x.denominator)


@dataclass(frozen=True)
class RocCurve:
    """Points (fpr, tpr) from (0, 0) to (1, 1) plus the integer counts behind them."""

    fpr: Tuple[float, ...]
    tpr: Tuple[float, ...]
    false_positives: Tuple[int, ...]
    true_positives: Tuple[int, ...]
    negatives: int
    positives: int

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for x, y in self.points:
            writer.writerow([repr(x), repr(y)])
        return buf.getvalue()


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep over distinct scores, highest first; ties move as one block."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise UsageError(f"scores ({s.shape}) and labels ({y.shape}) must be 1-d and equally long")
    if np.any((y != 0) & (y != 1)):
        raise UsageError("labels must be 0 or 1")
    pos = int(np.sum(y == 1))
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        raise EvaluationError("ROC/AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp_cum = np.cumsum(y == 1)
    fp_cum = np.cumsum(y == 0)
    # last index of every block of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tps = [0] + tp_cum[ends].tolist()
    fps = [0] + fp_cum[ends].tolist()
    return RocCurve(
        fpr=tuple(f / neg for f in fps),
        tpr=tuple(t / pos for t in tps),
        false_positives=tuple(int(f) for f in fps),
        true_positives=tuple(int(t) for t in tps),
        negatives=neg,
        positives=pos,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve, summed exactly on the counts."""
    fp, tp = curve.false_positives, curve.true_positives
    twice_area = sum((fp[k] - fp[k - 1]) * (tp[k] + tp[k - 1]) for k in range(1, len(fp)))
    return float(Fraction(twice_area, 2 * curve.positives * curve.negatives))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    return auc(roc_curve(scores, labels))


def evaluate_predictions(
    predictions: Sequence[int], labels: Sequence[int], scores: Optional[Sequence[float]] = None
) -> Tuple[ConfusionMatrix, MetricsReport]:
    """Confusion matrix and full report; AUC from ``scores`` (hard predictions if omitted)."""
    cm = confusion(predictions, labels)
    report = compute_metrics(cm)
    return cm, report.with_auc(roc_auc(predictions if scores is None else scores, labels))


def report_fields() -> list:
    return [f.name for f in fields(MetricsReport)]
