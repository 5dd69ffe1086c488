import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusenet.errors import EvaluationError, UsageError
from fusenet.metrics import (
    CSV_HEADER,
    ConfusionMatrix,
    auc,
    compute_metrics,
    confusion,
    evaluate_predictions,
    percent,
    roc_auc,
    roc_curve,
)
from fusenet.rng import Rng


def mann_whitney(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- confusion


def test_confusion_examples():
    assert confusion([1, 1, 0], [1, 1, 0]) == ConfusionMatrix(tp=2, fp=0, fn=0, tn=1)
    assert confusion([1, 1], [1, 0]) == ConfusionMatrix(tp=1, fp=1, fn=0, tn=0)


def test_confusion_matches_recount():
    r = Rng(0)
    for _ in range(20):
        p, y = r.integers(2, 100), r.integers(2, 100)
        cm = confusion(p, y)
        pairs = list(zip(p.tolist(), y.tolist()))
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == tuple(pairs.count(k) for k in [(1, 1), (1, 0), (0, 1), (0, 0)])
        assert cm.total == 100


def test_confusion_errors():
    with pytest.raises(UsageError):
        confusion([1, 0], [1])
    with pytest.raises(UsageError):
        confusion([], [])
    with pytest.raises(UsageError, match="index 1"):
        confusion([0, 2], [0, 1])


# ---------------------------------------------------------------- metrics


def test_table1_proposed_row():
    pct = compute_metrics(ConfusionMatrix(83, 4, 2, 97)).percentages()
    assert pct["accuracy"] == 96.774
    assert pct["precision"] == 95.402
    assert pct["recall"] == 97.647
    assert pct["specificity"] == 96.040
    assert pct["balanced_accuracy"] == 96.843
    assert pct["f_measure"] == pytest.approx(96.511, abs=0.0015)
    assert pct["g_mean"] == 96.840


def test_hand_computed_matrix():
    m = compute_metrics(ConfusionMatrix(50, 5, 5, 40))
    assert m.accuracy == pytest.approx(0.900, abs=1e-4)
    assert m.precision == pytest.approx(0.9091, abs=1e-4)
    assert m.recall == pytest.approx(0.9091, abs=1e-4)
    assert m.specificity == pytest.approx(0.8889, abs=1e-4)
    assert m.balanced_accuracy == pytest.approx(0.8990, abs=1e-4)
    assert m.g_mean == pytest.approx(0.8989, abs=1e-4)


@given(st.integers(1, 500), st.integers(1, 500))
def test_perfect_classifier(n, m):
    rep = compute_metrics(ConfusionMatrix(n, 0, 0, m))
    assert all(getattr(rep, k) == 1.0 for k in ("accuracy", "balanced_accuracy", "precision", "recall",
                                                 "specificity", "f_measure", "g_mean"))


cms = st.builds(ConfusionMatrix, st.integers(0, 300), st.integers(0, 300), st.integers(0, 300),
                st.integers(0, 300)).filter(lambda c: c.positives and c.negatives)


@given(cms)
def test_metric_invariants(cm):
    m = compute_metrics(cm)
    r, s = Fraction(cm.tp, cm.positives), Fraction(cm.tn, cm.negatives)
    assert m.balanced_accuracy == float((r + s) / 2)
    assert abs(m.balanced_accuracy - (m.recall + m.specificity) / 2) <= 2 ** -52
    assert abs(m.g_mean**2 - m.recall * m.specificity) < 1e-12
    assert min(m.recall, m.specificity) <= m.balanced_accuracy <= max(m.recall, m.specificity)
    if m.precision and m.recall:
        assert min(m.precision, m.recall) - 1e-15 <= m.f_measure <= max(m.precision, m.recall) + 1e-15
    for k in ("accuracy", "balanced_accuracy", "precision", "recall", "specificity", "f_measure", "g_mean"):
        assert 0.0 <= getattr(m, k) <= 1.0


@given(cms, st.integers(1, 9))
def test_scale_free(cm, k):
    scaled = ConfusionMatrix(cm.tp * k, cm.fp * k, cm.fn * k, cm.tn * k)
    assert compute_metrics(cm) == compute_metrics(scaled)


def test_zero_denominator_conventions():
    m = compute_metrics(ConfusionMatrix(0, 0, 3, 2))
    assert m.precision == 0.0 and m.f_measure == 0.0
    with pytest.raises(EvaluationError):
        compute_metrics(ConfusionMatrix(0, 2, 0, 3))
    with pytest.raises(EvaluationError):
        compute_metrics(ConfusionMatrix(3, 0, 2, 0))


def test_percent_rounds_half_away_from_zero():
    assert percent(0.123455) == 12.346
    assert percent(0.5) == 50.0
    assert percent(30 / 31) == 96.774


# ---------------------------------------------------------------- roc / auc


def test_roc_example():
    curve = roc_curve([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    assert curve.points == [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 1), (1, 1)]
    assert auc(curve) == 0.75


def test_roc_perfect_and_constant():
    perfect = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert (0.0, 1.0) in perfect.points and auc(perfect) == 1.0
    const = roc_curve([0.5] * 4, [1, 0, 1, 0])
    assert const.points == [(0, 0), (1, 1)] and auc(const) == 0.5


def test_roc_single_class_error():
    with pytest.raises(EvaluationError):
        roc_curve([0.1, 0.2], [1, 1])


def test_auc_matches_mann_whitney_with_ties():
    r = Rng(1)
    for _ in range(300):
        n = 2 + int(r.integers(49))
        y = r.integers(2, n)
        y[0], y[1] = 0, 1
        s = np.round(r.random(n) * 5) / 5  # coarse grid forces ties
        assert abs(roc_auc(s, y) - mann_whitney(s, y)) < 1e-12


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=60))
def test_hard_score_auc_equals_ba(pairs):
    preds = [p for p, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        return
    cm, rep = evaluate_predictions(preds, labels)
    assert rep.auc == rep.balanced_accuracy


@given(st.lists(st.floats(0, 1), min_size=4, max_size=40), st.randoms())
def test_roc_monotone(scores, rnd):
    labels = [i % 2 for i in range(len(scores))]
    rnd.shuffle(labels)
    curve = roc_curve(scores, labels)
    assert curve.points[0] == (0, 0) and curve.points[-1] == (1, 1)
    assert all(a <= b for a, b in zip(curve.fpr, curve.fpr[1:]))
    assert all(a <= b for a, b in zip(curve.tpr, curve.tpr[1:]))


# ---------------------------------------------------------------- serialization


def test_report_csv_and_json():
    rep = compute_metrics(ConfusionMatrix(83, 4, 2, 97)).with_auc(0.96843)
    lines = rep.to_csv("Proposed").splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert lines[1] == "Proposed,96.774,96.843,95.402,97.647,96.040,96.512,96.840,96.843"
    body = json.loads(rep.to_json("Proposed"))
    assert body["percent"]["accuracy"] == 96.774
    assert math.isclose(body["fractions"]["accuracy"], 30 / 31)


def test_report_without_auc_leaves_cell_empty():
    row = compute_metrics(ConfusionMatrix(1, 1, 1, 1)).csv_row("m")
    assert row[-1] == ""
