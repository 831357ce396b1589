"""
Tests for services/metrics.py
"""

import math

import numpy as np
import pytest

from services.errors import EmptySequenceError, NonFiniteError, ShapeMismatchError, SpecError
from services.metrics import (
    BINARY_CLASSES, NEGATIVE, POSITIVE, SEVEN_CLASSES, ConfusionMatrix, EvaluationReport, confusion,
    evaluate_scores, prf1, score_to_7class, score_to_binary,
)


@pytest.mark.parametrize('score,expected', [(2.3, POSITIVE), (-0.01, NEGATIVE), (0.0, POSITIVE), (-3.0, NEGATIVE)])
def test_binary_discretization(score, expected):
    assert score_to_binary(score) == expected


@pytest.mark.parametrize('score,expected', [
    (2.6, 3), (-3.4, -3), (0.5, 1), (-0.5, -1), (1.49, 1), (-2.5, -3), (17.0, 3), (0.0, 0),
])
def test_seven_class_discretization(score, expected):
    assert score_to_7class(score) == expected


@pytest.mark.parametrize('score,expected', [
    (0.49999999999999994, 0), (-0.49999999999999994, 0), (2.4999999999999996, 2), (1.5, 2), (-1.5, -2),
])
def test_seven_class_just_below_half_rounds_down(score, expected):
    assert score_to_7class(score) == expected


def test_seven_class_is_idempotent_on_classes():
    for c in SEVEN_CLASSES:
        assert score_to_7class(score_to_7class(float(c))) == c


@pytest.mark.parametrize('convert', [score_to_binary, score_to_7class])
def test_non_finite_scores_are_rejected(convert):
    with pytest.raises(NonFiniteError):
        convert(math.nan)
    with pytest.raises(NonFiniteError):
        convert(math.inf)


def test_identity_predictions_give_diagonal():
    labels = [-3, 0, 0, 2, 3]
    matrix = confusion(labels, labels, SEVEN_CLASSES)
    assert np.array_equal(matrix.counts, np.diag(np.diag(matrix.counts)))
    assert matrix.total == 5


def test_each_binary_cell_once():
    matrix = confusion([1, 1, 0, 0], [1, 0, 1, 0])
    assert np.array_equal(matrix.counts, np.ones((2, 2)))


def test_marginals_conserve_counts():
    rng = np.random.default_rng(0)
    preds, actuals = rng.integers(-3, 4, 50).tolist(), rng.integers(-3, 4, 50).tolist()
    matrix = confusion(preds, actuals, SEVEN_CLASSES)
    assert matrix.total == 50
    assert matrix.predicted_totals().sum() == matrix.actual_totals().sum() == 50
    assert matrix.predicted_totals()[SEVEN_CLASSES.index(0)] == preds.count(0)


def test_confusion_errors():
    with pytest.raises(ShapeMismatchError):
        confusion([1], [1, 0])
    with pytest.raises(EmptySequenceError):
        confusion([], [])
    with pytest.raises(SpecError):
        confusion([2], [1])


def test_hand_counted_binary_scores():
    # positive class: tp=3, fp=1, fn=2; negative class: tp=4
    matrix = ConfusionMatrix(BINARY_CLASSES, np.array([[4, 2], [1, 3]]))
    scores = prf1(matrix)
    positive = scores.per_class[1]
    assert positive.precision == pytest.approx(0.75)
    assert positive.recall == pytest.approx(0.6)
    assert positive.f1 == pytest.approx(2 * 0.45 / 1.35)
    assert positive.support == 5
    negative = scores.per_class[0]
    assert negative.precision == pytest.approx(4 / 6)
    assert negative.recall == pytest.approx(0.8)
    assert scores.precision == pytest.approx((5 * 4 / 6 + 5 * 0.75) / 10)
    assert scores.macro['recall'] == pytest.approx((0.8 + 0.6) / 2)


def test_perfect_predictions_score_one():
    labels = [0, 1, 1, 0, 1]
    scores = prf1(confusion(labels, labels))
    for row in scores.per_class:
        assert (row.precision, row.recall, row.f1) == (1.0, 1.0, 1.0)


def test_class_never_predicted_has_zero_precision():
    scores = prf1(confusion([1, 1, 1], [0, 1, 0]))
    assert scores.per_class[0].precision == 0.0
    assert scores.per_class[0].f1 == 0.0


def test_empty_matrix_is_rejected():
    with pytest.raises(EmptySequenceError):
        prf1(ConfusionMatrix(BINARY_CLASSES, np.zeros((2, 2), dtype=np.int64)))


def naive_prf1(counts):
    k = counts.shape[0]
    rows = []
    for c in range(k):
        tp = counts[c][c]
        fp = sum(counts[c][j] for j in range(k) if j != c)
        fn = sum(counts[i][c] for i in range(k) if i != c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        rows.append((p, r, f, tp + fn))
    return rows


def random_counts(rng):
    k = len(SEVEN_CLASSES) if rng.random() < 0.5 else len(BINARY_CLASSES)
    counts = rng.integers(0, 6, size=(k, k))
    # a class that is never predicted or never present
    if rng.random() < 0.3:
        counts[rng.integers(k), :] = 0
    if rng.random() < 0.3:
        counts[:, rng.integers(k)] = 0
    if counts.sum() == 0:
        counts[0, 0] = 1
    return counts


def test_matches_naive_implementation():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        counts = random_counts(rng)
        classes = SEVEN_CLASSES if counts.shape[0] == len(SEVEN_CLASSES) else BINARY_CLASSES
        matrix = ConfusionMatrix(classes, counts)
        assert matrix.predicted_totals().sum() == matrix.actual_totals().sum() == matrix.total
        scores = prf1(matrix)
        for row, (p, r, f, support) in zip(scores.per_class, naive_prf1(counts)):
            assert (row.precision, row.recall, row.f1, row.support) == (p, r, f, support)
            if row.precision > 0 and row.recall > 0:
                assert min(p, r) - 1e-12 <= row.f1 <= max(p, r) + 1e-12
            else:
                assert row.f1 == 0.0
        assert sum(row.support for row in scores.per_class) == counts.sum()


def test_evaluate_scores():
    report = evaluate_scores([2.4, -0.2, 0.0, -2.6], [3.0, -1.0, 0.4, 1.0])
    assert report.mae == pytest.approx((0.6 + 0.8 + 0.4 + 3.6) / 4)
    assert report.segments == 4
    assert report.binary.matrix.total == 4
    assert report.binary.matrix.counts.tolist() == [[1, 1], [0, 2]]
    assert report.seven_class.matrix.total == 4
    assert any('tie' in note for note in report.notes)
    for regime in (report.binary, report.seven_class):
        for value in list(regime.scores.weighted.values()) + list(regime.scores.macro.values()):
            assert 0.0 <= value <= 1.0


def test_report_dict_round_trip():
    report = evaluate_scores([1.0, -1.0, 2.2], [0.5, -0.5, -2.0])
    data = report.to_dict()
    again = EvaluationReport.from_dict(data)
    assert again.to_dict() == data


def test_evaluate_scores_errors():
    with pytest.raises(ShapeMismatchError):
        evaluate_scores([1.0], [])
    with pytest.raises(EmptySequenceError):
        evaluate_scores([], [])
    with pytest.raises(NonFiniteError):
        evaluate_scores([math.nan], [0.0])
