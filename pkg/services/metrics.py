#!/usr/bin/env python3
"""
mmtranslate/services/metrics.py
Score discretization plus precision/recall/F1 in the binary and 7-class regimes
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from services.errors import EmptySequenceError, NonFiniteError, ShapeMismatchError, SpecError

NEGATIVE = 0
POSITIVE = 1
BINARY_CLASSES = (NEGATIVE, POSITIVE)
SEVEN_CLASSES = tuple(range(-3, 4))

BINARY_TIE_RULE = "score 0.0 counts as positive"


def _finite(score: float, what: str) -> float:
    score = float(score)
    if not math.isfinite(score):
        raise NonFiniteError(what, f"score {score}")
    return score


def score_to_binary(score: float) -> int:
    """1 (positive) iff score >= 0"""
    return POSITIVE if _finite(score, 'score_to_binary') >= 0.0 else NEGATIVE


def score_to_7class(score: float) -> int:
    """Nearest integer with halves rounded away from zero, clamped to [-3, 3]"""
    score = _finite(score, 'score_to_7class')
    magnitude = abs(score)
    whole = math.floor(magnitude)
    # magnitude - whole is exact, unlike magnitude + 0.5
    if magnitude - whole >= 0.5:
        whole += 1
    rounded = int(math.copysign(whole, score))
    return max(-3, min(3, rounded))


@dataclass
class ConfusionMatrix:
    """counts[i][j]: segments predicted as classes[i] whose actual class is classes[j]"""
    classes: Tuple[int, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def actual_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {'classes': list(self.classes), 'counts': self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ConfusionMatrix':
        return cls(tuple(data['classes']), np.array(data['counts'], dtype=np.int64))


def confusion(preds: Sequence[int], actuals: Sequence[int],
              classes: Sequence[int] = BINARY_CLASSES) -> ConfusionMatrix:
    if len(preds) != len(actuals):
        raise ShapeMismatchError('confusion', [(len(preds),), (len(actuals),)])
    if not preds:
        raise EmptySequenceError('prediction list')
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, a in zip(preds, actuals):
        if p not in index or a not in index:
            raise SpecError(f"label pair ({p}, {a}) outside class set {tuple(classes)}")
        counts[index[p], index[a]] += 1
    return ConfusionMatrix(tuple(classes), counts)


@dataclass
class ClassScores:
    label: int
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> Dict[str, Any]:
        return {'label': self.label, 'precision': self.precision, 'recall': self.recall,
                'f1': self.f1, 'support': self.support}


@dataclass
class PRF1:
    """Per-class rows plus support-weighted and unweighted macro averages"""
    per_class: List[ClassScores]
    weighted: Dict[str, float]
    macro: Dict[str, float]

    @property
    def precision(self) -> float:
        return self.weighted['precision']

    @property
    def recall(self) -> float:
        return self.weighted['recall']

    @property
    def f1(self) -> float:
        return self.weighted['f1']

    def to_dict(self) -> Dict[str, Any]:
        return {'per_class': [row.to_dict() for row in self.per_class],
                'weighted': dict(self.weighted), 'macro': dict(self.macro)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'PRF1':
        return cls([ClassScores(**row) for row in data['per_class']],
                   dict(data['weighted']), dict(data['macro']))


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def prf1(matrix: ConfusionMatrix) -> PRF1:
    """Zero denominators give 0 rather than undefined"""
    counts = matrix.counts
    if counts.size == 0 or matrix.total == 0:
        raise EmptySequenceError('confusion matrix')
    rows = []
    for i, label in enumerate(matrix.classes):
        tp = int(counts[i, i])
        fp = int(counts[i, :].sum()) - tp
        fn = int(counts[:, i].sum()) - tp
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        rows.append(ClassScores(label, p, r, _ratio(2 * p * r, p + r), tp + fn))

    n = matrix.total
    weighted = {key: sum(getattr(row, key) * row.support for row in rows) / n
                for key in ('precision', 'recall', 'f1')}
    macro = {key: sum(getattr(row, key) for row in rows) / len(rows)
             for key in ('precision', 'recall', 'f1')}
    return PRF1(rows, weighted, macro)


@dataclass
class RegimeReport:
    matrix: ConfusionMatrix
    scores: PRF1

    def to_dict(self) -> Dict[str, Any]:
        data = self.scores.to_dict()
        data['confusion'] = self.matrix.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RegimeReport':
        return cls(ConfusionMatrix.from_dict(data['confusion']), PRF1.from_dict(data))


@dataclass
class EvaluationReport:
    mae: float
    segments: int
    binary: RegimeReport
    seven_class: RegimeReport
    notes: List[str] = field(default_factory=lambda: [f"binary tie rule: {BINARY_TIE_RULE}"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mae': self.mae,
            'segments': self.segments,
            'binary': self.binary.to_dict(),
            'seven_class': self.seven_class.to_dict(),
            'notes': list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'EvaluationReport':
        return cls(float(data['mae']), int(data['segments']),
                   RegimeReport.from_dict(data['binary']),
                   RegimeReport.from_dict(data['seven_class']),
                   list(data.get('notes', [])))


def evaluate_scores(predictions: Sequence[float], labels: Sequence[float]) -> EvaluationReport:
    """MAE plus both discretized regimes over one prediction per segment"""
    if len(predictions) != len(labels):
        raise ShapeMismatchError('evaluate_scores', [(len(predictions),), (len(labels),)])
    if not predictions:
        raise EmptySequenceError('prediction list')
    preds = [_finite(p, 'evaluate_scores') for p in predictions]
    gold = [float(y) for y in labels]
    mae = float(np.mean(np.abs(np.array(preds) - np.array(gold))))

    def regime(to_class, classes):
        matrix = confusion([to_class(p) for p in preds], [to_class(y) for y in gold], classes)
        return RegimeReport(matrix, prf1(matrix))

    return EvaluationReport(mae, len(preds),
                            regime(score_to_binary, BINARY_CLASSES),
                            regime(score_to_7class, SEVEN_CLASSES))
