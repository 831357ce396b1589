#!/usr/bin/env python3
"""
mmtranslate/services/errors.py
Exception hierarchy shared by all services; each class knows its CLI exit code
"""

from typing import Any, Optional, Sequence


class TranslateError(Exception):
    """Base error for the toolkit"""
    exit_code = 2

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


# ============================================================================
# Validation failures (exit code 1)
# ============================================================================

class ValidationError(TranslateError):
    exit_code = 1


class ShapeMismatchError(ValidationError):
    """Operands of an op-kind disagree in shape"""
    def __init__(self, op: str, shapes: Sequence[Any], detail: str = ''):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        shown = ' vs '.join(str(s) for s in self.shapes)
        message = f"shape mismatch in '{op}': {shown}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class AlignmentError(ValidationError):
    """Modalities of one segment have different step counts"""
    def __init__(self, segment_id: str, lengths: dict):
        self.segment_id = segment_id
        self.lengths = dict(lengths)
        shown = ', '.join(f"{m}={t}" for m, t in self.lengths.items())
        super().__init__(f"alignment violation in segment '{segment_id}': {shown}")


class LabelRangeError(ValidationError):
    def __init__(self, segment_id: str, label: float):
        self.segment_id = segment_id
        self.label = label
        super().__init__(f"label {label} of segment '{segment_id}' outside [-3, 3]")


class DatasetFormatError(ValidationError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecError(ValidationError):
    """Pipeline spec, modality expression or config is inconsistent"""


class EmptySequenceError(ValidationError):
    def __init__(self, what: str):
        self.what = what
        super().__init__(f"{what} is empty (needs at least one step)")


# ============================================================================
# Training failures (exit code 2)
# ============================================================================

class TrainingError(TranslateError):
    exit_code = 2


class GraphError(TrainingError):
    """Misuse of the computation graph (non-scalar root, unevaluated node)"""


class NonFiniteError(TrainingError):
    def __init__(self, where: str, detail: str = ''):
        self.where = where
        message = f"non-finite value in {where}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class TrainingInterrupted(TrainingError):
    """Raised after a checkpointed epoch when a halt was requested"""
    def __init__(self, stage: str, epoch: int):
        self.stage = stage
        self.epoch = epoch
        super().__init__(f"training halted after epoch {epoch} of stage '{stage}'")


# ============================================================================
# I/O failures (exit code 3)
# ============================================================================

class StorageError(TranslateError):
    exit_code = 3
