#!/usr/bin/env python3
"""
mmtranslate/services/data.py
Word-aligned multimodal segments: JSON Lines ingestion and export, validation,
deterministic train/validation/test splitting and a synthetic corpus generator
with controllable cross-modal coupling.
"""

import json
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import (
    AlignmentError, DatasetFormatError, LabelRangeError, SpecError, StorageError,
)

MODALITIES = ('T', 'A', 'V')
MODALITY_FIELDS = {'T': 'text', 'A': 'audio', 'V': 'video'}

DATASET_FORMAT = 'mmtranslate-dataset'
DATASET_VERSION = 1

# Vocabulary indices 0 and 1 are the decoder's start and end symbols
FIRST_WORD_ID = 2

DEFAULT_TRAIN_FRAC = 0.6667
DEFAULT_VAL_FRAC = 0.1515

# Synthetic generator constants
LATENT_DIM = 4
LATENT_RHO = 0.8
LABEL_GAIN = 2.0


@dataclass
class ModalitySequence:
    modality: str
    features: np.ndarray
    token_ids: Optional[List[int]] = None

    @property
    def length(self) -> int:
        return int(self.features.shape[0]) if self.features.ndim >= 1 else 0

    @property
    def dim(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0


@dataclass
class AlignedSegment:
    id: str
    text: ModalitySequence
    audio: ModalitySequence
    video: ModalitySequence
    label: float

    def modality(self, tag: str) -> ModalitySequence:
        if tag not in MODALITY_FIELDS:
            raise SpecError(f"unknown modality '{tag}' (expected one of {MODALITIES})")
        return getattr(self, MODALITY_FIELDS[tag])

    @property
    def length(self) -> int:
        return self.text.length

    def lengths(self) -> Dict[str, int]:
        return {m: self.modality(m).length for m in MODALITIES}

    def to_record(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'label': float(self.label),
            'text': {'tokens': [int(t) for t in (self.text.token_ids or [])],
                     'features': self.text.features.tolist()},
            'audio': {'features': self.audio.features.tolist()},
            'video': {'features': self.video.features.tolist()},
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> 'AlignedSegment':
        def features(block):
            arr = np.array(block['features'], dtype=np.float64)
            return arr.reshape(0, 0) if arr.size == 0 else arr

        return cls(
            id=str(record['id']),
            text=ModalitySequence('T', features(record['text']),
                                  [int(t) for t in record['text']['tokens']]),
            audio=ModalitySequence('A', features(record['audio'])),
            video=ModalitySequence('V', features(record['video'])),
            label=float(record['label']),
        )


@dataclass
class DatasetHeader:
    dims: Dict[str, int]
    vocab_size: int
    format_version: int = DATASET_VERSION

    def to_record(self) -> Dict[str, Any]:
        return {'format': DATASET_FORMAT, 'version': self.format_version,
                'dims': {m: int(self.dims[m]) for m in MODALITIES},
                'vocab_size': int(self.vocab_size)}

    @classmethod
    def from_record(cls, record: Mapping[str, Any], line: int = 1) -> 'DatasetHeader':
        if not isinstance(record, dict):
            raise DatasetFormatError(
                f"header must be a JSON object, got {type(record).__name__}", line)
        if record.get('format') != DATASET_FORMAT:
            raise DatasetFormatError(
                f"missing dataset header; the first line must be "
                f"{{\"format\": \"{DATASET_FORMAT}\", \"version\": {DATASET_VERSION}, ...}}", line)
        version = record.get('version')
        if version != DATASET_VERSION:
            raise DatasetFormatError(
                f"unsupported format version {version}; this build reads version {DATASET_VERSION}", line)
        try:
            dims = {m: int(record['dims'][m]) for m in MODALITIES}
            return cls(dims, int(record['vocab_size']), version)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"malformed header: {e}", line)

    @classmethod
    def infer(cls, segments: Sequence[AlignedSegment]) -> 'DatasetHeader':
        if not segments:
            raise SpecError("cannot infer a header from an empty dataset")
        first = segments[0]
        top = max((t for s in segments for t in (s.text.token_ids or [])), default=FIRST_WORD_ID)
        return cls({m: first.modality(m).dim for m in MODALITIES}, max(top + 1, FIRST_WORD_ID + 1))


@dataclass
class Dataset:
    header: DatasetHeader
    segments: List[AlignedSegment]

    def __len__(self) -> int:
        return len(self.segments)

    def by_id(self) -> Dict[str, AlignedSegment]:
        return {s.id: s for s in self.segments}


@dataclass
class Diagnostic:
    segment_id: str
    kind: str
    message: str
    line: Optional[int] = None

    def __str__(self) -> str:
        where = f"line {self.line}, " if self.line is not None else ''
        return f"{where}segment '{self.segment_id}': [{self.kind}] {self.message}"


@dataclass
class DatasetSplit:
    train: List[str]
    validation: List[str]
    test: List[str]
    seed: int
    ratios: Tuple[float, float] = (DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC)

    def select(self, segments: Sequence[AlignedSegment], part: str) -> List[AlignedSegment]:
        by_id = {s.id: s for s in segments}
        return [by_id[i] for i in getattr(self, part)]

    def to_dict(self) -> Dict[str, Any]:
        return {'train': list(self.train), 'validation': list(self.validation),
                'test': list(self.test), 'seed': self.seed, 'ratios': list(self.ratios)}


# ============================================================================
# VALIDATION
# ============================================================================

def validate_segment(segment: AlignedSegment, header: Optional[DatasetHeader] = None) -> List[Diagnostic]:
    """Every violated invariant, not just the first; an empty list means valid"""
    found: List[Diagnostic] = []

    def report(kind, message):
        found.append(Diagnostic(segment.id, kind, message))

    for m in MODALITIES:
        seq = segment.modality(m)
        if seq.features.ndim != 2:
            report('shape', f"{m} features must be a T x d matrix, got shape {seq.features.shape}")
            continue
        if seq.length < 1:
            report('empty', f"{m} has no steps")
        if header is not None and seq.length and seq.dim != header.dims[m]:
            report('shape', f"{m} feature dim {seq.dim} != declared {header.dims[m]}")
        bad = np.argwhere(~np.isfinite(seq.features))
        for step, index in bad:
            report('finiteness', f"non-finite {m} feature at step {int(step)}, index {int(index)}")

    lengths = segment.lengths()
    if len(set(lengths.values())) > 1:
        shown = ', '.join(f"{m}={t}" for m, t in lengths.items())
        report('alignment', f"modality lengths differ: {shown}")

    tokens = segment.text.token_ids
    if tokens is None:
        report('tokens', "text has no token ids")
    else:
        if len(tokens) != segment.text.length:
            report('alignment', f"{len(tokens)} token ids for {segment.text.length} text steps")
        upper = header.vocab_size if header is not None else None
        for t, tok in enumerate(tokens):
            if tok < FIRST_WORD_ID or (upper is not None and tok >= upper):
                report('tokens', f"token id {tok} at step {t} outside [{FIRST_WORD_ID}, {upper})")
    for m in ('A', 'V'):
        if segment.modality(m).token_ids is not None:
            report('tokens', f"{m} must not carry token ids")

    if not math.isfinite(segment.label) or not -3.0 <= segment.label <= 3.0:
        report('label_range', f"label {segment.label} outside [-3, 3]")
    return found


def _raise_first(diagnostics: Sequence[Diagnostic], segment: AlignedSegment, line: int) -> None:
    first = diagnostics[0]
    if first.kind == 'alignment':
        raise AlignmentError(segment.id, segment.lengths())
    if first.kind == 'label_range':
        raise LabelRangeError(segment.id, segment.label)
    raise DatasetFormatError(f"segment '{segment.id}': {first.message}", line)


# ============================================================================
# FILE FORMAT
# ============================================================================

def _parse_lines(path: Union[str, Path]):
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.readlines()
    except OSError as e:
        raise StorageError(f"cannot read dataset {path}: {e}")
    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            yield number, json.loads(raw)
        except json.JSONDecodeError as e:
            yield number, DatasetFormatError(f"invalid JSON: {e.msg}", number)


def read_dataset(path: Union[str, Path]) -> Tuple[Optional[DatasetHeader], List[AlignedSegment]]:
    """Strict load: the first violation raises. An empty file is an empty dataset."""
    header = None
    segments: Dict[str, AlignedSegment] = {}
    for number, record in _parse_lines(path):
        if isinstance(record, Exception):
            raise record
        if header is None:
            header = DatasetHeader.from_record(record, number)
            continue
        if not isinstance(record, dict):
            raise DatasetFormatError(f"segment record must be a JSON object, got {type(record).__name__}", number)
        try:
            segment = AlignedSegment.from_record(record)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"malformed segment record: {e}", number)
        if segment.id in segments:
            raise DatasetFormatError(f"duplicate segment id '{segment.id}'", number)
        problems = validate_segment(segment, header)
        if problems:
            _raise_first(problems, segment, number)
        segments[segment.id] = segment
    return header, [segments[k] for k in sorted(segments)]


def load_dataset(path: Union[str, Path]) -> List[AlignedSegment]:
    return read_dataset(path)[1]


def open_dataset(path: Union[str, Path]) -> Dataset:
    header, segments = read_dataset(path)
    if header is None:
        raise DatasetFormatError(f"dataset {path} is empty; nothing to train on")
    return Dataset(header, segments)


def validate_file(path: Union[str, Path]) -> Tuple[DatasetHeader, List[Diagnostic]]:
    """Lenient scan collecting diagnostics for every line; only a bad header raises"""
    header = None
    diagnostics: List[Diagnostic] = []
    seen = set()
    for number, record in _parse_lines(path):
        if header is None:
            if isinstance(record, Exception):
                raise record
            header = DatasetHeader.from_record(record, number)
            continue
        if isinstance(record, Exception):
            diagnostics.append(Diagnostic('?', 'format', record.message, number))
            continue
        if not isinstance(record, dict):
            diagnostics.append(Diagnostic('?', 'format',
                                          f"segment record must be a JSON object, got {type(record).__name__}", number))
            continue
        try:
            segment = AlignedSegment.from_record(record)
        except (KeyError, TypeError, ValueError) as e:
            diagnostics.append(Diagnostic(str(record.get('id', '?')), 'format',
                                          f"malformed segment record: {e}", number))
            continue
        if segment.id in seen:
            diagnostics.append(Diagnostic(segment.id, 'format', "duplicate segment id", number))
        seen.add(segment.id)
        for diag in validate_segment(segment, header):
            diag.line = number
            diagnostics.append(diag)
    if header is None:
        raise DatasetFormatError(
            f"empty file has no header; expected format '{DATASET_FORMAT}' version {DATASET_VERSION}")
    return header, diagnostics


def save_dataset(path: Union[str, Path], segments: Sequence[AlignedSegment],
                 header: Optional[DatasetHeader] = None) -> Path:
    """One header line then one sorted-key JSON record per segment, ordered by id"""
    path = Path(path)
    header = header or DatasetHeader.infer(segments)
    lines = [json.dumps(header.to_record(), sort_keys=True)]
    lines += [json.dumps(s.to_record(), sort_keys=True) for s in sorted(segments, key=lambda s: s.id)]
    tmp = path.with_name(path.name + '.tmp')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(lines) + '\n')
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write dataset {path}: {e}")
    return path


# ============================================================================
# SPLITTING
# ============================================================================

def _round_half_up(value: Decimal) -> int:
    return int(value.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def split_sizes(n: int, train_frac: float = DEFAULT_TRAIN_FRAC,
                val_frac_of_train: float = DEFAULT_VAL_FRAC) -> Tuple[int, int, int]:
    """(train, validation, test): pool = rhu(n * train_frac), validation = rhu(pool * val_frac)"""
    pool = _round_half_up(Decimal(n) * Decimal(str(train_frac)))
    val = _round_half_up(Decimal(pool) * Decimal(str(val_frac_of_train)))
    return pool - val, val, n - pool


def split_dataset(segments: Sequence[AlignedSegment], train_frac: float = DEFAULT_TRAIN_FRAC,
                  val_frac_of_train: float = DEFAULT_VAL_FRAC, seed: int = 0) -> DatasetSplit:
    for name, frac in (('train_frac', train_frac), ('val_frac_of_train', val_frac_of_train)):
        if not 0.0 < frac < 1.0:
            raise SpecError(f"{name} must lie in (0, 1), got {frac}")
    if not segments:
        raise SpecError("cannot split an empty dataset")
    n = len(segments)
    n_train, n_val, n_test = split_sizes(n, train_frac, val_frac_of_train)
    if min(n_train, n_val, n_test) < 1:
        raise SpecError(
            f"{n} segments give an empty split (train={n_train}, validation={n_val}, test={n_test})")
    ids = sorted(s.id for s in segments)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    pool = n_train + n_val
    return DatasetSplit(train=shuffled[n_val:pool], validation=shuffled[:n_val],
                        test=shuffled[pool:], seed=seed, ratios=(train_frac, val_frac_of_train))


# ============================================================================
# SYNTHETIC CORPUS
# ============================================================================

def _latent_path(rng: np.random.Generator, length: int) -> np.ndarray:
    """Stationary AR(1) with unit marginal variance per latent coordinate"""
    z = np.empty((length, LATENT_DIM))
    z[0] = rng.standard_normal(LATENT_DIM)
    innovation = math.sqrt(1.0 - LATENT_RHO ** 2)
    for t in range(1, length):
        z[t] = LATENT_RHO * z[t - 1] + innovation * rng.standard_normal(LATENT_DIM)
    return z


def generate_synthetic(n_segments: int, T_range: Tuple[int, int] = (3, 8),
                       dims: Tuple[int, int, int] = (8, 4, 6), vocab_size: int = 12,
                       coupling: float = 0.9, seed: int = 0) -> List[AlignedSegment]:
    """
    Each step of every modality reads the same latent state: feature j of modality m is
    coupling * sign[m, j] * z[j mod L] plus independent noise scaled to keep unit variance.
    Token ids bucket the first text feature; the label is a squashed latent average.
    """
    lo, hi = T_range
    if n_segments < 1 or lo < 1 or hi < lo or min(dims) < 1:
        raise SpecError(f"generator sizes must be >= 1 (n={n_segments}, T_range={T_range}, dims={dims})")
    if vocab_size < FIRST_WORD_ID + 1:
        raise SpecError(f"vocab_size must be >= {FIRST_WORD_ID + 1}, got {vocab_size}")
    if not 0.0 <= coupling <= 1.0:
        raise SpecError(f"coupling must lie in [0, 1], got {coupling}")

    rng = np.random.default_rng(seed)
    signs = {m: rng.choice([-1.0, 1.0], size=d) for m, d in zip(MODALITIES, dims)}
    noise_scale = math.sqrt(1.0 - coupling ** 2)
    edges = np.linspace(-2.0, 2.0, vocab_size - FIRST_WORD_ID - 1)
    width = len(str(n_segments - 1))

    segments = []
    for i in range(n_segments):
        length = int(rng.integers(lo, hi + 1))
        z = _latent_path(rng, length)
        feats = {}
        for m, d in zip(MODALITIES, dims):
            shared = z[:, np.arange(d) % LATENT_DIM] * signs[m]
            feats[m] = coupling * shared + noise_scale * rng.standard_normal((length, d))
        tokens = (FIRST_WORD_ID + np.digitize(feats['T'][:, 0], edges)).astype(int).tolist()
        label = 3.0 * math.tanh(LABEL_GAIN * float(np.mean(z[:, 0] + 0.5 * z[:, 1])))
        segments.append(AlignedSegment(
            id=f"seg{i:0{width}d}",
            text=ModalitySequence('T', feats['T'], tokens),
            audio=ModalitySequence('A', feats['A']),
            video=ModalitySequence('V', feats['V']),
            label=label,
        ))
    return segments


def synthetic_header(dims: Tuple[int, int, int], vocab_size: int) -> DatasetHeader:
    return DatasetHeader(dict(zip(MODALITIES, (int(d) for d in dims))), int(vocab_size))


def cross_modal_correlation(segments: Sequence[AlignedSegment], first: str, second: str,
                            index: int = 0) -> float:
    """Pearson r between feature `index` of two modalities, pooled over all steps"""
    a = np.concatenate([s.modality(first).features[:, index] for s in segments])
    b = np.concatenate([s.modality(second).features[:, index] for s in segments])
    return float(np.corrcoef(a, b)[0, 1])
