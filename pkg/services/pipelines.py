#!/usr/bin/env python3
"""
mmtranslate/services/pipelines.py
Declarative pipeline specs and their orchestration: bimodal translation then
regression, hierarchical two-stage translation then regression, and the
raw-feature baselines, plus the frozen experiment grid.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from services.checkpoint import checkpoint_service
from services.data import (
    FIRST_WORD_ID, MODALITIES, AlignedSegment, Dataset, DatasetHeader, DatasetSplit,
    ModalitySequence, split_dataset,
)
from services.errors import AlignmentError, SpecError
from services.metrics import EvaluationReport
from services.regression import RegressionHead, evaluate_head, predict_score, train_regressor
from services.seq2seq import (
    END_TOKEN, TranslationModel, beam_search, encode, pair_loss, train_translation,
)
from services.training import TrainingState

SPEC_KINDS = (
    'unimodal-baseline', 'concat-baseline', 'bimodal-translate', 'hierarchical',
    'concat-to-one', 'one-to-concat', 'concat-to-concat',
)
BASELINE_KINDS = ('unimodal-baseline', 'concat-baseline')
TRANSLATION_KINDS = ('bimodal-translate', 'concat-to-one', 'one-to-concat', 'concat-to-concat')

# Model-initialisation stream per stage, mixed with the run seed
STAGE_STREAMS = {'translation-1': 1, 'translation-2': 2, 'regression': 3}

_EXPR = re.compile(r'^\s*(?:(concat|embed)\s*\(\s*([TAV](?:\s*,\s*[TAV])*)\s*\)|([TAV]))\s*$')


# ============================================================================
# MODALITY EXPRESSIONS AND SPECS
# ============================================================================

@dataclass(frozen=True)
class ModalityExpr:
    """`T`, `concat(T,V)` or `embed(T,A)`"""
    kind: str
    modalities: Tuple[str, ...]

    def __str__(self) -> str:
        if self.kind == 'single':
            return self.modalities[0]
        return f"{self.kind}({','.join(self.modalities)})"

    @property
    def is_discrete_target(self) -> bool:
        return self.kind == 'single' and self.modalities == ('T',)

    def feature_dim(self, dims: Mapping[str, int]) -> int:
        return sum(int(dims[m]) for m in self.modalities)


def parse_modality_expr(text: str) -> ModalityExpr:
    match = _EXPR.match(text or '')
    if not match:
        raise SpecError(f"cannot parse modality expression '{text}'")
    if match.group(3):
        return ModalityExpr('single', (match.group(3),))
    kind = match.group(1)
    mods = tuple(m.strip() for m in match.group(2).split(','))
    if len(set(mods)) != len(mods):
        raise SpecError(f"modality repeated inside '{text}'")
    if kind == 'concat' and len(mods) < 2:
        raise SpecError(f"concat needs at least two modalities: '{text}'")
    if kind == 'embed' and len(mods) != 2:
        raise SpecError(f"embed takes exactly two modalities: '{text}'")
    return ModalityExpr(kind, mods)


@dataclass(frozen=True)
class PipelineSpec:
    id: str
    kind: str
    source: ModalityExpr
    target: Optional[ModalityExpr] = None

    @property
    def label(self) -> str:
        if self.target is None:
            return str(self.source)
        return f"{self.source} → {self.target}"

    @property
    def translation_stages(self) -> int:
        if self.kind in BASELINE_KINDS:
            return 0
        return 2 if self.kind == 'hierarchical' else 1

    def stages(self) -> List[Tuple[ModalityExpr, ModalityExpr]]:
        """Translation stages in execution order"""
        if self.kind in BASELINE_KINDS:
            return []
        if self.kind == 'hierarchical':
            x, y = self.source.modalities
            return [(ModalityExpr('single', (x,)), ModalityExpr('single', (y,))),
                    (self.source, self.target)]
        return [(self.source, self.target)]

    def to_dict(self) -> Dict[str, Any]:
        return {'id': self.id, 'kind': self.kind, 'source': str(self.source),
                'target': str(self.target) if self.target is not None else None,
                'translation_stages': self.translation_stages}


def make_spec(kind: str, source: str, target: Optional[str] = None, spec_id: Optional[str] = None) -> PipelineSpec:
    """Parse and check a spec; raises SpecError on any inconsistency"""
    if kind not in SPEC_KINDS:
        raise SpecError(f"unknown pipeline kind '{kind}'")
    src = parse_modality_expr(source)
    tgt = parse_modality_expr(target) if target is not None else None
    shape = {
        'unimodal-baseline': ('single', None),
        'concat-baseline': ('concat', None),
        'bimodal-translate': ('single', 'single'),
        'hierarchical': ('embed', 'single'),
        'concat-to-one': ('concat', 'single'),
        'one-to-concat': ('single', 'concat'),
        'concat-to-concat': ('concat', 'concat'),
    }[kind]
    got = (src.kind, tgt.kind if tgt is not None else None)
    if got != shape:
        raise SpecError(f"{kind} expects {shape[0]} -> {shape[1]}, got {source} -> {target}")
    if kind in ('bimodal-translate', 'hierarchical', 'concat-to-one', 'one-to-concat'):
        if set(src.modalities) & set(tgt.modalities):
            raise SpecError(f"{kind} must not translate a modality into itself: {source} -> {target}")
    if kind == 'concat-to-concat':
        shared = set(src.modalities) & set(tgt.modalities)
        if shared - {'T'}:
            raise SpecError(f"only T may appear on both sides of {source} -> {target}")
    label = source if target is None else f"{source}-{target}"
    slug = re.sub(r'[^A-Za-z0-9]+', '-', label.replace('concat', 'cat')).strip('-')
    return PipelineSpec(spec_id or slug, kind, src, tgt)


# Experiment grid in table order
GRID = (
    ('unimodal-baseline', 'T', None),
    ('unimodal-baseline', 'A', None),
    ('unimodal-baseline', 'V', None),
    ('concat-baseline', 'concat(T,A)', None),
    ('concat-baseline', 'concat(T,V)', None),
    ('concat-baseline', 'concat(A,V)', None),
    ('concat-baseline', 'concat(T,A,V)', None),
    ('bimodal-translate', 'T', 'V'),
    ('bimodal-translate', 'T', 'A'),
    ('bimodal-translate', 'A', 'T'),
    ('bimodal-translate', 'A', 'V'),
    ('bimodal-translate', 'V', 'T'),
    ('bimodal-translate', 'V', 'A'),
    ('hierarchical', 'embed(T,V)', 'A'),
    ('hierarchical', 'embed(T,A)', 'V'),
    ('hierarchical', 'embed(A,V)', 'T'),
    ('hierarchical', 'embed(A,T)', 'V'),
    ('hierarchical', 'embed(V,T)', 'A'),
    ('hierarchical', 'embed(V,A)', 'T'),
    ('concat-to-one', 'concat(T,V)', 'A'),
    ('concat-to-one', 'concat(A,T)', 'V'),
    ('concat-to-one', 'concat(V,A)', 'T'),
    ('one-to-concat', 'T', 'concat(A,V)'),
    ('one-to-concat', 'A', 'concat(T,V)'),
    ('concat-to-concat', 'concat(T,A)', 'concat(T,V)'),
    ('concat-to-concat', 'concat(T,V)', 'concat(T,A)'),
)


def enumerate_variations() -> List[PipelineSpec]:
    specs = []
    for index, (kind, source, target) in enumerate(GRID, start=1):
        spec = make_spec(kind, source, target)
        specs.append(PipelineSpec(f"{index:02d}-{spec.id}", kind, spec.source, spec.target))
    return specs


def spec_by_id(spec_id: str) -> PipelineSpec:
    for spec in enumerate_variations():
        if spec.id == spec_id:
            return spec
    raise SpecError(f"unknown pipeline spec id '{spec_id}'")


def resolve_spec(config) -> PipelineSpec:
    if config.inline_spec:
        inline = dict(config.inline_spec)
        try:
            return make_spec(inline['kind'], inline['source'], inline.get('target'), inline.get('id'))
        except KeyError as e:
            raise SpecError(f"inline spec lacks {e}")
    if config.spec:
        return spec_by_id(config.spec)
    raise SpecError("no pipeline spec given (spec id or inline spec)")


# ============================================================================
# SEQUENCES
# ============================================================================

@dataclass
class ConcatenatedSequence:
    """Per-step concatenation of several modalities in declared order"""
    features: np.ndarray
    modalities: Tuple[str, ...]
    offsets: Tuple[int, ...]

    @property
    def length(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


def concat_modalities(segment: AlignedSegment, which: Sequence[str]) -> ConcatenatedSequence:
    which = tuple(which)
    if not which:
        raise SpecError("no modality selected")
    blocks = [segment.modality(m).features for m in which]
    lengths = {m: b.shape[0] for m, b in zip(which, blocks)}
    if len(set(lengths.values())) != 1:
        raise AlignmentError(segment.id, lengths)
    offsets, start = [], 0
    for b in blocks:
        offsets.append(start)
        start += b.shape[1]
    return ConcatenatedSequence(np.concatenate(blocks, axis=1), which, tuple(offsets))


def source_sequence(segment: AlignedSegment, expr: ModalityExpr) -> np.ndarray:
    if expr.kind == 'embed':
        raise SpecError("embed(...) sources are produced by a previous stage")
    return concat_modalities(segment, expr.modalities).features


def target_sequence(segment: AlignedSegment, expr: ModalityExpr):
    """Token ids plus the end symbol for a bare T target, feature rows otherwise"""
    if expr.is_discrete_target:
        return list(segment.text.token_ids) + [END_TOKEN]
    return concat_modalities(segment, expr.modalities).features


def target_layout(expr: ModalityExpr, header: DatasetHeader) -> Tuple[str, int]:
    if expr.is_discrete_target:
        return 'discrete', header.vocab_size
    return 'continuous', expr.feature_dim(header.dims)


# ============================================================================
# RESULTS
# ============================================================================

@dataclass
class RunContext:
    """Where and how a pipeline persists its stages"""
    run_dir: Optional[Path] = None
    resume: bool = False
    config_hash: str = ''
    halt_after_epoch: Optional[int] = None


@dataclass
class PipelineResult:
    spec: PipelineSpec
    report: EvaluationReport
    curves: Dict[str, List[Dict[str, Any]]]
    stage_checkpoints: List[Optional[Path]] = field(default_factory=list)
    regression_checkpoint: Optional[Path] = None
    translation_models: List[TranslationModel] = field(default_factory=list)
    translation_eval: List[Dict[str, Any]] = field(default_factory=list)
    head: Optional[RegressionHead] = None

    @property
    def translation_stages(self) -> int:
        return len(self.translation_models)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'spec': self.spec.to_dict(),
            'translation_stages': self.translation_stages,
            'curves': self.curves,
            'translation': self.translation_eval,
            'report': self.report.to_dict(),
        }


@dataclass
class TransferComparison:
    """Same regression budget on a translation-pretrained vs. an untrained frozen encoder"""
    pretrained: EvaluationReport
    random: EvaluationReport

    @property
    def pretrained_mae(self) -> float:
        return self.pretrained.mae

    @property
    def random_mae(self) -> float:
        return self.random.mae

    @property
    def pretraining_helps(self) -> bool:
        return self.pretrained.mae <= self.random.mae


# ============================================================================
# SERVICE
# ============================================================================

class PipelineService:
    """Runs pipeline specs phase by phase"""

    def __init__(self, debug: bool = False):
        self.debug = debug

    def _log(self, message: str) -> None:
        """Debug logging"""
        if self.debug:
            print(f"🔍 [DEBUG] {message}")

    def split(self, dataset: Dataset, config) -> DatasetSplit:
        return split_dataset(dataset.segments, config.train_frac, config.val_frac, config.seed)

    def _parts(self, dataset: Dataset, split: DatasetSplit):
        return tuple(split.select(dataset.segments, p) for p in ('train', 'validation', 'test'))

    def _rng(self, config, stage: str) -> np.random.Generator:
        return np.random.default_rng([config.seed, STAGE_STREAMS[stage]])

    def _translation_model(self, source_dim: int, target: ModalityExpr, header: DatasetHeader,
                           config, stage: str, zero: bool = False) -> TranslationModel:
        kind, target_dim = target_layout(target, header)
        cfg = config.translation
        return TranslationModel.init(source_dim, target_dim, kind, cfg.cell_kind, cfg.hidden_size,
                                     cfg.num_layers, cfg.attention, self._rng(config, stage), zero=zero)

    def _regression_head(self, input_size: int, config, zero: bool = False) -> RegressionHead:
        cfg = config.regression
        return RegressionHead.init(input_size, cfg.cell_kind, cfg.hidden_size, cfg.num_layers,
                                   cfg.attention, self._rng(config, 'regression'), zero=zero)

    def _train_stage(self, stage: str, params, topology: Dict[str, Any],
                     train: Callable[..., TrainingState], ctx: RunContext) -> Tuple[TrainingState, Optional[Path]]:
        """Checkpoint after every epoch; on resume, restore weights and loop state first"""
        path = Path(ctx.run_dir) / f"{stage}.ckpt" if ctx.run_dir else None
        state = None
        if ctx.resume and path is not None and path.exists():
            ckpt = checkpoint_service.load(path)
            if ckpt.config_hash != ctx.config_hash:
                raise SpecError(f"checkpoint {path} was written under a different config "
                                f"({ckpt.config_hash} != {ctx.config_hash})")
            checkpoint_service.restore(params, ckpt)
            state = ckpt.state()
            self._log(f"[{stage}] restored checkpoint at epoch {state.epoch if state else 0}")

        def save(st: TrainingState) -> None:
            if path is not None:
                checkpoint_service.save(path, checkpoint_service.snapshot(topology, params, st, ctx.config_hash))

        state = train(initial_state=state, save_state_callback=save, halt_after_epoch=ctx.halt_after_epoch)
        if path is not None:
            print(f"💾 {stage}: best epoch {state.best_epoch}, checkpoint {path.name}")
        return state, path

    def _evaluate_translation(self, stage: str, model: TranslationModel,
                              pairs: Sequence[Tuple[str, Any, Any]], beam_width: int) -> Dict[str, Any]:
        summary: Dict[str, Any] = {'stage': stage, 'target_kind': model.target_kind}
        if not pairs:
            return summary
        summary['test_loss'] = float(np.mean([float(pair_loss(model, src, tgt).value) for _, src, tgt in pairs]))
        if model.target_kind == 'discrete':
            exact, accuracy = 0, []
            for sid, src, tgt in pairs:
                decoded = beam_search(encode(src, model, sid), model, beam_width).tokens
                exact += int(decoded == list(tgt))
                hits = sum(int(a == b) for a, b in zip(decoded, tgt))
                accuracy.append(hits / max(len(decoded), len(tgt)))
            summary['beam_width'] = beam_width
            summary['exact_match'] = exact / len(pairs)
            summary['token_accuracy'] = float(np.mean(accuracy))
        return summary

    def _translate(self, stage: str, model: TranslationModel, parts, target: ModalityExpr,
                   source_of: Callable[[AlignedSegment], np.ndarray], config, ctx: RunContext):
        train, val, test = parts
        pairs = [[(s.id, source_of(s), target_sequence(s, target)) for s in part] for part in parts]
        self._log(f"[{stage}] {model.source_dim} -> {model.target_dim} ({model.target_kind}), "
                  f"{len(train)} train / {len(val)} validation segments")
        state, path = self._train_stage(
            stage, model.named_parameters(), model.topology(),
            lambda **kw: train_translation(model, pairs[0], config.translation, config.seed,
                                           stage=stage, validation=pairs[1], **kw),
            ctx)
        summary = self._evaluate_translation(stage, model, pairs[2], config.translation.beam_width)
        return state, path, summary

    def _regress(self, head: RegressionHead, parts, source_of: Callable[[AlignedSegment], np.ndarray],
                 encoder: Optional[TranslationModel], config, ctx: RunContext):
        examples = [[(s.id, source_of(s), s.label) for s in part] for part in parts]
        finetune = bool(encoder is not None and config.regression.finetune_encoder)
        params = head.named_parameters()
        topology = dict(head.topology())
        if finetune:
            params.update(encoder.encoder_parameters())
            topology['finetuned_encoder'] = encoder.topology()
        state, path = self._train_stage(
            'regression', params, topology,
            lambda **kw: train_regressor(head, examples[0], config.regression, config.seed,
                                         encoder=encoder, finetune_encoder=finetune,
                                         validation=examples[1], stage='regression', **kw),
            ctx)
        report = evaluate_head(head, examples[2], encoder=encoder)
        return state, path, report

    def _require(self, spec: PipelineSpec, kinds: Sequence[str]) -> None:
        if spec.kind not in kinds:
            raise SpecError(f"spec '{spec.id}' of kind {spec.kind} cannot run here (expects {', '.join(kinds)})")

    def run_bimodal(self, spec: PipelineSpec, dataset: Dataset, config,
                    split: Optional[DatasetSplit] = None, ctx: Optional[RunContext] = None) -> PipelineResult:
        """Phase 1 translation source -> target, Phase 2 regression on the encoder states"""
        self._require(spec, TRANSLATION_KINDS)
        ctx = ctx or RunContext()
        parts = self._parts(dataset, split or self.split(dataset, config))
        source_of = lambda s: source_sequence(s, spec.source)

        model = self._translation_model(spec.source.feature_dim(dataset.header.dims), spec.target,
                                        dataset.header, config, 'translation-1')
        state1, path1, summary = self._translate('translation-1', model, parts, spec.target,
                                                 source_of, config, ctx)
        head = self._regression_head(model.hidden_size, config)
        state2, path2, report = self._regress(head, parts, source_of, model, config, ctx)
        return PipelineResult(spec, report,
                              {'translation-1': state1.curve, 'regression': state2.curve},
                              [path1], path2, [model], [summary], head)

    def run_hierarchical(self, spec: PipelineSpec, dataset: Dataset, config,
                         split: Optional[DatasetSplit] = None, ctx: Optional[RunContext] = None) -> PipelineResult:
        """X -> Y, then E_XY -> Z on the stage-1 state sequences, then regression on E_XYZ"""
        self._require(spec, ('hierarchical',))
        ctx = ctx or RunContext()
        parts = self._parts(dataset, split or self.split(dataset, config))
        (first_src, first_tgt), (_, final_tgt) = spec.stages()
        header = dataset.header

        model1 = self._translation_model(first_src.feature_dim(header.dims), first_tgt, header,
                                         config, 'translation-1')
        state1, path1, summary1 = self._translate(
            'translation-1', model1, parts, first_tgt,
            lambda s: source_sequence(s, first_src), config, ctx)

        # E_XY keeps one row per source step
        embedded = {s.id: encode(source_sequence(s, first_src), model1, s.id).states_array()
                    for part in parts for s in part}
        embed_of = lambda s: embedded[s.id]

        model2 = self._translation_model(model1.hidden_size, final_tgt, header, config, 'translation-2')
        state2, path2, summary2 = self._translate('translation-2', model2, parts, final_tgt,
                                                  embed_of, config, ctx)
        head = self._regression_head(model2.hidden_size, config)
        state3, path3, report = self._regress(head, parts, embed_of, model2, config, ctx)
        curves = {'translation-1': state1.curve, 'translation-2': state2.curve, 'regression': state3.curve}
        return PipelineResult(spec, report, curves, [path1, path2], path3,
                              [model1, model2], [summary1, summary2], head)

    def run_baseline(self, spec: PipelineSpec, dataset: Dataset, config,
                     split: Optional[DatasetSplit] = None, ctx: Optional[RunContext] = None) -> PipelineResult:
        """Regression directly on the raw (possibly concatenated) feature sequence"""
        self._require(spec, BASELINE_KINDS)
        ctx = ctx or RunContext()
        parts = self._parts(dataset, split or self.split(dataset, config))
        head = self._regression_head(spec.source.feature_dim(dataset.header.dims), config)
        state, path, report = self._regress(head, parts, lambda s: source_sequence(s, spec.source),
                                            None, config, ctx)
        return PipelineResult(spec, report, {'regression': state.curve}, [], path, [], [], head)

    def run(self, spec: PipelineSpec, dataset: Dataset, config,
            split: Optional[DatasetSplit] = None, ctx: Optional[RunContext] = None) -> PipelineResult:
        if spec.kind in BASELINE_KINDS:
            return self.run_baseline(spec, dataset, config, split, ctx)
        if spec.kind == 'hierarchical':
            return self.run_hierarchical(spec, dataset, config, split, ctx)
        return self.run_bimodal(spec, dataset, config, split, ctx)

    def dry_run(self, spec: PipelineSpec, header: DatasetHeader, config, length: int = 2) -> List[Dict[str, Any]]:
        """Push a zero-valued segment through zero-initialised models of every stage"""
        text, audio, video = (
            ModalitySequence(m, np.zeros((length, header.dims[m])),
                             [FIRST_WORD_ID] * length if m == 'T' else None)
            for m in MODALITIES)
        dummy = AlignedSegment('dry-run', text, audio, video, 0.0)
        records = []
        current = None
        for index, (src, tgt) in enumerate(spec.stages(), start=1):
            stage = f"translation-{index}"
            X = current if src.kind == 'embed' else source_sequence(dummy, src)
            if X is None:
                raise SpecError(f"{spec.id}: {src} has no producing stage")
            model = self._translation_model(X.shape[1], tgt, header, config, stage, zero=True)
            pair_loss(model, X, target_sequence(dummy, tgt))
            current = encode(X, model).states_array()
            if current.shape != (length, model.hidden_size):
                raise SpecError(f"{spec.id}: {stage} produced states of shape {current.shape}")
            records.append({'stage': stage, 'source': str(src), 'target': str(tgt),
                            'source_dim': model.source_dim, 'target_dim': model.target_dim,
                            'target_kind': model.target_kind, 'hidden_size': model.hidden_size})
        reg_input = current if current is not None else source_sequence(dummy, spec.source)
        head = self._regression_head(reg_input.shape[1], config, zero=True)
        predict_score(reg_input, head)
        records.append({'stage': 'regression', 'input_dim': int(reg_input.shape[1]),
                        'hidden_size': head.rnn.hidden_size})
        return records

    def compare_pretrained_encoder(self, spec: PipelineSpec, dataset: Dataset, config,
                                   split: Optional[DatasetSplit] = None) -> TransferComparison:
        """
        Regression on a frozen encoder trained by translation vs. the same encoder at its
        initial weights. Both heads start from identical weights and see the same budget.
        """
        self._require(spec, TRANSLATION_KINDS)
        parts = self._parts(dataset, split or self.split(dataset, config))
        source_of = lambda s: source_sequence(s, spec.source)
        dim = spec.source.feature_dim(dataset.header.dims)

        pretrained = self._translation_model(dim, spec.target, dataset.header, config, 'translation-1')
        untrained = self._translation_model(dim, spec.target, dataset.header, config, 'translation-1')
        self._translate('translation-1', pretrained, parts, spec.target, source_of, config, RunContext())

        reports = []
        for encoder in (pretrained, untrained):
            head = self._regression_head(encoder.hidden_size, config)
            examples = [[(s.id, source_of(s), s.label) for s in part] for part in parts]
            train_regressor(head, examples[0], config.regression, config.seed, encoder=encoder,
                            finetune_encoder=False, validation=examples[1])
            reports.append(evaluate_head(head, examples[2], encoder=encoder))
        self._log(f"transfer: pretrained MAE {reports[0].mae:.4f} vs untrained {reports[1].mae:.4f}")
        return TransferComparison(*reports)


# Global instance
pipeline_service = PipelineService()
