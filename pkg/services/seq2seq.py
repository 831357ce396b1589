#!/usr/bin/env python3
"""
mmtranslate/services/seq2seq.py
Encoder-decoder translation between modality sequences: teacher-forced decoding,
bilinear decoder attention, beam search for token targets and autoregressive
rollout for feature targets.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services import autodiff as ad
from services.autodiff import Node
from services.errors import EmptySequenceError, ShapeMismatchError, SpecError
from services.recurrent import (
    RecurrentParameters, cell_step, stacked_forward, uniform_init,
)
from services.training import TrainingLoop

TARGET_KINDS = ('discrete', 'continuous')

# Reserved vocabulary entries; corpus words start at index 2
START_TOKEN = 0
END_TOKEN = 1

DEFAULT_BEAM_WIDTH = 4

DecoderState = List[Tuple[Node, Optional[Node]]]


@dataclass
class EncodedRepresentation:
    """Top-layer encoder states (T x D) plus the final state that seeds the decoder"""
    states: Node
    final: Node
    source_tag: str = ''

    @property
    def length(self) -> int:
        return self.states.shape[0]

    def states_array(self) -> np.ndarray:
        return np.array(self.states.value)

    def detached(self) -> 'EncodedRepresentation':
        states = ad.detach(self.states)
        return EncodedRepresentation(states, ad.take(states, -1), self.source_tag)


@dataclass
class TranslationModel:
    encoder: RecurrentParameters
    decoder: RecurrentParameters
    W_out: Node
    b_out: Node
    target_kind: str
    target_dim: int
    attention: Optional[Node] = None

    @classmethod
    def init(cls, source_dim: int, target_dim: int, target_kind: str,
             cell_kind: str = 'lstm', hidden_size: int = 64, num_layers: int = 1,
             attention: bool = False, rng: Optional[np.random.Generator] = None,
             zero: bool = False) -> 'TranslationModel':
        """target_dim is the vocabulary size V for discrete targets, d_target otherwise"""
        if target_kind not in TARGET_KINDS:
            raise SpecError(f"unknown target kind '{target_kind}'")
        if target_kind == 'discrete' and target_dim < 3:
            raise SpecError(f"vocabulary of size {target_dim} leaves no room past start/end tokens")
        rng = rng if rng is not None else np.random.default_rng(0)
        D = hidden_size
        encoder = RecurrentParameters.init(cell_kind, source_dim, D, num_layers, rng,
                                           prefix='encoder', zero=zero)
        decoder = RecurrentParameters.init(cell_kind, target_dim, D, num_layers, rng,
                                           prefix='decoder', zero=zero)
        head_in = 2 * D if attention else D
        W_out = np.zeros((target_dim, head_in)) if zero else uniform_init(rng, (target_dim, head_in), head_in)
        attn = None
        if attention:
            W_attn = np.zeros((D, D)) if zero else uniform_init(rng, (D, D), D)
            attn = ad.parameter(W_attn, 'attention.W')
        return cls(encoder, decoder, ad.parameter(W_out, 'head.W_out'),
                   ad.parameter(np.zeros(target_dim), 'head.b_out'),
                   target_kind, target_dim, attn)

    @classmethod
    def from_topology(cls, topology: Dict[str, Any]) -> 'TranslationModel':
        enc = topology['encoder']
        return cls.init(enc['input_size'], topology['target_dim'], topology['target_kind'],
                        enc['cell_kind'], enc['hidden_size'], enc['num_layers'],
                        topology['attention'], zero=True)

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size

    @property
    def source_dim(self) -> int:
        return self.encoder.input_size

    def encoder_parameters(self) -> Dict[str, Node]:
        return self.encoder.named_parameters()

    def named_parameters(self) -> Dict[str, Node]:
        named = dict(self.encoder.named_parameters())
        named.update(self.decoder.named_parameters())
        named['head.W_out'] = self.W_out
        named['head.b_out'] = self.b_out
        if self.attention is not None:
            named['attention.W'] = self.attention
        return named

    def topology(self) -> Dict[str, Any]:
        return {
            'model': 'translation',
            'encoder': self.encoder.topology(),
            'decoder': self.decoder.topology(),
            'target_kind': self.target_kind,
            'target_dim': self.target_dim,
            'attention': self.attention is not None,
        }


@dataclass
class DecoderOutput:
    """Per-step logits (discrete) or feature predictions (continuous)"""
    outputs: List[Node]
    attention: List[Node] = field(default_factory=list)


@dataclass
class BeamHypothesis:
    tokens: List[int]
    log_prob: float
    state: Optional[DecoderState] = None
    finished: bool = False


# ============================================================================
# ENCODING
# ============================================================================

def encode(X, model: TranslationModel, source_tag: str = '') -> EncodedRepresentation:
    if isinstance(X, np.ndarray) and X.ndim == 2 and X.shape[0] == 0:
        raise EmptySequenceError('source sequence')
    hidden = stacked_forward(X, model.encoder)
    states = hidden.top_matrix()
    return EncodedRepresentation(states, hidden.top()[-1], source_tag)


# ============================================================================
# DECODING
# ============================================================================

def _initial_state(model: TranslationModel, E: EncodedRepresentation) -> DecoderState:
    D = model.hidden_size
    if E.final.shape != (D,):
        raise ShapeMismatchError('decoder_init', [E.final.shape, (D,)])
    zeros = np.zeros(D)
    lstm = model.decoder.cell_kind == 'lstm'
    return [(E.final, ad.constant(zeros) if lstm else None) for _ in model.decoder.layers]


def _one_hot(index: int, size: int) -> Node:
    v = np.zeros(size)
    v[index] = 1.0
    return ad.constant(v)


def _start_input(model: TranslationModel) -> Node:
    if model.target_kind == 'discrete':
        return _one_hot(START_TOKEN, model.target_dim)
    return ad.constant(np.zeros(model.target_dim))


def _decoder_step(model: TranslationModel, x_t: Node, state: DecoderState,
                  E: EncodedRepresentation) -> Tuple[Node, DecoderState, Optional[Node]]:
    new_state = []
    inp = x_t
    for layer, layer_state in zip(model.decoder.layers, state):
        layer_state = cell_step(model.decoder.cell_kind, inp, layer_state, layer)
        new_state.append(layer_state)
        inp = layer_state[0]
    top = inp
    weights = None
    if model.attention is not None:
        # s_t^T W e_i for every encoder position i
        scores = ad.matmul(E.states, ad.matmul(top, model.attention))
        weights = ad.softmax(scores)
        context = ad.matmul(weights, E.states)
        head_in = ad.concat([top, context])
    else:
        head_in = top
    out = ad.matmul(model.W_out, head_in) + model.b_out
    return out, new_state, weights


def _check_tokens(model: TranslationModel, target: Sequence[int]) -> List[int]:
    tokens = [int(t) for t in target]
    for t, tok in enumerate(tokens):
        if not 0 <= tok < model.target_dim:
            raise SpecError(f"token id {tok} at step {t} outside vocabulary of size {model.target_dim}")
    return tokens


def _target_inputs(model: TranslationModel, target) -> List[Node]:
    """Decoder inputs: start symbol, then the ground truth shifted right"""
    if len(target) == 0:
        raise EmptySequenceError('target sequence')
    inputs = [_start_input(model)]
    if model.target_kind == 'discrete':
        tokens = _check_tokens(model, target)
        inputs += [_one_hot(tok, model.target_dim) for tok in tokens[:-1]]
    else:
        arr = np.asarray(target, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != model.target_dim:
            raise ShapeMismatchError('decode', [arr.shape, (len(arr), model.target_dim)])
        inputs += [ad.constant(row) for row in arr[:-1]]
    return inputs


def decode_teacher_forced(E: EncodedRepresentation, target, model: TranslationModel) -> DecoderOutput:
    state = _initial_state(model, E)
    result = DecoderOutput([])
    for x_t in _target_inputs(model, target):
        out, state, weights = _decoder_step(model, x_t, state, E)
        result.outputs.append(out)
        if weights is not None:
            result.attention.append(weights)
    return result


def translation_loss(predictions: Sequence[Node], target, target_kind: str) -> Node:
    """Mean per-step cross-entropy (discrete) or mean squared error (continuous)"""
    if len(predictions) == 0:
        raise EmptySequenceError('predictions')
    if len(predictions) != len(target):
        raise ShapeMismatchError('translation_loss', [(len(predictions),), (len(target),)],
                                 'prediction and target lengths differ')
    stacked = ad.stack(list(predictions))
    if target_kind == 'discrete':
        tokens = np.asarray(target, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= stacked.shape[1]:
            raise SpecError(f"target token outside vocabulary of size {stacked.shape[1]}")
        log_probs = ad.log_softmax(stacked)
        picked = ad.take(log_probs, (np.arange(len(tokens)), tokens))
        return -ad.mean(picked)
    arr = np.asarray(target, dtype=np.float64)
    if arr.shape != stacked.shape:
        raise ShapeMismatchError('translation_loss', [stacked.shape, arr.shape])
    diff = stacked - ad.constant(arr)
    return ad.mean(diff * diff)


def _detach_state(state: DecoderState) -> DecoderState:
    return [(ad.detach(h), ad.detach(c) if c is not None else None) for h, c in state]


def _step_log_probs(model: TranslationModel, token: int, state: DecoderState,
                    E: EncodedRepresentation) -> Tuple[np.ndarray, DecoderState]:
    x_t = _one_hot(token, model.target_dim)
    out, new_state, _ = _decoder_step(model, x_t, state, E)
    return ad.log_softmax(out).value, _detach_state(new_state)


def _require_discrete(model: TranslationModel, what: str) -> None:
    if model.target_kind != 'discrete':
        raise SpecError(f"{what} needs a discrete-target model (got '{model.target_kind}')")


def greedy_decode(E: EncodedRepresentation, model: TranslationModel, max_len: int) -> BeamHypothesis:
    """Stepwise argmax until the end token or max_len"""
    _require_discrete(model, 'greedy decoding')
    if max_len < 1:
        raise SpecError(f"max_len must be >= 1, got {max_len}")
    E = E.detached()
    state = _detach_state(_initial_state(model, E))
    hyp = BeamHypothesis([], 0.0, state)
    token = START_TOKEN
    for _ in range(max_len):
        log_probs, state = _step_log_probs(model, token, hyp.state, E)
        token = int(np.argmax(log_probs))
        hyp = BeamHypothesis(hyp.tokens + [token], hyp.log_prob + float(log_probs[token]), state)
        if token == END_TOKEN:
            break
    hyp.finished = True
    return hyp


def beam_search(E: EncodedRepresentation, model: TranslationModel,
                beam_width: int = DEFAULT_BEAM_WIDTH, max_len: Optional[int] = None) -> BeamHypothesis:
    """
    Keep the beam_width best partial sequences by cumulative log-probability, expanding
    each over the full vocabulary. A hypothesis finishes on the end token or at max_len.
    The greedy rollout joins the finished pool, so the result never scores below it.
    """
    _require_discrete(model, 'beam search')
    if beam_width < 1:
        raise SpecError(f"beam_width must be >= 1, got {beam_width}")
    if max_len is None:
        max_len = default_max_len(E.length)
    if max_len < 1:
        raise SpecError(f"max_len must be >= 1, got {max_len}")

    E = E.detached()
    live = [BeamHypothesis([], 0.0, _detach_state(_initial_state(model, E)))]
    finished: List[BeamHypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            last = hyp.tokens[-1] if hyp.tokens else START_TOKEN
            log_probs, state = _step_log_probs(model, last, hyp.state, E)
            for v in range(model.target_dim):
                candidates.append(BeamHypothesis(hyp.tokens + [v], hyp.log_prob + float(log_probs[v]), state))
        # Stable sort keeps earlier hypotheses and lower token ids first on ties
        candidates.sort(key=lambda h: -h.log_prob)
        live = []
        for cand in candidates[:beam_width]:
            if cand.tokens[-1] == END_TOKEN:
                cand.finished = True
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break
    for hyp in live:
        hyp.finished = True
        finished.append(hyp)
    finished.append(greedy_decode(E, model, max_len))
    finished.sort(key=lambda h: -h.log_prob)
    return finished[0]


def default_max_len(source_length: int) -> int:
    return max(1, math.ceil(1.5 * source_length))


def sequence_log_prob(E: EncodedRepresentation, model: TranslationModel, tokens: Sequence[int]) -> float:
    """log p(tokens | E), accumulated step by step in the order beam search uses"""
    _require_discrete(model, 'sequence scoring')
    tokens = _check_tokens(model, tokens)
    E = E.detached()
    state = _detach_state(_initial_state(model, E))
    total, last = 0.0, START_TOKEN
    for tok in tokens:
        log_probs, state = _step_log_probs(model, last, state, E)
        total += float(log_probs[tok])
        last = tok
    return total


def decode_continuous_greedy(E: EncodedRepresentation, model: TranslationModel, length: int) -> np.ndarray:
    """Autoregressive rollout feeding each prediction back in as the next input"""
    if model.target_kind != 'continuous':
        raise SpecError("continuous rollout needs a continuous-target model")
    if length < 1:
        raise EmptySequenceError('requested rollout')
    E = E.detached()
    state = _detach_state(_initial_state(model, E))
    x_t = _start_input(model)
    outputs = []
    for _ in range(length):
        out, state, _ = _decoder_step(model, x_t, state, E)
        state = _detach_state(state)
        outputs.append(np.array(out.value))
        x_t = ad.constant(out.value)
    return np.stack(outputs)


# ============================================================================
# TRAINING
# ============================================================================

def pair_loss(model: TranslationModel, source, target) -> Node:
    """encode -> teacher-forced decode -> translation_loss for one segment"""
    E = encode(source, model)
    predictions = decode_teacher_forced(E, target, model).outputs
    return translation_loss(predictions, target, model.target_kind)


def train_translation(model: TranslationModel, pairs: Sequence[Tuple[str, Any, Any]],
                      settings, seed: int, stage: str = 'translation',
                      validation: Optional[Sequence[Tuple[str, Any, Any]]] = None, **loop_kwargs):
    """
    Phase-1 trainer. pairs are (segment id, source T x d array, target) triples.
    Returns the TrainingState with the per-epoch loss curve.
    """
    def loss_fn(example):
        _, source, target = example
        return pair_loss(model, source, target)

    loop = TrainingLoop(stage, settings, seed)
    return loop.run(model.named_parameters(), list(pairs), loss_fn,
                    validation=list(validation) if validation else None, **loop_kwargs)
