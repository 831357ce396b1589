#!/usr/bin/env python3
"""
mmtranslate/services/recurrent.py
LSTM/GRU cells, the stacked recurrent forward pass and soft attention pooling
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from services import autodiff as ad
from services.autodiff import Node
from services.errors import EmptySequenceError, ShapeMismatchError, SpecError

CELL_KINDS = ('lstm', 'gru')

DEFAULT_CELL = 'lstm'
DEFAULT_LAYERS = 1
DEFAULT_HIDDEN = 64

SequenceInput = Union[np.ndarray, Node, Sequence[Any]]


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class RecurrentParameters:
    """Weights of a K-layer recurrent stack; layer 0 reads the features, layers 1.. read D"""
    cell_kind: str
    input_size: int
    hidden_size: int
    num_layers: int
    layers: List[Dict[str, Node]] = field(default_factory=list)
    prefix: str = 'rnn'

    @classmethod
    def init(cls, cell_kind: str = DEFAULT_CELL, input_size: int = 1,
             hidden_size: int = DEFAULT_HIDDEN, num_layers: int = DEFAULT_LAYERS,
             rng: Optional[np.random.Generator] = None, prefix: str = 'rnn',
             zero: bool = False) -> 'RecurrentParameters':
        """Scaled-uniform weights in +-1/sqrt(fan_in), zero biases (all zero if zero=True)"""
        if cell_kind not in CELL_KINDS:
            raise SpecError(f"unknown cell kind '{cell_kind}' (expected one of {CELL_KINDS})")
        if input_size < 1 or hidden_size < 1 or num_layers < 1:
            raise SpecError(
                f"recurrent sizes must be >= 1 (input={input_size}, hidden={hidden_size}, "
                f"layers={num_layers})")
        rng = rng if rng is not None else np.random.default_rng(0)
        D = hidden_size

        def draw(shape, fan_in):
            return np.zeros(shape) if zero else uniform_init(rng, shape, fan_in)

        layers = []
        for k in range(num_layers):
            in_dim = input_size if k == 0 else D
            name = f"{prefix}.layer{k}"
            if cell_kind == 'lstm':
                layer = {
                    'W_x': ad.parameter(draw((4 * D, in_dim), in_dim), f"{name}.W_x"),
                    'W_h': ad.parameter(draw((4 * D, D), D), f"{name}.W_h"),
                    'b': ad.parameter(np.zeros(4 * D), f"{name}.b"),
                }
            else:
                layer = {
                    'W_x': ad.parameter(draw((3 * D, in_dim), in_dim), f"{name}.W_x"),
                    'W_h_gates': ad.parameter(draw((2 * D, D), D), f"{name}.W_h_gates"),
                    'W_h_cand': ad.parameter(draw((D, D), D), f"{name}.W_h_cand"),
                    'b': ad.parameter(np.zeros(3 * D), f"{name}.b"),
                }
            layers.append(layer)
        return cls(cell_kind, input_size, hidden_size, num_layers, layers, prefix)

    def named_parameters(self) -> Dict[str, Node]:
        named = {}
        for k, layer in enumerate(self.layers):
            for key, node in layer.items():
                named[f"{self.prefix}.layer{k}.{key}"] = node
        return named

    def parameters(self) -> List[Node]:
        return list(self.named_parameters().values())

    def topology(self) -> Dict[str, Any]:
        return {
            'cell_kind': self.cell_kind,
            'input_size': self.input_size,
            'hidden_size': self.hidden_size,
            'num_layers': self.num_layers,
            'prefix': self.prefix,
        }


@dataclass
class HiddenStateTensor:
    """h[k][t] (and c[k][t] for LSTM); K x T x D"""
    hidden: List[List[Node]]
    cells: Optional[List[List[Node]]] = None
    _top_matrix: Optional[Node] = None

    @property
    def num_layers(self) -> int:
        return len(self.hidden)

    @property
    def length(self) -> int:
        return len(self.hidden[0])

    def top(self) -> List[Node]:
        return self.hidden[-1]

    def top_matrix(self) -> Node:
        """H^K stacked as a T x D node"""
        if self._top_matrix is None:
            self._top_matrix = ad.stack(self.hidden[-1])
        return self._top_matrix

    def to_array(self) -> np.ndarray:
        return np.array([[h.value for h in layer] for layer in self.hidden])


@dataclass
class AttentionPooler:
    """Soft attention over the last layer with one weight vector shared across steps"""
    weight: Node
    enabled: bool = True

    @classmethod
    def init(cls, hidden_size: int, rng: Optional[np.random.Generator] = None,
             enabled: bool = True, prefix: str = 'pool') -> 'AttentionPooler':
        rng = rng if rng is not None else np.random.default_rng(0)
        w = uniform_init(rng, (hidden_size,), hidden_size)
        return cls(ad.parameter(w, f"{prefix}.W_alpha"), enabled)

    def named_parameters(self) -> Dict[str, Node]:
        return {self.weight.name: self.weight} if self.enabled else {}


# ============================================================================
# CELLS
# ============================================================================

def _layer_of(params: Union[RecurrentParameters, Mapping[str, Node]], k: int = 0) -> Mapping[str, Node]:
    return params.layers[k] if isinstance(params, RecurrentParameters) else params


def lstm_step(x_t, h_prev, c_prev, params) -> Tuple[Node, Node]:
    """Gates ordered input, forget, output, candidate inside the 4D pre-activation"""
    layer = _layer_of(params)
    D = layer['W_h'].shape[1]
    z = ad.matmul(layer['W_x'], x_t) + ad.matmul(layer['W_h'], h_prev) + layer['b']
    i = ad.sigmoid(ad.take(z, slice(0, D)))
    f = ad.sigmoid(ad.take(z, slice(D, 2 * D)))
    o = ad.sigmoid(ad.take(z, slice(2 * D, 3 * D)))
    g = ad.tanh(ad.take(z, slice(3 * D, 4 * D)))
    c_t = f * c_prev + i * g
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


def gru_step(x_t, h_prev, params) -> Node:
    """h_t = (1 - z) * h_prev + z * candidate; reset gate applied before W_h_cand"""
    layer = _layer_of(params)
    D = layer['W_h_cand'].shape[0]
    gx = ad.matmul(layer['W_x'], x_t) + layer['b']
    gh = ad.matmul(layer['W_h_gates'], h_prev)
    z = ad.sigmoid(ad.take(gx, slice(0, D)) + ad.take(gh, slice(0, D)))
    r = ad.sigmoid(ad.take(gx, slice(D, 2 * D)) + ad.take(gh, slice(D, 2 * D)))
    cand = ad.tanh(ad.take(gx, slice(2 * D, 3 * D)) + ad.matmul(layer['W_h_cand'], r * h_prev))
    return (1.0 - z) * h_prev + z * cand


def cell_step(cell_kind: str, x_t, state: Tuple[Node, Optional[Node]],
              layer: Mapping[str, Node]) -> Tuple[Node, Optional[Node]]:
    h_prev, c_prev = state
    if cell_kind == 'lstm':
        return lstm_step(x_t, h_prev, c_prev, layer)
    return gru_step(x_t, h_prev, layer), None


def zero_state(params: RecurrentParameters) -> Tuple[Node, Optional[Node]]:
    D = params.hidden_size
    c0 = ad.constant(np.zeros(D)) if params.cell_kind == 'lstm' else None
    return ad.constant(np.zeros(D)), c0


# ============================================================================
# STACK
# ============================================================================

def as_steps(X: SequenceInput, what: str = 'input sequence') -> List[Node]:
    """Normalise a T x d array, a T x d node or a list of vectors into per-step nodes"""
    if isinstance(X, Node):
        if X.shape is None or len(X.shape) != 2:
            raise ShapeMismatchError('stacked_forward', [X.shape or ()], 'expected a T x d matrix')
        steps = [ad.take(X, t) for t in range(X.shape[0])]
    elif isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ShapeMismatchError('stacked_forward', [X.shape], 'expected a T x d matrix')
        steps = [ad.constant(row) for row in X]
    else:
        steps = [x if isinstance(x, Node) else ad.constant(x) for x in X]
    if not steps:
        raise EmptySequenceError(what)
    return steps


def stacked_forward(X: SequenceInput, params: RecurrentParameters) -> HiddenStateTensor:
    """Layer 1 consumes the inputs, layer k consumes layer k-1; zero initial states"""
    inputs = as_steps(X)
    for t, x in enumerate(inputs):
        if x.shape is not None and x.shape != (params.input_size,):
            raise ShapeMismatchError(
                'stacked_forward', [x.shape, (params.input_size,)], f"input step {t}")

    hidden, cells = [], []
    for layer in params.layers:
        state = zero_state(params)
        hs, cs = [], []
        for x in inputs:
            state = cell_step(params.cell_kind, x, state, layer)
            hs.append(state[0])
            cs.append(state[1])
        hidden.append(hs)
        cells.append(cs)
        inputs = hs
    return HiddenStateTensor(hidden, cells if params.cell_kind == 'lstm' else None)


# ============================================================================
# POOLING
# ============================================================================

def _as_matrix(H_K: Union[Node, Sequence[Node], np.ndarray]) -> Node:
    if isinstance(H_K, Node):
        return H_K
    if isinstance(H_K, np.ndarray):
        return ad.constant(H_K)
    if not H_K:
        raise EmptySequenceError('hidden state sequence')
    return ad.stack(list(H_K))


def attention_pool(H_K, pooler: AttentionPooler) -> Tuple[Node, Node]:
    """alpha = softmax_t(W_alpha . h_t); A = sum_t alpha_t h_t"""
    H = _as_matrix(H_K)
    if H.shape[0] < 1:
        raise EmptySequenceError('hidden state sequence')
    alpha = ad.softmax(ad.matmul(H, pooler.weight))
    return alpha, ad.matmul(alpha, H)


def last_state_pool(H_K) -> Node:
    H = _as_matrix(H_K)
    if H.shape[0] < 1:
        raise EmptySequenceError('hidden state sequence')
    return ad.take(H, -1)


def pool(H_K, pooler: Optional[AttentionPooler]) -> Node:
    if pooler is not None and pooler.enabled:
        return attention_pool(H_K, pooler)[1]
    return last_state_pool(H_K)
