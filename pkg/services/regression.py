#!/usr/bin/env python3
"""
mmtranslate/services/regression.py
Sentiment regression head: recurrent stack over a representation, optional
attention pooling, linear score, MAE loss and the frozen/fine-tuned encoder trainer.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services import autodiff as ad
from services.autodiff import Node
from services.errors import EmptySequenceError, LabelRangeError, ShapeMismatchError
from services.metrics import EvaluationReport, evaluate_scores
from services.recurrent import AttentionPooler, RecurrentParameters, pool, stacked_forward, uniform_init
from services.seq2seq import EncodedRepresentation, TranslationModel, encode
from services.training import TrainingLoop, TrainingState

LABEL_MIN = -3.0
LABEL_MAX = 3.0

# (segment id, sequence, label)
RegressionExample = Tuple[str, Any, float]


@dataclass
class RegressionHead:
    rnn: RecurrentParameters
    pooler: AttentionPooler
    W_Ay: Node
    b_y: Node

    @classmethod
    def init(cls, input_size: int, cell_kind: str = 'lstm', hidden_size: int = 64,
             num_layers: int = 1, attention: bool = False,
             rng: Optional[np.random.Generator] = None, zero: bool = False) -> 'RegressionHead':
        rng = rng if rng is not None else np.random.default_rng(0)
        rnn = RecurrentParameters.init(cell_kind, input_size, hidden_size, num_layers, rng,
                                       prefix='regressor', zero=zero)
        pooler = AttentionPooler.init(hidden_size, rng, enabled=attention, prefix='regressor.pool')
        if zero:
            pooler.weight.value[...] = 0.0
        W = np.zeros(hidden_size) if zero else uniform_init(rng, (hidden_size,), hidden_size)
        return cls(rnn, pooler, ad.parameter(W, 'head.W_Ay'), ad.parameter(np.zeros(()), 'head.b_y'))

    @classmethod
    def from_topology(cls, topology: Dict[str, Any]) -> 'RegressionHead':
        rnn = topology['rnn']
        return cls.init(rnn['input_size'], rnn['cell_kind'], rnn['hidden_size'],
                        rnn['num_layers'], topology['attention'], zero=True)

    @property
    def input_size(self) -> int:
        return self.rnn.input_size

    def named_parameters(self) -> Dict[str, Node]:
        named = dict(self.rnn.named_parameters())
        named.update(self.pooler.named_parameters())
        named['head.W_Ay'] = self.W_Ay
        named['head.b_y'] = self.b_y
        return named

    def topology(self) -> Dict[str, Any]:
        return {'model': 'regression', 'rnn': self.rnn.topology(), 'attention': self.pooler.enabled}


def _sequence_of(inputs) -> Any:
    if isinstance(inputs, EncodedRepresentation):
        return inputs.states
    return inputs


def score_node(inputs, head: RegressionHead) -> Node:
    """y = W_Ay . A + b_y, A pooled from the top recurrent layer"""
    seq = _sequence_of(inputs)
    if isinstance(seq, np.ndarray) and seq.ndim == 2 and seq.shape[0] == 0:
        raise EmptySequenceError('regression input')
    H = stacked_forward(seq, head.rnn)
    A = pool(H.top_matrix(), head.pooler)
    return ad.matmul(A, head.W_Ay) + head.b_y


def predict_score(inputs, head: RegressionHead) -> float:
    return float(score_node(inputs, head).value)


def mae_loss_node(predictions: Sequence[Any], labels: Sequence[float]) -> Node:
    if len(predictions) != len(labels):
        raise ShapeMismatchError('mae_loss', [(len(predictions),), (len(labels),)])
    if len(predictions) == 0:
        raise EmptySequenceError('prediction list')
    preds = ad.stack([p if isinstance(p, Node) else ad.constant(p) for p in predictions])
    return ad.mean(ad.abs_(preds - ad.constant(np.asarray(labels, dtype=np.float64))))


def mae_loss(predictions: Sequence[float], labels: Sequence[float]) -> float:
    return float(mae_loss_node(predictions, labels).value)


def check_labels(examples: Sequence[RegressionExample]) -> None:
    for segment_id, _, label in examples:
        if not (math.isfinite(label) and LABEL_MIN <= label <= LABEL_MAX):
            raise LabelRangeError(segment_id, label)


def frozen_representations(examples: Sequence[RegressionExample],
                           encoder: TranslationModel) -> List[RegressionExample]:
    """Encode once with the encoder weights held fixed; the result carries no graph"""
    return [(sid, encode(seq, encoder, sid).states_array(), label) for sid, seq, label in examples]


def train_regressor(head: RegressionHead, examples: Sequence[RegressionExample], settings,
                    seed: int, encoder: Optional[TranslationModel] = None,
                    finetune_encoder: bool = False,
                    validation: Optional[Sequence[RegressionExample]] = None,
                    stage: str = 'regression', **loop_kwargs) -> TrainingState:
    """
    SGD on MAE. examples hold raw sequences; when an encoder is given they are first
    mapped to its state sequence, frozen by default. With finetune_encoder the encoder
    weights join the trained set and every step backpropagates through it.
    """
    examples = list(examples)
    validation = list(validation) if validation else None
    check_labels(examples)
    if validation:
        check_labels(validation)

    params = head.named_parameters()
    if encoder is not None and finetune_encoder:
        params.update(encoder.encoder_parameters())

        def loss_fn(example):
            sid, seq, label = example
            return mae_loss_node([score_node(encode(seq, encoder, sid), head)], [label])
    else:
        if encoder is not None:
            examples = frozen_representations(examples, encoder)
            validation = frozen_representations(validation, encoder) if validation else None

        def loss_fn(example):
            _, seq, label = example
            return mae_loss_node([score_node(seq, head)], [label])

    loop = TrainingLoop(stage, settings, seed)
    return loop.run(params, examples, loss_fn, validation=validation, **loop_kwargs)


def evaluate_head(head: RegressionHead, examples: Sequence[RegressionExample],
                  encoder: Optional[TranslationModel] = None) -> EvaluationReport:
    if encoder is not None:
        examples = frozen_representations(examples, encoder)
    predictions = [predict_score(seq, head) for _, seq, _ in examples]
    return evaluate_scores(predictions, [label for _, _, label in examples])
