"""
Tests for services/regression.py
"""

import numpy as np
import pytest

from services import autodiff as ad
from services.errors import EmptySequenceError, LabelRangeError, ShapeMismatchError
from services.recurrent import stacked_forward
from services.regression import (
    RegressionHead, evaluate_head, mae_loss, mae_loss_node, predict_score, score_node,
    train_regressor,
)
from services.seq2seq import TranslationModel, encode

from conftest import spread_parameters


def test_constant_head_returns_bias(rng):
    head = RegressionHead.init(3, hidden_size=4, rng=rng)
    head.W_Ay.value[...] = 0.0
    head.b_y.value[...] = 1.5
    assert predict_score(rng.normal(size=(5, 3)), head) == 1.5
    zero = RegressionHead.init(3, hidden_size=4, zero=True)
    zero.b_y.value[...] = -0.25
    assert predict_score(rng.normal(size=(2, 3)), zero) == -0.25


@pytest.mark.parametrize('attention', [False, True])
def test_score_matches_pool_then_dot(attention, rng):
    head = RegressionHead.init(3, 'gru', 4, 2, attention, rng)
    head.b_y.value[...] = 0.3
    X = rng.normal(size=(4, 3))
    H = stacked_forward(X, head.rnn).top_matrix().value
    if attention:
        logits = H @ head.pooler.weight.value
        alpha = np.exp(logits - logits.max())
        pooled = (alpha / alpha.sum()) @ H
    else:
        pooled = H[-1]
    assert predict_score(X, head) == pytest.approx(pooled @ head.W_Ay.value + 0.3, abs=1e-12)


def test_pooling_modes_coincide_for_single_step(rng):
    head = RegressionHead.init(3, hidden_size=4, rng=rng)
    X = rng.normal(size=(1, 3))
    last = predict_score(X, head)
    head.pooler.enabled = True
    assert predict_score(X, head) == pytest.approx(last, abs=1e-12)


def test_score_rejects_empty_input():
    with pytest.raises(EmptySequenceError):
        score_node(np.zeros((0, 3)), RegressionHead.init(3, hidden_size=2))


def test_mae_values():
    assert mae_loss([0.5, -1.0], [0.5, -1.0]) == 0.0
    assert mae_loss([1.0, -1.0], [0.0, 0.0]) == 1.0
    assert mae_loss([2.5], [-3.0]) == 5.5


def test_mae_errors():
    with pytest.raises(ShapeMismatchError):
        mae_loss([1.0], [1.0, 2.0])
    with pytest.raises(EmptySequenceError):
        mae_loss([], [])


def test_mae_gradient_is_sign_away_from_kink():
    preds = ad.parameter(np.array([0.7, -2.0]), 'preds')
    loss = mae_loss_node([ad.take(preds, 0), ad.take(preds, 1)], [0.0, 1.0])
    grads = ad.backward(loss)
    assert np.allclose(grads[preds], [0.5, -0.5])
    assert ad.grad_check(loss, [preds]) < 1e-9


def test_head_gradients(rng):
    head = RegressionHead.init(3, 'lstm', 3, 1, True, rng)
    spread_parameters(head.named_parameters().values(), rng)
    X = rng.uniform(0.3, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    # label one unit away keeps the abs node off its kink
    label = predict_score(X, head) + 1.0
    loss = mae_loss_node([score_node(X, head)], [label])
    assert ad.grad_check(loss, head.named_parameters().values()) < 1e-6


def test_labels_outside_range_name_the_segment(make_stage, rng):
    head = RegressionHead.init(3, hidden_size=2)
    with pytest.raises(LabelRangeError) as err:
        train_regressor(head, [('ok', rng.normal(size=(2, 3)), 1.0), ('bad', rng.normal(size=(2, 3)), 3.5)],
                        make_stage(), seed=0)
    assert 'bad' in err.value.message


def test_zero_learning_rate_leaves_parameters_unchanged(make_stage, rng):
    head = RegressionHead.init(3, hidden_size=3, rng=rng)
    before = {k: p.value.copy() for k, p in head.named_parameters().items()}
    train_regressor(head, [('a', rng.normal(size=(3, 3)), 1.0)], make_stage(learning_rate=0.0), seed=0)
    for name, p in head.named_parameters().items():
        assert np.array_equal(p.value, before[name])


def test_single_segment_is_memorized(make_stage, rng):
    head = RegressionHead.init(3, hidden_size=8, rng=np.random.default_rng(2))
    example = ('only', rng.normal(size=(4, 3)), 1.7)
    state = train_regressor(head, [example], make_stage(epochs=300, learning_rate=0.01), seed=0)
    assert state.best_score < 0.05
    assert abs(predict_score(example[1], head) - 1.7) < 0.05


def _encoder(rng):
    return TranslationModel.init(3, 2, 'continuous', 'lstm', 4, 1, False, rng)


def test_frozen_encoder_is_untouched(make_stage, rng):
    encoder = _encoder(rng)
    before = {k: p.value.copy() for k, p in encoder.named_parameters().items()}
    head = RegressionHead.init(4, hidden_size=3, rng=rng)
    examples = [(f's{i}', rng.normal(size=(3, 3)), float(i) - 1.0) for i in range(3)]
    train_regressor(head, examples, make_stage(epochs=3), seed=0, encoder=encoder)
    for name, p in encoder.named_parameters().items():
        assert np.array_equal(p.value, before[name])


def test_finetuning_moves_encoder(make_stage, rng):
    encoder = _encoder(rng)
    before = encoder.encoder.layers[0]['W_x'].value.copy()
    head = RegressionHead.init(4, hidden_size=3, rng=rng)
    examples = [(f's{i}', rng.normal(size=(3, 3)), 2.0) for i in range(3)]
    train_regressor(head, examples, make_stage(epochs=2), seed=0, encoder=encoder, finetune_encoder=True)
    assert not np.array_equal(encoder.encoder.layers[0]['W_x'].value, before)


def test_best_validation_epoch_is_retained(make_stage, rng):
    head = RegressionHead.init(3, hidden_size=4, rng=rng)
    train = [(f't{i}', rng.normal(size=(3, 3)), float(rng.uniform(-3, 3))) for i in range(4)]
    val = [(f'v{i}', rng.normal(size=(3, 3)), float(rng.uniform(-3, 3))) for i in range(3)]
    state = train_regressor(head, train, make_stage(epochs=6, learning_rate=0.3), seed=1, validation=val)
    recorded = [v for v in state.validation_losses if v is not None]
    assert len(recorded) == 6
    assert state.best_score == min(recorded)
    retained = mae_loss([predict_score(seq, head) for _, seq, _ in val], [y for _, _, y in val])
    assert retained == pytest.approx(min(recorded), abs=1e-12)


def test_evaluate_head_through_encoder(rng):
    encoder = _encoder(rng)
    head = RegressionHead.init(4, hidden_size=3, rng=rng)
    examples = [(f's{i}', rng.normal(size=(2, 3)), y) for i, y in enumerate([-2.0, 0.0, 1.0])]
    report = evaluate_head(head, examples, encoder)
    predictions = [predict_score(encode(seq, encoder), head) for _, seq, _ in examples]
    assert report.segments == 3
    assert report.mae == pytest.approx(mae_loss(predictions, [-2.0, 0.0, 1.0]), abs=1e-12)
