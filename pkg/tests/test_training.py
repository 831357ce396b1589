"""
Tests for services/training.py
"""

import numpy as np
import pytest

from services import autodiff as ad
from services.errors import NonFiniteError, SpecError, TrainingInterrupted
from services.training import TrainingLoop, TrainingState, epoch_rng


def quadratic_problem(target=2.0):
    """One scalar parameter p, loss (p - target)^2 per example"""
    p = ad.parameter(np.zeros(()), 'p')

    def loss_fn(example):
        diff = p - ad.constant(example[1])
        return diff * diff

    examples = [(f'e{i}', target) for i in range(3)]
    return {'p': p}, examples, loss_fn


def test_epoch_rng_is_a_function_of_seed_stage_epoch():
    a = epoch_rng(1, 'regression', 4).permutation(10)
    assert np.array_equal(a, epoch_rng(1, 'regression', 4).permutation(10))
    assert not np.array_equal(a, epoch_rng(1, 'translation-1', 4).permutation(10))


def test_converges_on_quadratic(make_stage):
    params, examples, loss_fn = quadratic_problem()
    state = TrainingLoop('q', make_stage(epochs=40, learning_rate=0.1, clip_norm=None), seed=0).run(
        params, examples, loss_fn)
    assert abs(float(params['p'].value) - 2.0) < 1e-3
    assert state.completed and state.best_epoch == 40
    assert state.train_losses == sorted(state.train_losses, reverse=True)


def test_empty_training_set_is_rejected(make_stage):
    params, _, loss_fn = quadratic_problem()
    with pytest.raises(SpecError):
        TrainingLoop('q', make_stage(), seed=0).run(params, [], loss_fn)


def test_zero_epochs_completes_without_steps(make_stage):
    params, examples, loss_fn = quadratic_problem()
    saved = []
    state = TrainingLoop('q', make_stage(epochs=0), seed=0).run(
        params, examples, loss_fn, save_state_callback=saved.append)
    assert state.completed and state.curve == []
    assert float(params['p'].value) == 0.0
    assert saved and saved[-1].completed


def test_accumulation_averages_before_stepping(make_stage):
    params, examples, loss_fn = quadratic_problem()
    TrainingLoop('q', make_stage(epochs=1, learning_rate=0.1, clip_norm=None, accumulate=3), seed=0).run(
        params, examples, loss_fn)
    # one step with the mean gradient -4 at p = 0
    assert float(params['p'].value) == pytest.approx(0.4, abs=1e-12)


def test_best_parameters_restored_at_the_end(make_stage):
    params, examples, loss_fn = quadratic_problem()
    validation = [('v', 0.0)]
    state = TrainingLoop('q', make_stage(epochs=5, learning_rate=0.1, clip_norm=None), seed=0).run(
        params, examples, loss_fn, validation=validation)
    # validation prefers p near 0, which is the first epoch
    assert state.best_epoch == 1
    assert float(params['p'].value) == pytest.approx(float(state.best_params['p']), abs=0)


def test_callback_sees_every_epoch(make_stage):
    params, examples, loss_fn = quadratic_problem()
    seen = []
    TrainingLoop('q', make_stage(epochs=3), seed=0).run(
        params, examples, loss_fn, save_state_callback=lambda s: seen.append((s.epoch, s.completed)))
    assert seen == [(1, False), (2, False), (3, True)]


def test_halt_then_resume_matches_uninterrupted(make_stage):
    settings = make_stage(epochs=4, learning_rate=0.05, clip_norm=None)
    params, examples, loss_fn = quadratic_problem()
    full = TrainingLoop('q', settings, seed=3).run(params, examples, loss_fn)
    expected = float(params['p'].value)

    params, examples, loss_fn = quadratic_problem()
    snapshots = []
    with pytest.raises(TrainingInterrupted) as err:
        TrainingLoop('q', settings, seed=3).run(params, examples, loss_fn,
                                                 save_state_callback=snapshots.append, halt_after_epoch=2)
    assert err.value.exit_code == 2
    saved = snapshots[-1]
    restored = TrainingState.from_dict(saved.to_dict(), saved.best_params)
    resumed = TrainingLoop('q', settings, seed=3).run(params, examples, loss_fn, initial_state=restored)
    assert float(params['p'].value) == expected
    assert resumed.train_losses == full.train_losses


def test_completed_state_is_skipped(make_stage):
    params, examples, loss_fn = quadratic_problem()
    done = TrainingState('q', epoch=2, completed=True)
    assert TrainingLoop('q', make_stage(), seed=0).run(params, examples, loss_fn, initial_state=done) is done
    assert float(params['p'].value) == 0.0


def test_non_finite_loss_names_the_segment(make_stage):
    p = ad.parameter(np.zeros(()), 'p')

    def loss_fn(example):
        return p * ad.constant(example[1])

    with pytest.raises(NonFiniteError) as err:
        TrainingLoop('q', make_stage(), seed=0).run({'p': p}, [('bad', np.inf)], loss_fn)
    assert "'bad'" in err.value.message and 'epoch 1' in err.value.message
    assert float(p.value) == 0.0


def test_state_dict_round_trip():
    state = TrainingState('regression', epoch=3, curve=[{'epoch': 1, 'train': 0.5, 'validation': None}],
                          best_score=0.5, best_epoch=1)
    data = state.to_dict()
    assert 'best_params' not in data
    again = TrainingState.from_dict(data)
    assert again == state
