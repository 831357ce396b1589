"""
Shared fixtures; the repo is a flat layout, so its root goes on sys.path
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config.config import RunConfig, StageConfig, SyntheticConfig  # noqa: E402
from services.data import Dataset, generate_synthetic, synthetic_header  # noqa: E402

DIMS = (5, 3, 4)
VOCAB = 7


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_segments():
    return generate_synthetic(8, (3, 5), DIMS, VOCAB, coupling=0.9, seed=7)


@pytest.fixture
def tiny_dataset(tiny_segments):
    return Dataset(synthetic_header(DIMS, VOCAB), tiny_segments)


def small_stage(**changes) -> StageConfig:
    values = dict(hidden_size=6, epochs=2, learning_rate=0.05, clip_norm=5.0)
    values.update(changes)
    return StageConfig(**values)


@pytest.fixture
def small_config(tmp_path):
    return RunConfig(
        seed=3,
        synthetic=SyntheticConfig(n_segments=8, t_min=3, t_max=5, dims=list(DIMS), vocab_size=VOCAB),
        output_dir=str(tmp_path / 'runs'),
        translation=small_stage(),
        regression=small_stage(),
    )


@pytest.fixture
def make_stage():
    return small_stage


def spread_parameters(params, rng, low=0.3, high=0.8):
    """Random-sign magnitudes in [low, high] so no gradient path starts near zero"""
    for p in params:
        signs = rng.choice([-1.0, 1.0], size=p.value.shape)
        p.value[...] = signs * rng.uniform(low, high, size=p.value.shape)
