#!/usr/bin/env python3
"""
mmtranslate/services/training.py
Epoch loop shared by the translation and regression stages: seeded per-epoch
shuffling, SGD with optional accumulation and clipping, per-epoch loss curve,
best-score retention and resumable state saved at every epoch boundary.
"""

import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from services import autodiff as ad
from services.autodiff import Node
from services.errors import NonFiniteError, SpecError, TrainingInterrupted


@dataclass
class TrainingState:
    """Everything needed to continue a stage from an epoch boundary"""
    stage: str
    epoch: int = 0
    curve: List[Dict[str, Any]] = field(default_factory=list)
    best_score: Optional[float] = None
    best_epoch: int = 0
    completed: bool = False
    best_params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def train_losses(self) -> List[float]:
        return [row['train'] for row in self.curve]

    @property
    def validation_losses(self) -> List[Optional[float]]:
        return [row['validation'] for row in self.curve]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-safe part; best_params travel as checkpoint arrays"""
        return {
            'stage': self.stage,
            'epoch': self.epoch,
            'curve': [dict(row) for row in self.curve],
            'best_score': self.best_score,
            'best_epoch': self.best_epoch,
            'completed': self.completed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any],
                  best_params: Optional[Dict[str, np.ndarray]] = None) -> 'TrainingState':
        return cls(
            stage=data['stage'],
            epoch=int(data['epoch']),
            curve=[dict(row) for row in data.get('curve', [])],
            best_score=data.get('best_score'),
            best_epoch=int(data.get('best_epoch', 0)),
            completed=bool(data.get('completed', False)),
            best_params=dict(best_params or {}),
        )


def epoch_rng(seed: int, stage: str, epoch: int) -> np.random.Generator:
    """Shuffling order depends only on (seed, stage, epoch), so resumes replay it"""
    return np.random.default_rng([seed, zlib.crc32(stage.encode('utf-8')), epoch])


class TrainingLoop:
    """Runs one stage. Examples are tuples whose first item is the segment id."""

    # Switched on by the CLI's --verbose flag
    verbose = False

    def __init__(self, stage: str, settings, seed: int, debug: Optional[bool] = None):
        self.stage = stage
        self.settings = settings
        self.seed = seed
        self.debug = TrainingLoop.verbose if debug is None else debug

    def _log(self, message: str) -> None:
        """Debug logging"""
        if self.debug:
            print(f"🔍 [DEBUG] {message}")

    def mean_loss(self, examples: Sequence[Any], loss_fn: Callable[[Any], Node]) -> float:
        return float(np.mean([float(loss_fn(ex).value) for ex in examples]))

    def _step(self, params: Mapping[str, Node], pending: int) -> None:
        norm = ad.sgd_step(params, self.settings.learning_rate / pending, self.settings.clip_norm)
        self._log(f"[{self.stage}] step over {pending} segment(s), grad norm {norm:.4g}")

    def _finalize(self, params: Mapping[str, Node], state: TrainingState) -> None:
        for name, best in state.best_params.items():
            if name in params:
                params[name].value[...] = best
        state.completed = True
        self._log(f"[{self.stage}] restored epoch {state.best_epoch} (score {state.best_score})")

    def run(self, params: Mapping[str, Node], examples: Sequence[Any],
            loss_fn: Callable[[Any], Node], validation: Optional[Sequence[Any]] = None,
            initial_state: Optional[TrainingState] = None,
            save_state_callback: Optional[Callable[[TrainingState], None]] = None,
            halt_after_epoch: Optional[int] = None) -> TrainingState:
        if not examples:
            raise SpecError(f"stage '{self.stage}' has an empty training set")
        epochs = int(self.settings.epochs)
        accumulate = max(1, int(getattr(self.settings, 'accumulate', 1)))
        state = initial_state or TrainingState(self.stage)
        if state.completed:
            self._log(f"[{self.stage}] already completed, skipping")
            return state
        if state.epoch:
            print(f"🔄 Resuming stage '{self.stage}' after epoch {state.epoch}")

        with tqdm(total=epochs, initial=state.epoch, unit="epoch", desc=self.stage, disable=None) as pbar:
            for epoch in range(state.epoch + 1, epochs + 1):
                order = epoch_rng(self.seed, self.stage, epoch).permutation(len(examples))
                pending = 0
                for idx in order:
                    example = examples[idx]
                    try:
                        ad.backward(loss_fn(example))
                    except NonFiniteError as e:
                        raise NonFiniteError(
                            f"stage '{self.stage}' epoch {epoch} segment '{example[0]}'", e.message)
                    pending += 1
                    if pending == accumulate:
                        self._step(params, pending)
                        pending = 0
                if pending:
                    self._step(params, pending)

                train_loss = self.mean_loss(examples, loss_fn)
                val_loss = self.mean_loss(validation, loss_fn) if validation else None
                score = val_loss if val_loss is not None else train_loss
                state.curve.append({'epoch': epoch, 'train': train_loss, 'validation': val_loss})
                if state.best_score is None or score < state.best_score:
                    state.best_score = score
                    state.best_epoch = epoch
                    state.best_params = {name: np.array(p.value) for name, p in params.items()}
                state.epoch = epoch
                self._log(f"[{self.stage}] epoch {epoch}: train {train_loss:.6g}, validation {val_loss}")

                if epoch == epochs:
                    self._finalize(params, state)
                if save_state_callback:
                    save_state_callback(state)
                pbar.set_postfix(loss=f"{train_loss:.4g}")
                pbar.update(1)

                if halt_after_epoch is not None and epoch >= halt_after_epoch and not state.completed:
                    raise TrainingInterrupted(self.stage, epoch)

        if not state.completed:
            self._finalize(params, state)
            if save_state_callback:
                save_state_callback(state)
        return state
