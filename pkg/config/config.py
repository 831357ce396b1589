#!/usr/bin/env python3
"""
mmtranslate/config/config.py
Run configuration: JSON file plus CLI overrides, fully defaulted and echoed into
every run directory.
"""

import json
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

from services.errors import SpecError, StorageError

CELL_KINDS = ('lstm', 'gru')


@dataclass
class StageConfig:
    """Hyperparameters of one training stage"""
    cell_kind: str = 'lstm'
    num_layers: int = 1
    hidden_size: int = 64
    learning_rate: float = 0.01
    epochs: int = 50
    beam_width: int = 4
    clip_norm: Optional[float] = None
    attention: bool = False
    accumulate: int = 1
    finetune_encoder: bool = False


@dataclass
class SyntheticConfig:
    """Generator parameters used when no dataset path is given"""
    n_segments: int = 20
    t_min: int = 3
    t_max: int = 8
    dims: List[int] = field(default_factory=lambda: [8, 4, 6])
    vocab_size: int = 12
    coupling: float = 0.9


@dataclass
class RunConfig:
    seed: Optional[int] = None
    spec: Optional[str] = None
    inline_spec: Optional[Dict[str, str]] = None
    dataset: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train_frac: float = 0.6667
    val_frac: float = 0.1515
    output_dir: str = 'runs'
    translation: StageConfig = field(default_factory=StageConfig)
    regression: StageConfig = field(default_factory=StageConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, data: Mapping[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SpecError(f"unknown {where} key(s): {', '.join(unknown)}")
    return cls(**data)


class ConfigService:
    """Loads, validates, hashes and snapshots run configurations"""

    snapshot_name = 'config.json'

    def __init__(self, debug: bool = False):
        self.debug = debug

    def _log(self, message: str) -> None:
        if self.debug:
            print(f"🔍 [DEBUG] {message}")

    def defaults(self) -> RunConfig:
        return RunConfig()

    def from_dict(self, data: Mapping[str, Any]) -> RunConfig:
        data = dict(data)
        nested = {
            'synthetic': SyntheticConfig,
            'translation': StageConfig,
            'regression': StageConfig,
        }
        for key, cls in nested.items():
            if key in data:
                data[key] = _build(cls, data[key] or {}, key)
        return _build(RunConfig, data, 'config')

    def read_file(self, path: Union[str, Path]) -> Dict[str, Any]:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except OSError as e:
            raise StorageError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise SpecError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise SpecError(f"config {path} must hold a JSON object")
        return data

    def load(self, path: Optional[Union[str, Path]] = None,
             overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
        """
        File values first, then overrides. Dotted override keys address stage
        blocks, e.g. {'translation.epochs': 5}. None-valued overrides are ignored.
        """
        data = self.read_file(path) if path else {}
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            target = data
            parts = key.split('.')
            for part in parts[:-1]:
                target = target.setdefault(part, {})
            target[parts[-1]] = value
            self._log(f"override {key} = {value!r}")
        config = self.from_dict(data)
        self.validate(config)
        return config

    def validate(self, config: RunConfig, known_specs: Optional[Iterable[str]] = None) -> None:
        if config.seed is None:
            raise SpecError("a seed is required (--seed)")
        if not isinstance(config.seed, int) or config.seed < 0:
            raise SpecError(f"seed must be a non-negative integer, got {config.seed!r}")
        for name in ('train_frac', 'val_frac'):
            value = getattr(config, name)
            if not 0.0 < value < 1.0:
                raise SpecError(f"{name} must lie in (0, 1), got {value}")
        for stage in ('translation', 'regression'):
            self._validate_stage(stage, getattr(config, stage))
        syn = config.synthetic
        if syn.n_segments < 1 or syn.t_min < 1 or syn.t_max < syn.t_min:
            raise SpecError(f"synthetic sizes invalid: n={syn.n_segments}, T in [{syn.t_min}, {syn.t_max}]")
        if len(syn.dims) != 3 or min(syn.dims) < 1:
            raise SpecError(f"synthetic dims must be three positive sizes (T, A, V), got {syn.dims}")
        if not 0.0 <= syn.coupling <= 1.0:
            raise SpecError(f"synthetic coupling must lie in [0, 1], got {syn.coupling}")
        if known_specs is not None and config.spec is not None and config.spec not in set(known_specs):
            raise SpecError(f"unknown pipeline spec id '{config.spec}'")

    def _validate_stage(self, stage: str, cfg: StageConfig) -> None:
        if cfg.cell_kind not in CELL_KINDS:
            raise SpecError(f"{stage}.cell_kind must be one of {CELL_KINDS}, got '{cfg.cell_kind}'")
        checks = [
            ('num_layers', cfg.num_layers >= 1),
            ('hidden_size', cfg.hidden_size >= 1),
            ('learning_rate', cfg.learning_rate >= 0),
            ('epochs', cfg.epochs >= 0),
            ('beam_width', cfg.beam_width >= 1),
            ('accumulate', cfg.accumulate >= 1),
            ('clip_norm', cfg.clip_norm is None or cfg.clip_norm > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise SpecError(f"{stage}.{name} out of range: {getattr(cfg, name)!r}")

    def canonical_json(self, config: RunConfig) -> str:
        return json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))

    def config_hash(self, config: RunConfig) -> str:
        return hashlib.sha1(self.canonical_json(config).encode()).hexdigest()[:16]

    def save_snapshot(self, run_dir: Union[str, Path], config: RunConfig) -> Path:
        """Write the fully defaulted config into the run directory"""
        run_dir = Path(run_dir)
        path = run_dir / self.snapshot_name
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        except OSError as e:
            raise StorageError(f"cannot write config snapshot {path}: {e}")
        return path

    def load_snapshot(self, run_dir: Union[str, Path]) -> Optional[RunConfig]:
        path = Path(run_dir) / self.snapshot_name
        if not path.exists():
            return None
        return self.from_dict(self.read_file(path))


# Global instance
config_service = ConfigService()
