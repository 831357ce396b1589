#!/usr/bin/env python3
"""
mmtranslate/services/checkpoint.py
Versioned checkpoint container: magic, a length-prefixed sorted JSON header
(topology, training state, config hash, array index) and little-endian float64
array payloads ordered by parameter name.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from services.autodiff import Node
from services.errors import ShapeMismatchError, StorageError
from services.training import TrainingState

MAGIC = b'MMTCKPT1'
FORMAT_VERSION = 1
BEST_PREFIX = 'best/'


@dataclass
class Checkpoint:
    topology: Dict[str, Any]
    arrays: Dict[str, np.ndarray]
    training_state: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ''
    format_version: int = FORMAT_VERSION

    def parameters(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith(BEST_PREFIX)}

    def best_parameters(self) -> Dict[str, np.ndarray]:
        n = len(BEST_PREFIX)
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(BEST_PREFIX)}

    def state(self) -> Optional[TrainingState]:
        if not self.training_state:
            return None
        return TrainingState.from_dict(self.training_state, self.best_parameters())


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    index = []
    payload = []
    offset = 0
    for name in sorted(checkpoint.arrays):
        arr = np.ascontiguousarray(checkpoint.arrays[name], dtype='<f8')
        index.append({'name': name, 'shape': list(arr.shape), 'offset': offset, 'count': int(arr.size)})
        payload.append(arr.tobytes())
        offset += arr.size * 8
    header = {
        'format_version': checkpoint.format_version,
        'topology': checkpoint.topology,
        'training_state': checkpoint.training_state,
        'config_hash': checkpoint.config_hash,
        'arrays': index,
    }
    raw = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<Q', len(raw)) + raw + b''.join(payload)


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise StorageError("not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(blob) < start:
        raise StorageError("truncated checkpoint header")
    (size,) = struct.unpack('<Q', blob[len(MAGIC):start])
    try:
        header = json.loads(blob[start:start + size].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"corrupt checkpoint header: {e}")
    if header.get('format_version') != FORMAT_VERSION:
        raise StorageError(f"unsupported checkpoint version {header.get('format_version')}")
    body = start + size
    arrays = {}
    for entry in header['arrays']:
        begin = body + entry['offset']
        end = begin + entry['count'] * 8
        if end > len(blob):
            raise StorageError(f"truncated checkpoint payload for '{entry['name']}'")
        values = np.frombuffer(blob[begin:end], dtype='<f8').astype(np.float64)
        arrays[entry['name']] = values.reshape(entry['shape'])
    return Checkpoint(header['topology'], arrays, header['training_state'],
                      header['config_hash'], header['format_version'])


class CheckpointService:
    """Reads and writes checkpoint files"""

    def __init__(self, debug: bool = False):
        self.debug = debug

    def _log(self, message: str) -> None:
        if self.debug:
            print(f"🔍 [DEBUG] {message}")

    def snapshot(self, topology: Dict[str, Any], params: Mapping[str, Node],
                 state: Optional[TrainingState] = None, config_hash: str = '') -> Checkpoint:
        arrays = {name: np.array(node.value) for name, node in params.items()}
        training_state = {}
        if state is not None:
            training_state = state.to_dict()
            arrays.update({BEST_PREFIX + k: np.array(v) for k, v in state.best_params.items()})
        return Checkpoint(topology, arrays, training_state, config_hash)

    def save(self, path: Union[str, Path], checkpoint: Checkpoint) -> Path:
        """Atomic write through a temp file in the same directory"""
        path = Path(path)
        tmp = path.with_name(path.name + '.tmp')
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, 'wb') as f:
                f.write(encode_checkpoint(checkpoint))
            os.replace(tmp, path)
        except OSError as e:
            raise StorageError(f"cannot write checkpoint {path}: {e}")
        self._log(f"saved {len(checkpoint.arrays)} arrays to {path}")
        return path

    def load(self, path: Union[str, Path]) -> Checkpoint:
        path = Path(path)
        try:
            blob = path.read_bytes()
        except OSError as e:
            raise StorageError(f"cannot read checkpoint {path}: {e}")
        checkpoint = decode_checkpoint(blob)
        self._log(f"loaded {len(checkpoint.arrays)} arrays from {path}")
        return checkpoint

    def restore(self, params: Mapping[str, Node], checkpoint: Checkpoint) -> None:
        """Copy saved values into existing parameter nodes in place"""
        saved = checkpoint.parameters()
        missing = sorted(set(params) - set(saved))
        if missing:
            raise StorageError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for name, node in params.items():
            if node.value.shape != saved[name].shape:
                raise ShapeMismatchError('restore', [node.value.shape, saved[name].shape], name)
            node.value[...] = saved[name]


# Global instance
checkpoint_service = CheckpointService()
