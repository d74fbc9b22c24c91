"""Checkpoint archives shared by every trainer and the pipeline."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from pyretalk.exceptions import MissingCheckpoint, RetalkPipelineException

_LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    step: int
    params: dict
    optimizers: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def manifest(self) -> dict:
        return {'version': FORMAT_VERSION, 'stage': self.stage, 'config_hash': self.config_hash, 'step': self.step}


def save_checkpoint(path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        'manifest': checkpoint.manifest,
        'params': checkpoint.params,
        'optimizers': checkpoint.optimizers,
        'rng': checkpoint.rng,
        'history': checkpoint.history,
        'extra': checkpoint.extra,
    }
    partial = path.with_suffix(path.suffix + '.partial')
    torch.save(archive, partial)
    partial.replace(path)
    _LOGGER.info("Saved %s checkpoint at step %d to '%s'", checkpoint.stage, checkpoint.step, path)
    return path


def load_checkpoint(path, stage: str) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(stage, path)
    archive = torch.load(path, map_location='cpu', weights_only=False)
    manifest = archive.get('manifest', {})
    if manifest.get('version') != FORMAT_VERSION:
        raise RetalkPipelineException(f"Checkpoint '{path}' has unsupported version {manifest.get('version')}")
    if manifest.get('stage') != stage:
        raise RetalkPipelineException(f"Checkpoint '{path}' holds stage '{manifest.get('stage')}', not '{stage}'")
    _LOGGER.info("Loaded %s checkpoint from '%s' (step %d)", stage, path, manifest['step'])
    return Checkpoint(stage=stage, config_hash=manifest['config_hash'], step=manifest['step'],
                      params=archive['params'], optimizers=archive.get('optimizers', {}),
                      rng=archive.get('rng', {}), history=archive.get('history', []),
                      extra=archive.get('extra', {}))


def load_model(model: torch.nn.Module, path, stage: str) -> torch.nn.Module:
    """Load parameters into `model`, freeze it and switch it to eval mode."""
    checkpoint = load_checkpoint(path, stage)
    model.load_state_dict(checkpoint.params)
    model.requires_grad_(False)
    return model.eval()
