import logging

import cv2
import numpy as np

from pyretalk.config import STAGES, PipelineConfig
from pyretalk.providers import FaceParse, ParsingProvider, RestorationProvider

logger = logging.getLogger('fake_providers')

TINY = {
    'dnet': {'latent_dim': 16, 'base_channels': 8, 'max_channels': 32, 'batch_size': 2,
             'phase1_iterations': 1, 'phase2_iterations': 1},
    'lnet': {'base_channels': 8, 'feature_channels': 32, 'audio_dim': 32, 'attention_dim': 16,
             'ffc_blocks_per_stage': 1, 'batch_size': 2, 'iterations': 2},
    'sync': {'embed_dim': 32, 'base_channels': 8, 'batch_size': 4, 'iterations': 2},
    'enet': {'identity_dim': 32, 'identity_channels': 4, 'style_channels': 8, 'disc_channels': 8,
             'batch_size': 1, 'iterations': 1},
    'training': {'checkpoint_every': 1000, 'log_every': 1},
    'toy': {'clips': 2, 'seconds': 1.0},
}


def tiny_config(directory, **overrides) -> PipelineConfig:
    """Narrow networks with every checkpoint under `directory`."""
    checkpoints = {stage: str(directory / f"{stage}.ckpt") for stage in STAGES}
    config = PipelineConfig.from_preset('toy', seed=0, checkpoints=checkpoints, **TINY)
    return config.replace(**overrides) if overrides else config


class SharpeningRestoration(RestorationProvider):
    """Unsharp mask; keeps the input size."""

    provider_id = 'sharpen'

    def __init__(self, amount: float = 1.5):
        self.amount = amount
        self.calls = 0

    def restore(self, image):
        self.calls += 1
        blurred = cv2.GaussianBlur(image, (0, 0), 1.0)
        return np.clip(image + self.amount * (image - blurred), 0.0, 1.0)


class FailingProvider:
    """Stands in for any provider kind and fails like a broken third-party model."""

    provider_id = 'failing'

    def _fail(self, *args, **kwargs):
        logger.debug("failing provider called")
        raise RuntimeError('model exploded')

    detect = extract = restore = parse = embed = features = _fail


class DisagreeingParser(ParsingProvider):
    """Masks the upper-left quadrant, nowhere near the mouth."""

    provider_id = 'disagreeing'

    def parse(self, frame, landmarks=None):
        height, width = frame.shape[:2]
        mask = np.zeros((height, width), np.float32)
        mask[:height // 2, :width // 2] = 1.0
        return FaceParse(mask=mask, regions={})
