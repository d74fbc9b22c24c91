"""Configuration schemas, presets and the validated PipelineConfig."""
import copy
import hashlib
import json
import logging
import os
from pathlib import Path

import voluptuous as vol

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from pyretalk.exceptions import RetalkConfigException

_LOGGER = logging.getLogger(__name__)

ENV_CACHE = 'RETALK_CACHE'
DEFAULT_CACHE = '~/.cache/retalk'

CONF_SEED = 'seed'
CONF_EXPERIMENTAL = 'experimental'
CONF_RESOLUTIONS = 'resolutions'
CONF_DNET = 'dnet'
CONF_LNET = 'lnet'
CONF_ENET = 'enet'
CONF_SYNC = 'sync'
CONF_GEOMETRY = 'geometry'
CONF_COMPOSITING = 'compositing'
CONF_PROVIDERS = 'providers'
CONF_MODE = 'mode'
CONF_TOY = 'toy'
CONF_CHECKPOINTS = 'checkpoints'
CONF_TRAINING = 'training'

RESOLUTIONS = {'dnet': 256, 'lnet': 96, 'enet': 384}

REENACT_ONE_SHOT = 'one_shot'
REENACT_VIDEO_TO_VIDEO = 'video_to_video'

STAGES = ('syncnet', 'dnet', 'lnet', 'enet')

POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
NON_NEGATIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=0))
NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0))
LEARNING_RATE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
RATIO = vol.All(vol.Coerce(float), vol.Range(min=0, max=1))


def _odd(value):
    if value % 2 != 1:
        raise vol.Invalid('must be odd')
    return value


def _quality_range(value):
    low, high = (int(v) for v in value)
    if not 10 <= low <= high <= 100:
        raise vol.Invalid('quality range must satisfy 10 <= low <= high <= 100')
    return [low, high]


DNET_SCHEMA = vol.Schema({
    vol.Optional('latent_dim', default=256): POSITIVE_INT,
    vol.Optional('coeff_window', default=27): vol.All(POSITIVE_INT, _odd),
    vol.Optional('base_channels', default=64): POSITIVE_INT,
    vol.Optional('max_channels', default=256): POSITIVE_INT,
    vol.Optional('lambda_c', default=1.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_s', default=250.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lr', default=1e-4): LEARNING_RATE,
    vol.Optional('batch_size', default=4): POSITIVE_INT,
    vol.Optional('phase1_iterations', default=200000): NON_NEGATIVE_INT,
    vol.Optional('phase2_iterations', default=200000): NON_NEGATIVE_INT,
})

LNET_SCHEMA = vol.Schema({
    vol.Optional('base_channels', default=64): POSITIVE_INT,
    vol.Optional('feature_channels', default=256): POSITIVE_INT,
    vol.Optional('audio_dim', default=256): POSITIVE_INT,
    vol.Optional('attention_dim', default=256): POSITIVE_INT,
    vol.Optional('ffc_blocks_per_stage', default=9): POSITIVE_INT,
    vol.Optional('cross_attention', default=True): vol.Boolean(),
    vol.Optional('lambda_l1', default=1.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_p', default=1.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_sync', default=0.3): NON_NEGATIVE_FLOAT,
    vol.Optional('lr', default=1e-4): LEARNING_RATE,
    vol.Optional('batch_size', default=4): POSITIVE_INT,
    vol.Optional('iterations', default=400000): NON_NEGATIVE_INT,
})

SYNC_SCHEMA = vol.Schema({
    vol.Optional('embed_dim', default=512): POSITIVE_INT,
    vol.Optional('base_channels', default=32): POSITIVE_INT,
    vol.Optional('max_offset', default=15): POSITIVE_INT,
    vol.Optional('negative_min_offset', default=5): POSITIVE_INT,
    vol.Optional('lr', default=1e-4): LEARNING_RATE,
    vol.Optional('batch_size', default=16): POSITIVE_INT,
    vol.Optional('iterations', default=400000): NON_NEGATIVE_INT,
})

ENET_SCHEMA = vol.Schema({
    vol.Optional('identity_dim', default=512): POSITIVE_INT,
    vol.Optional('identity_channels', default=32): POSITIVE_INT,
    vol.Optional('style_channels', default=64): POSITIVE_INT,
    vol.Optional('disc_channels', default=64): POSITIVE_INT,
    vol.Optional('lambda_l1', default=0.2): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_p', default=1.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_adv', default=100.0): NON_NEGATIVE_FLOAT,
    vol.Optional('lambda_id', default=0.4): NON_NEGATIVE_FLOAT,
    vol.Optional('jpeg_quality', default=[30, 95]): _quality_range,
    vol.Optional('lr', default=1e-5): LEARNING_RATE,
    vol.Optional('batch_size', default=2): POSITIVE_INT,
    vol.Optional('iterations', default=300000): NON_NEGATIVE_INT,
})

GEOMETRY_SCHEMA = vol.Schema({
    vol.Optional('expression_dim', default=64): POSITIVE_INT,
    vol.Optional('pose_dim', default=6): POSITIVE_INT,
    vol.Optional('landmark_count', default=68): POSITIVE_INT,
    vol.Optional('smooth_window', default=7): vol.All(POSITIVE_INT, _odd),
    vol.Optional('smooth_polyorder', default=2): NON_NEGATIVE_INT,
})

COMPOSITING_SCHEMA = vol.Schema({
    vol.Optional('pyramid_levels', default=4): POSITIVE_INT,
    vol.Optional('teeth_inflate', default=0.2): NON_NEGATIVE_FLOAT,
    vol.Optional('debug_dir', default=None): vol.Any(None, str),
})

PROVIDERS_SCHEMA = vol.Schema({
    vol.Optional('features', default='random_pyramid'): str,
    vol.Optional('identity', default='random_projection'): str,
    vol.Optional('restoration', default='identity'): str,
    vol.Optional('dataset_restoration', default='bicubic'): str,
    vol.Optional('parser', default='ellipse'): str,
    vol.Optional('landmarks', default='toy'): str,
    vol.Optional('coefficients', default='toy'): str,
})

MODE_SCHEMA = vol.Schema({
    vol.Optional('reenact', default=REENACT_VIDEO_TO_VIDEO): vol.In([REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO]),
    vol.Optional('template', default='neutral'): str,
    vol.Optional('target_template', default='smile'): str,
    vol.Optional('interpolation_ratio', default=None): vol.Any(None, RATIO),
    vol.Optional('use_dnet', default=True): vol.Boolean(),
    vol.Optional('use_enet', default=True): vol.Boolean(),
})

TOY_SCHEMA = vol.Schema({
    vol.Optional('clips', default=10): POSITIVE_INT,
    vol.Optional('seconds', default=4.0): vol.All(vol.Coerce(float), vol.Range(min=0.2)),
    vol.Optional('fps', default=25): POSITIVE_INT,
    vol.Optional('frame_size', default=256): POSITIVE_INT,
})

TRAINING_SCHEMA = vol.Schema({
    vol.Optional('checkpoint_every', default=1000): POSITIVE_INT,
    vol.Optional('log_every', default=100): POSITIVE_INT,
    vol.Optional('device', default='cpu'): str,
})

RESOLUTION_SCHEMA = vol.Schema({
    vol.Optional('dnet', default=RESOLUTIONS['dnet']): POSITIVE_INT,
    vol.Optional('lnet', default=RESOLUTIONS['lnet']): POSITIVE_INT,
    vol.Optional('enet', default=RESOLUTIONS['enet']): POSITIVE_INT,
})

CONFIG_SCHEMA = vol.Schema({
    vol.Required(CONF_SEED): vol.Coerce(int),
    vol.Optional(CONF_EXPERIMENTAL, default=False): vol.Boolean(),
    vol.Optional(CONF_RESOLUTIONS, default={}): RESOLUTION_SCHEMA,
    vol.Optional(CONF_DNET, default={}): DNET_SCHEMA,
    vol.Optional(CONF_LNET, default={}): LNET_SCHEMA,
    vol.Optional(CONF_SYNC, default={}): SYNC_SCHEMA,
    vol.Optional(CONF_ENET, default={}): ENET_SCHEMA,
    vol.Optional(CONF_GEOMETRY, default={}): GEOMETRY_SCHEMA,
    vol.Optional(CONF_COMPOSITING, default={}): COMPOSITING_SCHEMA,
    vol.Optional(CONF_PROVIDERS, default={}): PROVIDERS_SCHEMA,
    vol.Optional(CONF_MODE, default={}): MODE_SCHEMA,
    vol.Optional(CONF_TOY, default={}): TOY_SCHEMA,
    vol.Optional(CONF_TRAINING, default={}): TRAINING_SCHEMA,
    vol.Optional(CONF_CHECKPOINTS, default={}): vol.Schema({vol.In(STAGES): str}),
})

PRESETS = {
    'full': {},
    'toy': {
        CONF_DNET: {'latent_dim': 64, 'base_channels': 16, 'max_channels': 64, 'batch_size': 2,
                    'phase1_iterations': 2000, 'phase2_iterations': 2000},
        CONF_LNET: {'base_channels': 16, 'feature_channels': 64, 'audio_dim': 64, 'attention_dim': 64,
                    'ffc_blocks_per_stage': 2, 'batch_size': 2, 'iterations': 2000},
        CONF_SYNC: {'embed_dim': 128, 'base_channels': 16, 'batch_size': 16, 'iterations': 2000},
        CONF_ENET: {'identity_dim': 128, 'identity_channels': 8, 'style_channels': 16, 'disc_channels': 16,
                    'batch_size': 1, 'iterations': 1000},
        CONF_TRAINING: {'checkpoint_every': 500, 'log_every': 50},
    },
}


def _merge(base: dict, extra: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def cache_dir() -> Path:
    """Directory for checkpoints and provider caches."""
    return Path(os.environ.get(ENV_CACHE, DEFAULT_CACHE)).expanduser()


class PipelineConfig:
    """Validated configuration of the whole system."""

    def __init__(self, data: dict):
        try:
            self._data = CONFIG_SCHEMA(copy.deepcopy(data))
        except vol.Invalid as error:
            raise RetalkConfigException(f"Invalid configuration: {error}") from error

        if not self._data[CONF_EXPERIMENTAL] and self._data[CONF_RESOLUTIONS] != RESOLUTIONS:
            raise RetalkConfigException(
                f"Resolutions are fixed to {RESOLUTIONS} unless '{CONF_EXPERIMENTAL}' is set")

    @classmethod
    def from_preset(cls, preset: str = 'toy', seed: int = 0, **overrides) -> 'PipelineConfig':
        if preset not in PRESETS:
            raise RetalkConfigException(f"Unknown preset '{preset}'")
        data = _merge(PRESETS[preset], {CONF_SEED: seed})
        return cls(_merge(data, overrides))

    @classmethod
    def load(cls, path, preset: str = 'toy') -> 'PipelineConfig':
        """Read a JSON or TOML file and merge it over a preset."""
        path = Path(path)
        try:
            if path.suffix == '.toml':
                with open(path, 'rb') as fh:
                    user = tomllib.load(fh)
            else:
                with open(path, 'r') as fh:
                    user = json.load(fh)
        except (OSError, ValueError) as error:
            raise RetalkConfigException(f"Couldn't read config '{path}': {error}") from error
        preset = user.pop('preset', preset)
        if preset not in PRESETS:
            raise RetalkConfigException(f"Unknown preset '{preset}'")
        _LOGGER.info("Loaded config '%s' over preset '%s'", path, preset)
        return cls(_merge(PRESETS[preset], user))

    def replace(self, **overrides) -> 'PipelineConfig':
        return PipelineConfig(_merge(self._data, overrides))

    def as_dict(self) -> dict:
        return copy.deepcopy(self._data)

    def config_hash(self) -> str:
        canonical = json.dumps(self._data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf8')).hexdigest()

    def checkpoint_path(self, stage: str) -> Path:
        explicit = self._data[CONF_CHECKPOINTS].get(stage)
        if explicit:
            return Path(explicit)
        return cache_dir() / f"{stage}.ckpt"

    @property
    def seed(self) -> int:
        return self._data[CONF_SEED]

    @property
    def resolutions(self) -> dict:
        return self._data[CONF_RESOLUTIONS]

    @property
    def dnet(self) -> dict:
        return self._data[CONF_DNET]

    @property
    def lnet(self) -> dict:
        return self._data[CONF_LNET]

    @property
    def sync(self) -> dict:
        return self._data[CONF_SYNC]

    @property
    def enet(self) -> dict:
        return self._data[CONF_ENET]

    @property
    def geometry(self) -> dict:
        return self._data[CONF_GEOMETRY]

    @property
    def compositing(self) -> dict:
        return self._data[CONF_COMPOSITING]

    @property
    def providers(self) -> dict:
        return self._data[CONF_PROVIDERS]

    @property
    def mode(self) -> dict:
        return self._data[CONF_MODE]

    @property
    def toy(self) -> dict:
        return self._data[CONF_TOY]

    @property
    def training(self) -> dict:
        return self._data[CONF_TRAINING]
