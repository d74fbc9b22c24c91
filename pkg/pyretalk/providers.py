"""
Providers.

Pluggable boundaries for the external models the pipeline depends on:
perceptual features, identity embeddings, face restoration, face parsing,
landmark detection and 3DMM coefficient extraction. Each kind ships a
deterministic default so that every loss and stage is computable without
pretrained weights; real models register under their own names.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pyretalk.exceptions import ProviderFailure, RetalkConfigException, RetalkException

_LOGGER = logging.getLogger(__name__)

KIND_FEATURES = 'features'
KIND_IDENTITY = 'identity'
KIND_RESTORATION = 'restoration'
KIND_DATASET_RESTORATION = 'dataset_restoration'
KIND_PARSER = 'parser'
KIND_LANDMARKS = 'landmarks'
KIND_COEFFICIENTS = 'coefficients'

KINDS = (KIND_FEATURES, KIND_IDENTITY, KIND_RESTORATION, KIND_DATASET_RESTORATION,
         KIND_PARSER, KIND_LANDMARKS, KIND_COEFFICIENTS)


def guarded(kind: str, func, *args, **kwargs):
    """Call a provider, surfacing foreign errors as ProviderFailure."""
    try:
        return func(*args, **kwargs)
    except RetalkException:
        raise
    except Exception as error:
        raise ProviderFailure(kind, str(error)) from error


class FeatureProvider(ABC):
    """Multi-level feature maps used by perceptual, style and FID terms."""

    provider_id = 'features'

    @abstractmethod
    def features(self, images: torch.Tensor) -> list:
        """images: (B, 3, H, W) in [0, 1] -> list of (B, C_l, H_l, W_l)."""

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """Global-average pooled, level-concatenated embedding (B, sum C_l)."""
        return torch.cat([f.mean(dim=(2, 3)) for f in self.features(images)], dim=1)


class RandomPyramidFeatures(FeatureProvider):
    """Fixed, seed-deterministic four-level convolutional pyramid."""

    provider_id = 'random_pyramid'
    CHANNELS = (16, 32, 64, 64)

    def __init__(self, seed: int = 0, channels=CHANNELS):
        generator = torch.Generator().manual_seed(seed)
        layers = []
        in_channels = 3
        for out_channels in channels:
            conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
            fan_in = in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            in_channels = out_channels
        self._layers = nn.ModuleList(layers).requires_grad_(False).eval()

    def features(self, images):
        self._layers.to(images.device, images.dtype)
        x = (images - 0.5) / 0.5
        out = []
        for conv in self._layers:
            x = F.leaky_relu(conv(x), 0.2)
            out.append(x)
        return out


class Vgg19Features(FeatureProvider):
    """Pretrained VGG-19 relu1_1 .. relu5_1 activations (needs torchvision)."""

    provider_id = 'vgg19'
    LAYERS = (1, 6, 11, 20, 29)

    def __init__(self, seed: int = 0):
        from torchvision.models import VGG19_Weights, vgg19

        self._net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[:max(self.LAYERS) + 1]
        self._net.requires_grad_(False).eval()
        self._mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        self._std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    def features(self, images):
        self._net.to(images.device)
        x = (images - self._mean.to(images.device)) / self._std.to(images.device)
        out = []
        for index, layer in enumerate(self._net):
            x = layer(x)
            if index in self.LAYERS:
                out.append(x)
        return out


def perceptual_distance(provider: FeatureProvider, target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Batch mean of sum_l ||f_l(target) - f_l(pred)||_2."""
    total = 0
    for f_t, f_p in zip(provider.features(target), provider.features(pred)):
        total = total + torch.linalg.vector_norm((f_t - f_p).flatten(1), dim=1)
    return total.mean()


class IdentityEmbeddingProvider(ABC):
    provider_id = 'identity'

    @abstractmethod
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        """images: (B, 3, H, W) in [0, 1] -> (B, D)."""


class RandomProjectionIdentity(IdentityEmbeddingProvider):
    """Seeded random projection of a downsampled face."""

    provider_id = 'random_projection'

    def __init__(self, seed: int = 0, dim: int = 512, size: int = 32):
        generator = torch.Generator().manual_seed(seed + 1)
        self._size = size
        features = 3 * size * size
        self._projection = torch.randn(features, dim, generator=generator) / features ** 0.5

    def embed(self, images):
        pooled = F.adaptive_avg_pool2d(images, self._size).flatten(1)
        return pooled @ self._projection.to(images.device, images.dtype)


class RestorationProvider(ABC):
    provider_id = 'restoration'

    @abstractmethod
    def restore(self, image: np.ndarray) -> np.ndarray:
        """image: (H, W, 3) float32 in [0, 1]."""


class IdentityRestoration(RestorationProvider):
    provider_id = 'identity'

    def restore(self, image):
        return image


class BicubicUpscale(RestorationProvider):
    """Stand-in for a GAN-prior restorer: bicubic upscale by `factor`."""

    provider_id = 'bicubic'

    def __init__(self, factor: int = 4):
        self.factor = factor

    def restore(self, image):
        height, width = image.shape[:2]
        upscaled = cv2.resize(image.astype(np.float32), (width * self.factor, height * self.factor),
                              interpolation=cv2.INTER_CUBIC)
        return np.clip(upscaled, 0.0, 1.0)


@dataclass
class FaceParse:
    mask: np.ndarray
    regions: dict = field(default_factory=dict)

    @property
    def teeth_box(self):
        return self.regions.get('teeth')


class ParsingProvider(ABC):
    provider_id = 'parser'

    @abstractmethod
    def parse(self, frame: np.ndarray, landmarks=None) -> FaceParse:
        """frame: aligned crop (H, W, 3); landmarks in crop coordinates."""


MOUTH = slice(48, 68)


def mouth_box(landmarks: np.ndarray, inflate: float, shape) -> tuple:
    """Mouth landmark bounding box grown by `inflate` on each side, clipped."""
    points = np.asarray(landmarks)[MOUTH]
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    grow_x = (x1 - x0) * inflate / 2
    grow_y = (y1 - y0) * inflate / 2
    height, width = shape[:2]
    return (int(max(0, np.floor(x0 - grow_x))), int(max(0, np.floor(y0 - grow_y))),
            int(min(width, np.ceil(x1 + grow_x) + 1)), int(min(height, np.ceil(y1 + grow_y) + 1)))


class EllipseParser(ParsingProvider):
    """Lower-face ellipse mask with a landmark mouth box as the teeth region."""

    provider_id = 'ellipse'
    FEATHER = 21

    def __init__(self, inflate: float = 0.2):
        self.inflate = inflate

    def parse(self, frame, landmarks=None):
        height, width = frame.shape[:2]
        mask = np.zeros((height, width), np.float32)
        center = (int(round(0.5 * width)), int(round(0.74 * height)))
        axes = (int(round(0.27 * width)), int(round(0.17 * height)))
        cv2.ellipse(mask, center, axes, 0, 0, 360, 1.0, -1)
        mask = cv2.GaussianBlur(mask, (self.FEATHER, self.FEATHER), 0)
        if landmarks is not None:
            teeth = mouth_box(landmarks, self.inflate, frame.shape)
        else:
            teeth = (int(0.38 * width), int(0.66 * height), int(0.62 * width), int(0.80 * height))
        return FaceParse(mask=np.clip(mask, 0.0, 1.0), regions={'teeth': teeth, 'mouth': teeth})


class LandmarkProvider(ABC):
    provider_id = 'landmarks'

    @abstractmethod
    def detect(self, frame: np.ndarray) -> np.ndarray:
        """frame: (H, W, 3) uint8 -> (K, 2) pixel coordinates."""


class CoefficientProvider(ABC):
    provider_id = 'coefficients'

    @abstractmethod
    def extract(self, frame: np.ndarray, landmarks: np.ndarray) -> tuple:
        """-> (expression (E,), pose (6,)) for one frame."""


def _toy_landmarks(seed, config):
    from pyretalk.toy import ToyLandmarkProvider
    return ToyLandmarkProvider(landmark_count=config.get('landmark_count', 68))


def _toy_coefficients(seed, config):
    from pyretalk.toy import ToyCoefficientProvider
    return ToyCoefficientProvider(expression_dim=config.get('expression_dim', 64))


DEFAULT_FACTORIES = {
    KIND_FEATURES: {
        'random_pyramid': lambda seed, config: RandomPyramidFeatures(seed),
        'vgg19': lambda seed, config: Vgg19Features(seed),
    },
    KIND_IDENTITY: {
        'random_projection': lambda seed, config: RandomProjectionIdentity(seed, dim=config.get('identity_dim', 512)),
    },
    KIND_RESTORATION: {
        'identity': lambda seed, config: IdentityRestoration(),
        'bicubic': lambda seed, config: BicubicUpscale(),
    },
    KIND_DATASET_RESTORATION: {
        'identity': lambda seed, config: IdentityRestoration(),
        'bicubic': lambda seed, config: BicubicUpscale(),
    },
    KIND_PARSER: {
        'ellipse': lambda seed, config: EllipseParser(config.get('teeth_inflate', 0.2)),
    },
    KIND_LANDMARKS: {
        'toy': _toy_landmarks,
    },
    KIND_COEFFICIENTS: {
        'toy': _toy_coefficients,
    },
}


class ProviderRegistry:
    """Named provider factories per kind plus the active binding of each kind."""

    def __init__(self, bindings: dict = None, seed: int = 0, options: dict = None):
        self._factories = {kind: dict(names) for kind, names in DEFAULT_FACTORIES.items()}
        self._bindings = {kind: next(iter(self._factories[kind])) for kind in KINDS}
        self._bindings.update(bindings or {})
        self._instances = {}
        self._seed = seed
        self._options = options or {}

    @classmethod
    def from_config(cls, config) -> 'ProviderRegistry':
        options = dict(config.geometry)
        options['teeth_inflate'] = config.compositing['teeth_inflate']
        options['identity_dim'] = config.enet['identity_dim']
        return cls(config.providers, seed=config.seed, options=options)

    def register(self, kind: str, name: str, factory):
        """Add a factory `factory(seed, options) -> provider` under `name`."""
        if kind not in KINDS:
            raise RetalkConfigException(f"Unknown provider kind '{kind}'")
        self._factories[kind][name] = factory

    def bind(self, kind: str, name_or_instance):
        """Select a registered name, or install a ready provider instance."""
        if kind not in KINDS:
            raise RetalkConfigException(f"Unknown provider kind '{kind}'")
        if isinstance(name_or_instance, str):
            self._bindings[kind] = name_or_instance
            self._instances.pop(kind, None)
        else:
            self._bindings[kind] = getattr(name_or_instance, 'provider_id', type(name_or_instance).__name__)
            self._instances[kind] = name_or_instance

    def binding(self, kind: str) -> str:
        return self._bindings[kind]

    def get(self, kind: str):
        if kind not in self._instances:
            name = self._bindings[kind]
            factory = self._factories.get(kind, {}).get(name)
            if factory is None:
                raise RetalkConfigException(f"No '{kind}' provider named '{name}'")
            _LOGGER.debug("Creating %s provider '%s'", kind, name)
            self._instances[kind] = guarded(kind, factory, self._seed, self._options)
        return self._instances[kind]
