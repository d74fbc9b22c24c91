"""
E-Net.

Identity-aware enhancement of L-Net output: a differentiable JPEG plus
bilinear degradation builds low-resolution training inputs, an identity
encoder summarizes a high-resolution reference, and two modulated
convolution blocks upsample 96x96 to 384x384.
"""
import hashlib
import logging
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pyretalk.exceptions import BadQuality, BadShape
from pyretalk.layers import resize, upsample
from pyretalk.providers import (KIND_DATASET_RESTORATION, KIND_FEATURES, KIND_IDENTITY, FeatureProvider,
                                IdentityEmbeddingProvider, RestorationProvider, guarded, perceptual_distance)

_LOGGER = logging.getLogger(__name__)

RESOLUTION = 384
LOW_RESOLUTION = 96
IDENTITY_INPUT = 256
BLOCK = 8

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.full((8, 8), 99.0)
CHROMA_TABLE[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]

RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])


@dataclass
class DegradationConfig:
    jpeg_quality: int = 75
    down_factor: int = 4
    interpolation: str = 'bilinear'

    def __post_init__(self):
        if not 10 <= int(self.jpeg_quality) <= 100:
            raise BadQuality(f"JPEG quality {self.jpeg_quality} outside [10, 100]")


def quantization_tables(quality: int) -> np.ndarray:
    """(2, 8, 8) luma and chroma tables scaled the libjpeg way."""
    if not 10 <= quality <= 100:
        raise BadQuality(f"JPEG quality {quality} outside [10, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tables = np.floor((np.stack([LUMA_TABLE, CHROMA_TABLE]) * scale + 50.0) / 100.0)
    return np.clip(tables, 1, 255)


def dct_matrix(size: int = BLOCK) -> np.ndarray:
    k = np.arange(size)[:, None]
    n = np.arange(size)[None, :]
    matrix = np.cos((2 * n + 1) * k * np.pi / (2 * size)) * np.sqrt(2.0 / size)
    matrix[0] /= np.sqrt(2.0)
    return matrix


def soft_round(x: torch.Tensor) -> torch.Tensor:
    """round(x) + (x - round(x))^3."""
    rounded = torch.round(x)
    return rounded + (x - rounded) ** 3


def diff_jpeg(images: torch.Tensor, quality: int) -> torch.Tensor:
    """Differentiable JPEG round trip of (B, 3, H, W) images in [0, 1], H and W multiples of 8."""
    batch, channels, height, width = images.shape
    if channels != 3 or height % BLOCK or width % BLOCK:
        raise BadShape(f"Expected (B, 3, H, W) with H, W multiples of 8, got {tuple(images.shape)}")
    dtype, device = images.dtype, images.device
    to_ycbcr = torch.tensor(RGB_TO_YCBCR, dtype=dtype, device=device)
    dct = torch.tensor(dct_matrix(), dtype=dtype, device=device)
    tables = torch.tensor(quantization_tables(quality), dtype=dtype, device=device)
    table = torch.stack([tables[0], tables[1], tables[1]])[None, :, None, None]

    ycbcr = torch.einsum('ij,bjhw->bihw', to_ycbcr, images * 255.0)
    ycbcr = ycbcr - torch.tensor([128.0, 0.0, 0.0], dtype=dtype, device=device).view(1, 3, 1, 1)
    blocks = ycbcr.view(batch, 3, height // BLOCK, BLOCK, width // BLOCK, BLOCK).permute(0, 1, 2, 4, 3, 5)
    coefficients = dct @ blocks @ dct.T
    coefficients = soft_round(coefficients / table) * table
    blocks = dct.T @ coefficients @ dct
    ycbcr = blocks.permute(0, 1, 2, 4, 3, 5).reshape(batch, 3, height, width)
    ycbcr = ycbcr + torch.tensor([128.0, 0.0, 0.0], dtype=dtype, device=device).view(1, 3, 1, 1)
    rgb = torch.einsum('ij,bjhw->bihw', torch.linalg.inv(to_ycbcr), ycbcr)
    return (rgb / 255.0).clamp(0.0, 1.0)


def degrade(frames: torch.Tensor, config: DegradationConfig = None) -> torch.Tensor:
    """JPEG-compress then bilinearly downsample by `down_factor`; 384 -> 96 by default."""
    config = config or DegradationConfig()
    if frames.ndim == 3:
        return degrade(frames[None], config)[0]
    compressed = diff_jpeg(frames, int(config.jpeg_quality))
    return F.interpolate(compressed, scale_factor=1.0 / config.down_factor, mode=config.interpolation,
                         align_corners=False)


class ResBlockDown(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        out = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        return F.avg_pool2d(out + self.skip(x), 2)


class IdentityEncoder(nn.Module):
    """Six residual downsamplings of the 256x256 reference and a linear head."""

    def __init__(self, identity_dim: int = 512, channels: int = 32):
        super().__init__()
        widths = [channels * min(2 ** level, 16) for level in range(7)]
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.blocks = nn.Sequential(*(ResBlockDown(widths[i], widths[i + 1]) for i in range(6)))
        spatial = IDENTITY_INPUT // 2 ** 6
        self.head = nn.Linear(widths[6] * spatial * spatial, identity_dim)

    def forward(self, reference: torch.Tensor) -> torch.Tensor:
        if reference.ndim != 4 or reference.shape[1] != 3:
            raise BadShape(f"Expected (B, 3, H, W) references, got {tuple(reference.shape)}")
        x = resize(reference, IDENTITY_INPUT)
        return self.head(F.leaky_relu(self.blocks(self.stem(x)), 0.2).flatten(1))


class ModulatedConv2d(nn.Module):
    """Per-sample weight modulation by a style vector, with optional demodulation."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, style_dim: int,
                 demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.scale = (in_channels * kernel_size * kernel_size) ** -0.5
        self.modulation = nn.Linear(style_dim, in_channels)
        with torch.no_grad():
            self.modulation.bias.fill_(1.0)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.demodulate = demodulate
        self.padding = kernel_size // 2

    def forward(self, x, style):
        batch, in_channels, height, width = x.shape
        out_channels = self.weight.shape[0]
        weight = self.scale * self.weight[None] * self.modulation(style).view(batch, 1, in_channels, 1, 1)
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        out = F.conv2d(x.reshape(1, batch * in_channels, height, width),
                       weight.view(batch * out_channels, in_channels, *weight.shape[-2:]),
                       padding=self.padding, groups=batch)
        return out.view(batch, out_channels, height, width) + self.bias.view(1, -1, 1, 1)


class StyleBlock(nn.Module):
    """x2 upsample, modulated 3x3 conv, and a 1x1 modulated toRGB added to the upsampled image skip."""

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(channels, channels, 3, style_dim)
        self.to_rgb = ModulatedConv2d(channels, 3, 1, style_dim, demodulate=False)

    def forward(self, x, rgb, style):
        x = F.leaky_relu(self.conv(upsample(x), style), 0.2)
        return x, upsample(rgb) + self.to_rgb(x, style)


class ENet(nn.Module):
    def __init__(self, identity_dim: int = 512, identity_channels: int = 32, style_channels: int = 64):
        super().__init__()
        self.identity_encoder = IdentityEncoder(identity_dim, identity_channels)
        self.stem = nn.Conv2d(3, style_channels, 3, padding=1)
        self.blocks = nn.ModuleList(StyleBlock(style_channels, identity_dim) for _ in range(2))

    @classmethod
    def from_config(cls, config) -> 'ENet':
        options = config.enet
        return cls(options['identity_dim'], options['identity_channels'], options['style_channels'])

    def encode_identity(self, reference: torch.Tensor) -> torch.Tensor:
        return self.identity_encoder(reference)

    def enhance(self, low: torch.Tensor, identity: torch.Tensor) -> torch.Tensor:
        """(B, 3, h, w) + (B, D) -> (B, 3, 4h, 4w) in [0, 1]."""
        if low.ndim != 4 or low.shape[1] != 3:
            raise BadShape(f"Expected (B, 3, H, W) low-resolution faces, got {tuple(low.shape)}")
        if identity.ndim != 2 or identity.shape[0] != low.shape[0]:
            raise BadShape(f"Identity {tuple(identity.shape)} doesn't match batch of {low.shape[0]}")
        x = F.leaky_relu(self.stem(low), 0.2)
        rgb = low
        for block in self.blocks:
            x, rgb = block(x, rgb, identity)
        return rgb.clamp(0.0, 1.0)

    def forward(self, low, reference):
        return self.enhance(low, self.encode_identity(reference))


class PatchDiscriminator(nn.Module):
    """70x70 receptive-field patch classifier."""

    def __init__(self, channels: int = 64):
        super().__init__()
        c = channels
        self.layers = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 8 * c, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(8 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(8 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, images):
        return self.layers(images * 2 - 1)


def identity_loss(pred: torch.Tensor, target: torch.Tensor, provider: IdentityEmbeddingProvider) -> torch.Tensor:
    embed_target = guarded(KIND_IDENTITY, provider.embed, target)
    embed_pred = guarded(KIND_IDENTITY, provider.embed, pred)
    return torch.linalg.vector_norm(embed_target - embed_pred, dim=1).mean()


def generator_adversarial(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


@dataclass
class EnhanceBatch:
    """High-resolution inputs, references, targets and the two network outputs."""

    i_hr: torch.Tensor
    i_hr_ref: torch.Tensor
    i_gt: torch.Tensor
    o_lr: torch.Tensor = None
    o_hr: torch.Tensor = None


def enet_objective(batch: EnhanceBatch, features: FeatureProvider, identity: IdentityEmbeddingProvider,
                   discriminator: PatchDiscriminator, lambda_l1: float = 0.2, lambda_p: float = 1.0,
                   lambda_adv: float = 100.0, lambda_id: float = 0.4) -> tuple:
    """-> (generator loss, discriminator loss, breakdown)."""
    pred, target = batch.o_hr, batch.i_gt
    if pred.shape != target.shape:
        raise BadShape(f"O_HR {tuple(pred.shape)} and I_GT {tuple(target.shape)} differ")
    l1 = torch.mean(torch.abs(target - pred))
    perceptual = guarded(KIND_FEATURES, perceptual_distance, features, target, pred)
    id_term = identity_loss(pred, target, identity)
    adversarial = generator_adversarial(discriminator(pred)) if lambda_adv > 0 else pred.new_zeros(())
    generator = lambda_l1 * l1 + lambda_p * perceptual + lambda_adv * adversarial + lambda_id * id_term
    critic = discriminator_loss(discriminator(target), discriminator(pred.detach()))
    breakdown = {
        'l1': float(l1),
        'perceptual': float(perceptual),
        'adversarial': float(adversarial),
        'identity': float(id_term),
        'generator': float(generator),
        'discriminator': float(critic),
    }
    return generator, critic, breakdown


@dataclass
class EnhancedDataset:
    samples: list
    manifest: dict

    def __len__(self):
        return len(self.samples)


def _to_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def build_enhanced_dataset(samples, restoration: RestorationProvider, size: int = RESOLUTION) -> EnhancedDataset:
    """Restore every low-resolution sample to `size` x `size`.

    samples: iterable of (sample_id, image (h, w, 3), source). Outputs smaller
    than `size` after restoration are brought up with bicubic resizing.
    """
    provider_id = getattr(restoration, 'provider_id', type(restoration).__name__)
    entries = []
    records = []
    for sample_id, image, source in samples:
        restored = guarded(KIND_DATASET_RESTORATION, restoration.restore, _to_float(image))
        if restored.shape[:2] != (size, size):
            restored = np.clip(cv2.resize(restored, (size, size), interpolation=cv2.INTER_CUBIC), 0.0, 1.0)
        quantized = np.round(restored * 255.0).astype(np.uint8)
        entries.append({'id': sample_id, 'image': restored.astype(np.float32)})
        records.append({'id': sample_id, 'source': str(source), 'provider': provider_id,
                        'sha256': hashlib.sha256(quantized.tobytes()).hexdigest()})
    _LOGGER.info("Enhanced %d samples with '%s'", len(entries), provider_id)
    return EnhancedDataset(entries, {'provider': provider_id, 'size': size, 'samples': records})
