"""
L-Net.

Audio-conditioned inpainting of the lower half of a 96x96 face. The masked
target and a reference face are encoded separately and fused with
cross-attention; a decoder of modulated residual Fast Fourier Convolution
blocks, each renormalized by AdaIN from the audio vector, fills the mouth.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pyretalk.exceptions import BadShape, OddChannels, ShapeMismatch
from pyretalk.layers import AdaIN, AudioEncoder, ConvBNAct, upsample
from pyretalk.providers import KIND_FEATURES, FeatureProvider, guarded, perceptual_distance

_LOGGER = logging.getLogger(__name__)

RESOLUTION = 96
FRAMES = 5
MEL_SHAPE = (80, 16)


def mask_lower_half(frame):
    """Zero rows [H/2, H) of a 96x96 frame.

    Tensors are channel-first (..., C, 96, 96); arrays are (96, 96, C).
    """
    if isinstance(frame, torch.Tensor):
        if frame.ndim < 3 or tuple(frame.shape[-2:]) != (RESOLUTION, RESOLUTION):
            raise BadShape(f"Expected (..., C, 96, 96), got {tuple(frame.shape)}")
        masked = frame.clone()
        masked[..., RESOLUTION // 2:, :] = 0
        return masked
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[:2] != (RESOLUTION, RESOLUTION):
        raise BadShape(f"Expected (96, 96, C), got {frame.shape}")
    masked = frame.copy()
    masked[RESOLUTION // 2:] = 0
    return masked


def lower_half(frames: torch.Tensor) -> torch.Tensor:
    return frames[..., frames.shape[-2] // 2:, :]


@dataclass
class LNetInput:
    """masked_orig (B, 5, 6, 96, 96), reference (B, 5, 3, 96, 96), mel (B, 5, 80, 16)."""

    masked_orig: torch.Tensor
    reference: torch.Tensor
    mel: torch.Tensor

    def __post_init__(self):
        batch = self.masked_orig.shape[0] if self.masked_orig.ndim == 5 else None
        expected = {
            'masked_orig': (self.masked_orig, (FRAMES, 6, RESOLUTION, RESOLUTION)),
            'reference': (self.reference, (FRAMES, 3, RESOLUTION, RESOLUTION)),
            'mel': (self.mel, (FRAMES,) + MEL_SHAPE),
        }
        for name, (tensor, shape) in expected.items():
            if tensor.ndim != len(shape) + 1 or tuple(tensor.shape[1:]) != shape or tensor.shape[0] != batch:
                raise BadShape(f"{name} must be (B, {', '.join(map(str, shape))}), got {tuple(tensor.shape)}")

    @property
    def batch_size(self) -> int:
        return self.masked_orig.shape[0]


def build_lnet_input(target: torch.Tensor, reference: torch.Tensor, mel: torch.Tensor) -> LNetInput:
    """Mask the targets and pair them channel-wise with the references.

    Channel layout of masked_orig is [masked target RGB, reference RGB].
    Unbatched (5, ...) inputs gain a batch axis.
    """
    if target.ndim == 4:
        target, reference, mel = target[None], reference[None], mel[None]
    if target.shape != reference.shape:
        raise BadShape(f"Target {tuple(target.shape)} and reference {tuple(reference.shape)} differ")
    masked = torch.cat([mask_lower_half(target), reference], dim=2)
    return LNetInput(masked, reference, mel)


class VisualEncoder(nn.Module):
    """Stem plus three Conv-BN-LeakyReLU downsamplings; returns every level."""

    def __init__(self, in_channels: int, base: int, out_channels: int):
        super().__init__()
        self.stem = ConvBNAct(in_channels, base, kernel_size=7, padding=3)
        self.down = nn.ModuleList([
            ConvBNAct(base, 2 * base, stride=2),
            ConvBNAct(2 * base, 4 * base, stride=2),
            ConvBNAct(4 * base, out_channels, stride=2),
        ])

    def forward(self, x):
        features = [self.stem(x)]
        for block in self.down:
            features.append(block(features[-1]))
        return features


class CrossAttention(nn.Module):
    """Single-head attention with Q, K from the target features and V from the reference."""

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.query = nn.Linear(channels, dim)
        # a key bias shifts every logit of a query equally
        self.key = nn.Linear(channels, dim, bias=False)
        self.value = nn.Linear(channels, channels)
        self.scale = dim ** -0.5

    def attend(self, f_orig: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        """Attention output before the residual add, (B, C, h, w)."""
        if f_orig.shape != f_ref.shape:
            raise ShapeMismatch(f"Cross-attention inputs differ: {tuple(f_orig.shape)} vs {tuple(f_ref.shape)}")
        batch, channels, height, width = f_orig.shape
        orig_tokens = f_orig.flatten(2).transpose(1, 2)
        ref_tokens = f_ref.flatten(2).transpose(1, 2)
        weights = torch.softmax(self.query(orig_tokens) @ self.key(orig_tokens).transpose(1, 2) * self.scale, dim=-1)
        out = weights @ self.value(ref_tokens)
        return out.transpose(1, 2).reshape(batch, channels, height, width)

    def forward(self, f_orig, f_ref):
        return f_orig + self.attend(f_orig, f_ref)


class ConcatFusion(nn.Module):
    """Fusion used when cross-attention is switched off."""

    def __init__(self, channels: int):
        super().__init__()
        self.merge = ConvBNAct(2 * channels, channels, kernel_size=1, padding=0)

    def forward(self, f_orig, f_ref):
        if f_orig.shape != f_ref.shape:
            raise ShapeMismatch(f"Fusion inputs differ: {tuple(f_orig.shape)} vs {tuple(f_ref.shape)}")
        return self.merge(torch.cat([f_orig, f_ref], dim=1))


class FourierUnit(nn.Module):
    """rfft2 -> 1x1 conv (+ activation) on stacked real/imag -> irfft2."""

    def __init__(self, channels: int, activation: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, 2 * channels, kernel_size=1, bias=False)
        self.activation = activation

    def forward(self, x):
        height, width = x.shape[-2:]
        spectrum = torch.fft.rfft2(x, norm='ortho')
        stacked = torch.cat([spectrum.real, spectrum.imag], dim=1)
        stacked = self.conv(stacked)
        if self.activation:
            stacked = F.leaky_relu(stacked, 0.2)
        real, imag = stacked.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(real, imag), s=(height, width), norm='ortho')


class FFC(nn.Module):
    """Fast Fourier Convolution with an even local/global channel split."""

    def __init__(self, channels: int, activation: bool = True):
        super().__init__()
        if channels % 2:
            raise OddChannels(f"FFC needs an even channel count, got {channels}")
        half = channels // 2
        self.local_to_local = nn.Conv2d(half, half, 3, padding=1, bias=False)
        self.local_to_global = nn.Conv2d(half, half, 3, padding=1, bias=False)
        self.global_to_local = nn.Conv2d(half, half, 3, padding=1, bias=False)
        self.global_to_global = FourierUnit(half, activation)
        self.activation = activation

    def forward(self, x):
        x_local, x_global = x.chunk(2, dim=1)
        out_local = self.local_to_local(x_local) + self.global_to_local(x_global)
        out_global = self.local_to_global(x_local) + self.global_to_global(x_global)
        out = torch.cat([out_local, out_global], dim=1)
        return F.leaky_relu(out, 0.2) if self.activation else out


class MRFFCBlock(nn.Module):
    """x + AdaIN(FFC(x), audio)."""

    def __init__(self, channels: int, audio_dim: int):
        super().__init__()
        self.ffc = FFC(channels)
        self.adain = AdaIN(channels, audio_dim)

    def pre_residual(self, x, audio):
        return self.adain(self.ffc(x), audio)

    def forward(self, x, audio):
        return x + self.pre_residual(x, audio)


class DecoderStage(nn.Module):
    """Convolution-up, skip concatenation and merge, then modulated FFC blocks."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, audio_dim: int, blocks: int):
        super().__init__()
        self.up = ConvBNAct(in_channels, out_channels)
        self.merge = ConvBNAct(out_channels + skip_channels, out_channels, kernel_size=1, padding=0)
        self.blocks = nn.ModuleList(MRFFCBlock(out_channels, audio_dim) for _ in range(blocks))

    def forward(self, x, skip, audio):
        out = self.up(upsample(x, skip.shape[-2:]))
        out = self.merge(torch.cat([out, skip], dim=1))
        for block in self.blocks:
            out = block(out, audio)
        return out


class LNet(nn.Module):
    def __init__(self, base_channels: int = 64, feature_channels: int = 256, audio_dim: int = 256,
                 attention_dim: int = 256, ffc_blocks_per_stage: int = 9, cross_attention: bool = True):
        super().__init__()
        base = base_channels
        self.audio_encoder = AudioEncoder(audio_dim, max(base // 2, 1))
        self.orig_encoder = VisualEncoder(6, base, feature_channels)
        self.ref_encoder = VisualEncoder(3, base, feature_channels)
        if cross_attention:
            self.fusion = nn.ModuleList(CrossAttention(feature_channels, attention_dim) for _ in range(2))
        else:
            self.fusion = nn.ModuleList([ConcatFusion(feature_channels)])
        self.cross_attention = cross_attention
        stage_channels = (4 * base, 2 * base, base)
        skip_channels = (2 * 4 * base, 2 * 2 * base, 2 * base)
        in_channels = (feature_channels,) + stage_channels[:-1]
        self.decoder = nn.ModuleList(
            DecoderStage(c_in, c_skip, c_out, audio_dim, ffc_blocks_per_stage)
            for c_in, c_skip, c_out in zip(in_channels, skip_channels, stage_channels))
        self.to_rgb = nn.Conv2d(base, 3, kernel_size=7, padding=3)

    @classmethod
    def from_config(cls, config) -> 'LNet':
        options = config.lnet
        return cls(options['base_channels'], options['feature_channels'], options['audio_dim'],
                   options['attention_dim'], options['ffc_blocks_per_stage'], options['cross_attention'])

    def encode_audio(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, 80, 16) or (B, 1, 80, 16) -> (B, audio_dim)."""
        if mel.ndim == 3:
            mel = mel.unsqueeze(1)
        if mel.ndim != 4 or tuple(mel.shape[1:]) != (1,) + MEL_SHAPE:
            raise BadShape(f"Expected (B, 80, 16) mel windows, got {tuple(mel.shape)}")
        return self.audio_encoder(mel)

    def fuse(self, f_orig: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        if self.cross_attention:
            out = f_orig
            for block in self.fusion:
                out = block(out, f_ref)
            return out
        return self.fusion[0](f_orig, f_ref)

    def forward(self, inputs: LNetInput) -> torch.Tensor:
        """-> (B, 5, 3, 96, 96) in [0, 1]."""
        batch = inputs.batch_size
        masked = inputs.masked_orig.flatten(0, 1)
        reference = inputs.reference.flatten(0, 1)
        audio = self.encode_audio(inputs.mel.flatten(0, 1))

        orig_features = self.orig_encoder(masked)
        ref_features = self.ref_encoder(reference)
        out = self.fuse(orig_features[-1], ref_features[-1])
        for stage, level in zip(self.decoder, (2, 1, 0)):
            skip = torch.cat([orig_features[level], ref_features[level]], dim=1)
            out = stage(out, skip, audio)
        out = torch.sigmoid(self.to_rgb(out))
        return out.view(batch, FRAMES, 3, RESOLUTION, RESOLUTION)


def lnet_forward(model: LNet, inputs: LNetInput) -> torch.Tensor:
    return model(inputs)


def lnet_loss(pred: torch.Tensor, target: torch.Tensor, mel: torch.Tensor, features: FeatureProvider,
              sync=None, lambda_l1: float = 1.0, lambda_p: float = 1.0, lambda_sync: float = 0.3) -> tuple:
    """Reconstruction + perceptual + lip-sync objective.

    pred, target: (B, 5, 3, 96, 96); mel: (B, 5, 80, 16). The sync term scores
    the lower halves of the five predicted frames against the first frame's
    mel window. -> (total, breakdown)
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    l1 = torch.mean(torch.abs(target - pred))
    perceptual = guarded(KIND_FEATURES, perceptual_distance, features, target.flatten(0, 1), pred.flatten(0, 1))
    total = lambda_l1 * l1 + lambda_p * perceptual
    breakdown = {'l1': float(l1), 'perceptual': float(perceptual), 'sync': 0.0}
    if sync is not None and lambda_sync > 0:
        from pyretalk.sync_expert import sync_loss

        faces = lower_half(pred).flatten(1, 2)
        sync_term = sync_loss(sync.embed_video(faces), sync.embed_audio(mel[:, 0]))
        total = total + lambda_sync * sync_term
        breakdown['sync'] = float(sync_term)
    breakdown['total'] = float(total)
    return total, breakdown


class TrainingReferences:
    """Five random frames of the same clip serve as references."""

    def __init__(self, rng: np.random.Generator):
        self._rng = rng

    def select(self, length: int, indices) -> np.ndarray:
        return self._rng.integers(0, length, size=len(indices))


class InferenceReferences:
    """The re-rendered frame at the same index is the reference."""

    def select(self, length: int, indices) -> np.ndarray:
        return np.asarray(indices)
