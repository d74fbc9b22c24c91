"""
D-Net.

Expression reenactment: a mapping network turns a temporal window of driven
3DMM coefficients into a motion latent, a warping network predicts a
quarter-resolution flow field that moves the source face, and an editing
network refines the warped face. Both networks are modulated by the latent
through AdaIN.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pyretalk.config import REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO
from pyretalk.exceptions import BadShape, BadWindowLength, LengthMismatch
from pyretalk.face_geometry import CoeffSequence, ExpressionTemplate, replace_expression
from pyretalk.layers import SNConvAdaIN, frames_to_tensor, tensor_to_frames, upsample
from pyretalk.media_io import VideoClip
from pyretalk.providers import KIND_FEATURES, FeatureProvider, guarded, perceptual_distance

_LOGGER = logging.getLogger(__name__)

RESOLUTION = 256
FLOW_SCALE = 4


@dataclass
class DNetOutput:
    warped: torch.Tensor
    edited: torch.Tensor
    flow: torch.Tensor


class MappingNet(nn.Module):
    """Four dilated 1-D convolutions over the coefficient window, then average pooling."""

    MIN_WINDOW = 25

    def __init__(self, coeff_dim: int = 70, latent_dim: int = 256, window: int = 27):
        super().__init__()
        if window < self.MIN_WINDOW:
            raise BadWindowLength(f"Coefficient window must span at least {self.MIN_WINDOW} frames")
        self.coeff_dim = coeff_dim
        self.window = window
        self.first = nn.Conv1d(coeff_dim, latent_dim, kernel_size=7)
        self.encoder = nn.ModuleList(
            nn.Conv1d(latent_dim, latent_dim, kernel_size=3, dilation=3) for _ in range(3))
        self.pool = nn.AdaptiveAvgPool1d(1)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """window: (B, L, D) -> (B, latent_dim)."""
        if window.ndim != 3 or window.shape[2] != self.coeff_dim:
            raise BadShape(f"Expected (B, L, {self.coeff_dim}) coefficients, got {tuple(window.shape)}")
        if window.shape[1] != self.window:
            raise BadWindowLength(f"Expected a window of {self.window} frames, got {window.shape[1]}")
        out = self.first(window.transpose(1, 2))
        for conv in self.encoder:
            # each dilated conv trims 3 steps from either side
            out = conv(F.leaky_relu(out, 0.1)) + out[:, :, 3:-3]
        return self.pool(out).squeeze(-1)


def _channels(base: int, top: int, level: int) -> int:
    return min(base * 2 ** level, top)


class WarpingNet(nn.Module):
    """Encoder (five downsamplings) / decoder (three upsamplings) predicting a quarter-size flow."""

    def __init__(self, latent_dim: int, base: int = 64, top: int = 256):
        super().__init__()
        ch = [_channels(base, top, level) for level in range(6)]
        self.stem = SNConvAdaIN(3, ch[0], latent_dim)
        self.down = nn.ModuleList(SNConvAdaIN(ch[i], ch[i + 1], latent_dim, stride=2) for i in range(5))
        self.up = nn.ModuleList([
            SNConvAdaIN(ch[5] + ch[4], ch[4], latent_dim),
            SNConvAdaIN(ch[4] + ch[3], ch[3], latent_dim),
            SNConvAdaIN(ch[3] + ch[2], ch[2], latent_dim),
        ])
        self.flow = nn.Conv2d(ch[2], 2, kernel_size=7, padding=3)
        with torch.no_grad():
            self.flow.weight.mul_(0.1)
            self.flow.bias.zero_()

    def forward(self, source: torch.Tensor, z: torch.Tensor) -> tuple:
        """-> (flow (B, 2, H/4, W/4) in quarter-scale pixels, encoder features per level)."""
        features = [self.stem(source, z)]
        for block in self.down:
            features.append(block(features[-1], z))
        out = features[5]
        for block, skip in zip(self.up, (features[4], features[3], features[2])):
            out = block(torch.cat([upsample(out, skip.shape[-2:]), skip], dim=1), z)
        return self.flow(out), features


def upsample_flow(flow: torch.Tensor, factor: int = FLOW_SCALE) -> torch.Tensor:
    """Bilinear x`factor` upsampling with offsets rescaled to full-resolution pixels."""
    return F.interpolate(flow, scale_factor=factor, mode='bilinear', align_corners=False) * factor


def apply_flow(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """out(x, y) = image(x + flow_x, y + flow_y) with bilinear sampling and border clamping.

    flow is in full-resolution pixels, (B, 2, H, W).
    """
    batch, _, height, width = image.shape
    if flow.shape != (batch, 2, height, width):
        raise BadShape(f"Flow {tuple(flow.shape)} doesn't match image {tuple(image.shape)}")
    ys, xs = torch.meshgrid(torch.arange(height, dtype=image.dtype, device=image.device),
                            torch.arange(width, dtype=image.dtype, device=image.device), indexing='ij')
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    grid = torch.stack([2 * x / (width - 1) - 1, 2 * y / (height - 1) - 1], dim=-1)
    return F.grid_sample(image, grid, mode='bilinear', padding_mode='border', align_corners=True)


class EditingNet(nn.Module):
    """Three-stage encoder/decoder refining the warped face, fed the warping encoder features."""

    def __init__(self, latent_dim: int, base: int = 64, top: int = 256):
        super().__init__()
        ch = [_channels(base, top, level) for level in range(4)]
        self.stem = SNConvAdaIN(6, ch[0], latent_dim)
        self.down = nn.ModuleList([
            SNConvAdaIN(ch[0], ch[1], latent_dim, stride=2),
            SNConvAdaIN(2 * ch[1], ch[2], latent_dim, stride=2),
            SNConvAdaIN(2 * ch[2], ch[3], latent_dim, stride=2),
        ])
        self.middle = SNConvAdaIN(2 * ch[3], ch[3], latent_dim)
        self.up = nn.ModuleList([
            SNConvAdaIN(ch[3] + ch[2], ch[2], latent_dim),
            SNConvAdaIN(ch[2] + ch[1], ch[1], latent_dim),
            SNConvAdaIN(ch[1] + ch[0], ch[0], latent_dim),
        ])
        self.to_rgb = nn.Conv2d(ch[0], 3, kernel_size=7, padding=3)

    def forward(self, warped: torch.Tensor, source: torch.Tensor, skips: list, z: torch.Tensor) -> torch.Tensor:
        encoded = [self.stem(torch.cat([warped, source], dim=1), z)]
        out = self.down[0](encoded[0], z)
        encoded.append(out)
        for index, block in enumerate(self.down[1:], start=1):
            out = block(torch.cat([out, skips[index]], dim=1), z)
            encoded.append(out)
        out = self.middle(torch.cat([out, skips[3]], dim=1), z)
        for block, skip in zip(self.up, reversed(encoded[:3])):
            out = block(torch.cat([upsample(out, skip.shape[-2:]), skip], dim=1), z)
        return torch.sigmoid(self.to_rgb(out))


class DNet(nn.Module):
    def __init__(self, coeff_dim: int = 70, latent_dim: int = 256, window: int = 27,
                 base_channels: int = 64, max_channels: int = 256):
        super().__init__()
        self.mapping = MappingNet(coeff_dim, latent_dim, window)
        self.warping = WarpingNet(latent_dim, base_channels, max_channels)
        self.editing = EditingNet(latent_dim, base_channels, max_channels)

    @classmethod
    def from_config(cls, config) -> 'DNet':
        geometry = config.geometry
        return cls(coeff_dim=geometry['expression_dim'] + geometry['pose_dim'],
                   latent_dim=config.dnet['latent_dim'], window=config.dnet['coeff_window'],
                   base_channels=config.dnet['base_channels'], max_channels=config.dnet['max_channels'])

    @property
    def window(self) -> int:
        return self.mapping.window

    def map_coefficients(self, window: torch.Tensor) -> torch.Tensor:
        return self.mapping(window)

    def warp(self, source: torch.Tensor, z: torch.Tensor) -> tuple:
        """-> (quarter flow, warped image, encoder features)."""
        _check_source(source)
        flow, skips = self.warping(source, z)
        warped = apply_flow(source, upsample_flow(flow))
        return flow, warped.clamp(0, 1), skips

    def edit(self, warped: torch.Tensor, source: torch.Tensor, skips: list, z: torch.Tensor) -> torch.Tensor:
        return self.editing(warped, source, skips, z).clamp(0, 1)

    def forward(self, source: torch.Tensor, window: torch.Tensor, edit: bool = True) -> DNetOutput:
        z = self.map_coefficients(window)
        flow, warped, skips = self.warp(source, z)
        edited = self.edit(warped, source, skips, z) if edit else warped
        return DNetOutput(warped=warped, edited=edited, flow=flow)


def _check_source(source: torch.Tensor):
    if source.ndim != 4 or source.shape[1] != 3 or source.shape[-1] % 32 or source.shape[-2] % 32:
        raise BadShape(f"Expected (B, 3, H, W) faces with H, W divisible by 32, got {tuple(source.shape)}")


def gram_matrix(feature: torch.Tensor) -> torch.Tensor:
    """G = F F^T / (C H W) for (C, H, W) or batched (B, C, H, W) maps."""
    batched = feature if feature.ndim == 4 else feature.unsqueeze(0)
    batch, channels, height, width = batched.shape
    flat = batched.reshape(batch, channels, height * width)
    gram = flat @ flat.transpose(1, 2) / (channels * height * width)
    return gram if feature.ndim == 4 else gram[0]


def style_distance(features: FeatureProvider, target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Batch mean of sum_l ||G(f_l(target)) - G(f_l(pred))||_2."""
    total = 0
    for f_t, f_p in zip(features.features(target), features.features(pred)):
        diff = (gram_matrix(f_t) - gram_matrix(f_p)).flatten(1)
        total = total + torch.linalg.vector_norm(diff, dim=1)
    return total.mean()


def dnet_loss(out: DNetOutput, target: torch.Tensor, features: FeatureProvider,
              lambda_c: float = 1.0, lambda_s: float = 250.0) -> tuple:
    """-> (L_Dw, L_De, breakdown)."""
    warp_perceptual = guarded(KIND_FEATURES, perceptual_distance, features, target, out.warped)
    edit_perceptual = guarded(KIND_FEATURES, perceptual_distance, features, target, out.edited)
    edit_style = guarded(KIND_FEATURES, style_distance, features, target, out.edited)
    loss_warp = warp_perceptual
    loss_edit = lambda_c * edit_perceptual + lambda_s * edit_style
    breakdown = {
        'warp_perceptual': float(warp_perceptual),
        'edit_perceptual': float(edit_perceptual),
        'edit_style': float(edit_style),
        'L_Dw': float(loss_warp),
        'L_De': float(loss_edit),
    }
    return loss_warp, loss_edit, breakdown


def reenact_video(model: DNet, clip: VideoClip, coeffs: CoeffSequence, template: ExpressionTemplate = None,
                  mode: str = REENACT_VIDEO_TO_VIDEO, batch_size: int = 8) -> VideoClip:
    """Re-render aligned 256x256 crops with the driven coefficients.

    one_shot warps frame 0 for every output frame; video_to_video warps frame t.
    """
    if len(coeffs) != len(clip):
        raise LengthMismatch(f"{len(coeffs)} coefficient frames for a clip of {len(clip)}")
    if mode not in (REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO):
        raise ValueError(f"Unknown reenactment mode '{mode}'")
    if template is not None:
        coeffs = replace_expression(coeffs, template)

    device = next(model.parameters()).device
    windows = torch.from_numpy(coeffs.windows(model.window)).to(device=device, dtype=torch.float32)
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(clip), batch_size):
            indices = list(range(start, min(start + batch_size, len(clip))))
            sources = [0 if mode == REENACT_ONE_SHOT else index for index in indices]
            for index, source in zip(indices, sources):
                _LOGGER.debug("Reenacting frame %d from source frame %d", index, source)
            source = frames_to_tensor(clip.frames[sources], device)
            out = model(source, windows[indices])
            outputs.append(tensor_to_frames(out.edited))
    model.train(was_training)
    _LOGGER.info("Reenacted %d frames in %s mode", len(clip), mode)
    return VideoClip(np.concatenate(outputs), clip.fps)
