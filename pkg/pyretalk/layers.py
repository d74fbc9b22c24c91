"""Building blocks shared by the networks."""
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import spectral_norm


class AdaIN(nn.Module):
    """Instance norm whose per-channel scale and shift come from a style vector.

    out = norm(x) * (1 + gamma(s)) + beta(s)
    """

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.affine = nn.Linear(style_dim, 2 * channels)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.affine(style).chunk(2, dim=1)
        return self.norm(x) * (1 + gamma[..., None, None]) + beta[..., None, None]


class ConvBNAct(nn.Module):
    """Conv -> BatchNorm -> LeakyReLU, optionally residual."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, residual=False,
                 slope=0.2):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.residual = residual
        self.slope = slope

    def forward(self, x):
        out = self.bn(self.conv(x))
        if self.residual:
            out = out + x
        return F.leaky_relu(out, self.slope)


class SNConvAdaIN(nn.Module):
    """Spectral-normalized conv -> AdaIN(style) -> LeakyReLU."""

    def __init__(self, in_channels, out_channels, style_dim, stride=1, kernel_size=3):
        super().__init__()
        self.conv = spectral_norm(nn.Conv2d(in_channels, out_channels, kernel_size, stride,
                                            kernel_size // 2, bias=False))
        self.adain = AdaIN(out_channels, style_dim)

    def forward(self, x, style):
        return F.leaky_relu(self.adain(self.conv(x), style), 0.2)


def upsample(x: torch.Tensor, size=None) -> torch.Tensor:
    if size is None:
        return F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)
    return F.interpolate(x, size=size, mode='bilinear', align_corners=False)


def gradient_coverage(module: nn.Module) -> list:
    """Names of trainable parameters whose gradient is missing or all zero."""
    return [name for name, param in module.named_parameters()
            if param.requires_grad and (param.grad is None or not torch.any(param.grad != 0))]


def finite_difference_error(objective, inputs: torch.Tensor, count: int = 8, step: float = 1e-6,
                            seed: int = 0) -> float:
    """Relative error of autograd against central differences at `count` sampled coordinates.

    `objective` maps a tensor shaped like `inputs` to a scalar. Coordinates are
    drawn among those whose gradient magnitude exceeds 1e-3 of the largest.
    Modules must be in eval mode and float64 so that spectral norm and batch norm
    stay fixed between calls.
    """
    inputs = inputs.detach().clone().requires_grad_()
    objective(inputs).backward()
    analytic = inputs.grad.detach().flatten()
    magnitude = analytic.abs()
    candidates = torch.nonzero(magnitude > 1e-3 * magnitude.max()).flatten()
    if not len(candidates):
        raise ValueError("Objective has no gradient with respect to the inputs")
    generator = torch.Generator().manual_seed(seed)
    coordinates = candidates[torch.randperm(len(candidates), generator=generator)[:count]]
    numeric = torch.empty(len(coordinates), dtype=analytic.dtype)
    with torch.no_grad():
        for slot, index in enumerate(coordinates):
            bump = torch.zeros_like(analytic)
            bump[index] = step
            bump = bump.view_as(inputs)
            numeric[slot] = (objective(inputs + bump) - objective(inputs - bump)) / (2 * step)
    expected = analytic[coordinates]
    return float(torch.linalg.vector_norm(numeric - expected) / torch.linalg.vector_norm(expected))


def frames_to_tensor(frames: np.ndarray, device='cpu') -> torch.Tensor:
    """(T, H, W, 3) uint8 -> (T, 3, H, W) float in [0, 1]."""
    tensor = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    return tensor.to(device=device, dtype=torch.float32) / 255.0


def tensor_to_frames(tensor: torch.Tensor) -> np.ndarray:
    """(T, 3, H, W) float in [0, 1] -> (T, H, W, 3) uint8."""
    scaled = (tensor.detach().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return scaled.permute(0, 2, 3, 1).cpu().numpy()


def resize(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode='bilinear', align_corners=False, antialias=True)


class AudioEncoder(nn.Module):
    """Residual conv stack reducing an 80x16 mel window to a global vector."""

    def __init__(self, out_dim: int = 256, base: int = 32):
        super().__init__()
        c = base
        self.blocks = nn.Sequential(
            ConvBNAct(1, c),
            ConvBNAct(c, c, residual=True),
            ConvBNAct(c, 2 * c, stride=(3, 1)),
            ConvBNAct(2 * c, 2 * c, residual=True),
            ConvBNAct(2 * c, 4 * c, stride=3),
            ConvBNAct(4 * c, 4 * c, residual=True),
            ConvBNAct(4 * c, 8 * c, stride=(3, 2)),
            ConvBNAct(8 * c, 8 * c, residual=True),
            ConvBNAct(8 * c, out_dim, padding=0),
        )
        self.head = nn.Conv2d(out_dim, out_dim, kernel_size=1)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: (B, 1, 80, 16) -> (B, out_dim)."""
        return self.head(self.blocks(mel)).flatten(1)
