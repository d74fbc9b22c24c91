import numpy as np
import pytest
import torch

from pyretalk.layers import (AdaIN, AudioEncoder, finite_difference_error, frames_to_tensor, gradient_coverage,
                             resize, tensor_to_frames)


def test_adain_sets_channel_statistics():
    torch.manual_seed(0)
    adain = AdaIN(channels=4, style_dim=3)
    gamma = torch.tensor([0.5, -0.2, 1.0, 0.0])
    beta = torch.tensor([0.1, 2.0, -1.0, 0.3])
    with torch.no_grad():
        adain.affine.weight.zero_()
        adain.affine.bias.copy_(torch.cat([gamma, beta]))
    x = torch.randn(2, 4, 16, 16) * 3 + 5
    out = adain(x, torch.randn(2, 3))
    mean = out.mean(dim=(2, 3))
    std = out.std(dim=(2, 3), unbiased=False)
    assert torch.allclose(mean, beta.expand(2, 4), atol=1e-4)
    assert torch.allclose(std, (1 + gamma).abs().expand(2, 4), atol=1e-3)


def test_frames_tensor_conversion():
    frames = np.random.default_rng(0).integers(0, 256, size=(3, 8, 10, 3), dtype=np.uint8)
    tensor = frames_to_tensor(frames)
    assert tensor.shape == (3, 3, 8, 10)
    assert 0.0 <= float(tensor.min()) and float(tensor.max()) <= 1.0
    assert np.array_equal(tensor_to_frames(tensor), frames)


def test_resize():
    images = torch.rand(2, 3, 32, 32)
    assert resize(images, 32) is images
    assert resize(images, 96).shape == (2, 3, 96, 96)


def test_audio_encoder():
    encoder = AudioEncoder(out_dim=24, base=4)
    out = encoder(torch.randn(4, 1, 80, 16))
    assert out.shape == (4, 24)

    out.sum().backward()
    assert gradient_coverage(encoder) == []


def test_gradient_coverage_reports_unused():
    model = torch.nn.ModuleDict({'used': torch.nn.Linear(3, 3), 'unused': torch.nn.Linear(3, 3)})
    model['used'](torch.randn(2, 3)).sum().backward()
    assert sorted(gradient_coverage(model)) == ['unused.bias', 'unused.weight']


@pytest.mark.parametrize('shape', [(1, 1, 80, 16), (4, 1, 80, 16)])
def test_audio_encoder_eval_batches(shape):
    encoder = AudioEncoder(out_dim=8, base=4).eval()
    with torch.no_grad():
        assert encoder(torch.randn(*shape)).shape == (shape[0], 8)


class DoubledGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x ** 3

    @staticmethod
    def backward(ctx, grad):
        x, = ctx.saved_tensors
        return 6 * x ** 2 * grad


def test_finite_difference_error():
    x = torch.linspace(0.5, 2.0, 12, dtype=torch.float64).view(3, 4)
    assert finite_difference_error(lambda t: (t ** 3).sum(), x) <= 1e-6
    assert finite_difference_error(lambda t: DoubledGradient.apply(t).sum(), x) == pytest.approx(0.5, rel=1e-4)
    with pytest.raises(ValueError):
        finite_difference_error(lambda t: t.sum() * 0.0, x)
