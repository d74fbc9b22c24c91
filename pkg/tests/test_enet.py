import hashlib

import numpy as np
import pytest
import torch

from pyretalk.enet import (CHROMA_TABLE, LUMA_TABLE, DegradationConfig, EnhanceBatch, ENet, ModulatedConv2d,
                           PatchDiscriminator, build_enhanced_dataset, dct_matrix, degrade, diff_jpeg,
                           enet_objective, identity_loss, quantization_tables)
from pyretalk.exceptions import BadQuality, BadShape, ProviderFailure
from pyretalk.layers import finite_difference_error, gradient_coverage
from pyretalk.providers import BicubicUpscale, RandomProjectionIdentity, RandomPyramidFeatures

from .fakes import FailingProvider, SharpeningRestoration


@pytest.fixture
def tiny_enet() -> ENet:
    torch.manual_seed(0)
    return ENet(identity_dim=16, identity_channels=4, style_channels=8)


def test_quality_fifty_keeps_base_tables():
    tables = quantization_tables(50)
    assert np.array_equal(tables[0], LUMA_TABLE)
    assert np.array_equal(tables[1], CHROMA_TABLE)
    assert np.all(quantization_tables(100) == 1)
    for quality in (5, 101):
        with pytest.raises(BadQuality):
            quantization_tables(quality)


def test_dct_matrix_is_orthonormal():
    matrix = dct_matrix()
    assert np.allclose(matrix @ matrix.T, np.eye(8))


def test_diff_jpeg_high_quality_is_near_lossless():
    generator = torch.Generator().manual_seed(0)
    images = 0.2 + 0.6 * torch.rand(2, 3, 16, 16, generator=generator)
    out = diff_jpeg(images, 100)
    assert out.shape == images.shape
    assert float((out - images).abs().max()) < 0.02


def test_diff_jpeg_shape_check():
    with pytest.raises(BadShape):
        diff_jpeg(torch.rand(1, 3, 12, 16), 75)
    with pytest.raises(BadShape):
        diff_jpeg(torch.rand(1, 1, 16, 16), 75)


def test_diff_jpeg_gradient_matches_finite_difference():
    generator = torch.Generator().manual_seed(3)
    images = (0.2 + 0.6 * torch.rand(1, 3, 16, 16, generator=generator)).double().requires_grad_()
    weights = torch.rand(1, 3, 16, 16, generator=generator).double()

    def objective(x):
        return (diff_jpeg(x, 60) * weights).sum()

    objective(images).backward()
    gradient = images.grad.detach()
    direction = gradient / torch.linalg.vector_norm(gradient)
    step = 1e-6
    with torch.no_grad():
        forward = objective(images + step * direction)
        backward = objective(images - step * direction)
    numeric = float((forward - backward) / (2 * step))
    analytic = float(torch.linalg.vector_norm(gradient))
    assert analytic > 0.0
    assert abs(numeric - analytic) / analytic <= 5e-2


def test_degrade():
    frames = torch.rand(1, 3, 384, 384)
    assert degrade(frames).shape == (1, 3, 96, 96)
    assert degrade(frames[0]).shape == (3, 96, 96)
    assert degrade(torch.rand(2, 3, 64, 64), DegradationConfig(jpeg_quality=40, down_factor=2)).shape == \
        (2, 3, 32, 32)


def test_degradation_config_quality():
    with pytest.raises(BadQuality):
        DegradationConfig(jpeg_quality=5)


def test_modulated_conv_is_per_sample():
    torch.manual_seed(0)
    conv = ModulatedConv2d(4, 6, 3, style_dim=3)
    x = torch.randn(2, 4, 8, 8)
    style = torch.randn(2, 3)
    out = conv(x, style)
    assert out.shape == (2, 6, 8, 8)
    assert torch.allclose(conv(x[:1], style[:1]), out[:1], atol=1e-5)

    other = style.clone()
    other[1] = torch.randn(3)
    assert torch.allclose(conv(x, other)[0], out[0], atol=1e-5)


def test_enhance_upsamples_four_times(tiny_enet):
    low = torch.rand(2, 3, 24, 24)
    identity = torch.randn(2, 16)
    out = tiny_enet.enhance(low, identity)
    assert out.shape == (2, 3, 96, 96)
    assert 0.0 <= float(out.min()) and float(out.max()) <= 1.0
    with pytest.raises(BadShape):
        tiny_enet.enhance(low, torch.randn(3, 16))
    with pytest.raises(BadShape):
        tiny_enet.enhance(torch.rand(2, 1, 24, 24), identity)


def test_enet_forward_gradient_coverage(tiny_enet):
    out = tiny_enet(torch.rand(2, 3, 24, 24), torch.rand(2, 3, 64, 64))
    assert out.shape == (2, 3, 96, 96)
    out.mean().backward()
    assert gradient_coverage(tiny_enet) == []


def test_enhance_matches_finite_difference(tiny_enet):
    model = tiny_enet.double().eval()
    generator = torch.Generator().manual_seed(6)
    low = torch.rand(1, 3, 12, 12, generator=generator, dtype=torch.float64)
    identity = torch.randn(1, 16, generator=generator, dtype=torch.float64)
    weights = torch.rand(1, 3, 48, 48, generator=generator, dtype=torch.float64)

    assert finite_difference_error(lambda x: (model.enhance(x, identity) * weights).sum(), low) <= 5e-2
    assert finite_difference_error(lambda s: (model.enhance(low, s) * weights).sum(), identity) <= 5e-2


def test_identity_encoder_shape_check(tiny_enet):
    with pytest.raises(BadShape):
        tiny_enet.encode_identity(torch.rand(3, 64, 64))


def test_patch_discriminator_shape():
    torch.manual_seed(0)
    assert PatchDiscriminator(8)(torch.rand(2, 3, 64, 64)).shape == (2, 1, 6, 6)


def _objective_parts():
    torch.manual_seed(0)
    batch = EnhanceBatch(i_hr=torch.rand(2, 3, 64, 64), i_hr_ref=torch.rand(2, 3, 64, 64),
                         i_gt=torch.rand(2, 3, 64, 64), o_hr=torch.rand(2, 3, 64, 64))
    return batch, RandomPyramidFeatures(), RandomProjectionIdentity(dim=8), PatchDiscriminator(8)


def test_enet_objective_breakdown():
    batch, features, identity, discriminator = _objective_parts()
    generator, critic, breakdown = enet_objective(batch, features, identity, discriminator)
    assert set(breakdown) == {'l1', 'perceptual', 'adversarial', 'identity', 'generator', 'discriminator'}
    assert float(generator) == pytest.approx(breakdown['generator'])
    assert float(critic) > 0.0

    _, _, silent = enet_objective(batch, features, identity, discriminator, lambda_adv=0.0)
    assert silent['adversarial'] == 0.0

    batch.o_hr = torch.rand(2, 3, 32, 32)
    with pytest.raises(BadShape):
        enet_objective(batch, features, identity, discriminator)


def test_identity_loss():
    identity = RandomProjectionIdentity(dim=8)
    images = torch.rand(2, 3, 64, 64)
    assert float(identity_loss(images, images, identity)) == 0.0
    assert float(identity_loss(images, 1.0 - images, identity)) > 0.0
    with pytest.raises(ProviderFailure):
        identity_loss(images, images, FailingProvider())


def _low_resolution_samples(count=2):
    rng = np.random.default_rng(0)
    return [(f"clip-{i}", rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8), f"toy/{i}.mp4")
            for i in range(count)]


def test_build_enhanced_dataset():
    dataset = build_enhanced_dataset(_low_resolution_samples(), BicubicUpscale(), size=96)
    assert len(dataset) == 2
    assert dataset.samples[0]['image'].shape == (96, 96, 3)
    assert dataset.manifest['provider'] == 'bicubic'
    record = dataset.manifest['samples'][1]
    assert record['id'] == 'clip-1'
    assert record['source'] == 'toy/1.mp4'
    quantized = np.round(dataset.samples[1]['image'] * 255.0).astype(np.uint8)
    assert record['sha256'] == hashlib.sha256(quantized.tobytes()).hexdigest()


def test_build_enhanced_dataset_resizes_small_outputs():
    restoration = SharpeningRestoration()
    dataset = build_enhanced_dataset(_low_resolution_samples(3), restoration, size=96)
    assert restoration.calls == 3
    assert all(sample['image'].shape == (96, 96, 3) for sample in dataset.samples)
    assert dataset.manifest['provider'] == 'sharpen'


def test_build_enhanced_dataset_provider_failure():
    with pytest.raises(ProviderFailure):
        build_enhanced_dataset(_low_resolution_samples(), FailingProvider(), size=96)
