import logging

import numpy as np
import pytest
import torch

from pyretalk.config import REENACT_ONE_SHOT, REENACT_VIDEO_TO_VIDEO, PipelineConfig
from pyretalk.dnet import (DNet, DNetOutput, MappingNet, apply_flow, dnet_loss, gram_matrix, reenact_video,
                           style_distance, upsample_flow)
from pyretalk.exceptions import BadShape, BadWindowLength, LengthMismatch
from pyretalk.face_geometry import CoeffSequence, load_template
from pyretalk.layers import finite_difference_error, gradient_coverage
from pyretalk.media_io import VideoClip
from pyretalk.providers import RandomPyramidFeatures, perceptual_distance


@pytest.fixture
def model() -> DNet:
    torch.manual_seed(0)
    return DNet(coeff_dim=70, latent_dim=16, window=27, base_channels=8, max_channels=32)


@pytest.fixture
def window() -> torch.Tensor:
    return torch.randn(2, 27, 70)


def test_mapping_window_checks():
    with pytest.raises(BadWindowLength):
        MappingNet(70, 16, window=21)
    mapping = MappingNet(70, 16, window=27)
    assert mapping(torch.randn(3, 27, 70)).shape == (3, 16)
    with pytest.raises(BadWindowLength):
        mapping(torch.randn(3, 25, 70))
    with pytest.raises(BadShape):
        mapping(torch.randn(3, 27, 64))


def test_zero_flow_is_identity():
    image = torch.rand(2, 3, 16, 16)
    assert torch.allclose(apply_flow(image, torch.zeros(2, 2, 16, 16)), image, atol=1e-5)


def test_integer_flow_shifts():
    image = torch.rand(1, 3, 16, 16)
    flow = torch.zeros(1, 2, 16, 16)
    flow[:, 0] = 1.0
    out = apply_flow(image, flow)
    assert torch.allclose(out[..., :-1], image[..., 1:], atol=1e-5)
    # sampling past the border clamps to the last column
    assert torch.allclose(out[..., -1], image[..., -1], atol=1e-5)


def test_flow_shape_check():
    with pytest.raises(BadShape):
        apply_flow(torch.rand(1, 3, 16, 16), torch.zeros(1, 2, 8, 8))


def test_upsample_flow_rescales():
    flow = torch.ones(1, 2, 4, 4)
    up = upsample_flow(flow)
    assert up.shape == (1, 2, 16, 16)
    assert torch.allclose(up, torch.full_like(up, 4.0))


def test_gram_matrix_matches_loops():
    feature = torch.randn(4, 5, 6, dtype=torch.float64)
    channels, height, width = feature.shape
    expected = torch.zeros(channels, channels, dtype=torch.float64)
    for i in range(channels):
        for j in range(channels):
            expected[i, j] = (feature[i] * feature[j]).sum() / (channels * height * width)
    assert torch.allclose(gram_matrix(feature), expected, atol=1e-6)
    assert torch.allclose(gram_matrix(feature[None])[0], expected, atol=1e-6)


def test_forward_shapes(model, window):
    source = torch.rand(2, 3, 64, 64)
    out = model(source, window)
    assert out.flow.shape == (2, 2, 16, 16)
    assert out.warped.shape == out.edited.shape == source.shape
    assert 0.0 <= float(out.edited.min()) and float(out.edited.max()) <= 1.0

    warp_only = model(source, window, edit=False)
    assert warp_only.edited is warp_only.warped


def test_source_shape_check(model, window):
    with pytest.raises(BadShape):
        model(torch.rand(2, 3, 60, 60), window)


def test_edit_path_gradient_coverage(model, window):
    out = model(torch.rand(2, 3, 64, 64), window)
    out.edited.mean().backward()
    assert gradient_coverage(model) == []


def test_warp_only_leaves_editing_untouched(model, window):
    out = model(torch.rand(2, 3, 64, 64), window, edit=False)
    out.warped.mean().backward()
    assert all(param.grad is None for param in model.editing.parameters())
    assert all(param.grad is not None for param in model.warping.parameters())


def test_losses():
    features = RandomPyramidFeatures()
    target = torch.rand(2, 3, 32, 32)
    other = torch.rand(2, 3, 32, 32)
    assert float(style_distance(features, target, target)) == 0.0

    perfect = DNetOutput(warped=other, edited=target, flow=torch.zeros(2, 2, 8, 8))
    loss_warp, loss_edit, breakdown = dnet_loss(perfect, target, features)
    assert float(loss_edit) == 0.0
    assert float(loss_warp) > 0.0
    assert set(breakdown) == {'warp_perceptual', 'edit_perceptual', 'edit_style', 'L_Dw', 'L_De'}


def _clip_and_coeffs(count=3, size=64):
    frames = np.random.default_rng(0).integers(0, 256, size=(count, size, size, 3), dtype=np.uint8)
    coeffs = CoeffSequence(np.zeros((count, 64)), np.zeros((count, 6)))
    return VideoClip(frames, 25), coeffs


@pytest.mark.parametrize('mode, sources', [(REENACT_ONE_SHOT, [0, 0, 0]), (REENACT_VIDEO_TO_VIDEO, [0, 1, 2])])
def test_reenact_video_routing(model, caplog, mode, sources):
    caplog.set_level(logging.DEBUG, logger='pyretalk.dnet')
    clip, coeffs = _clip_and_coeffs()
    out = reenact_video(model, clip, coeffs, load_template('neutral'), mode=mode, batch_size=2)
    assert out.frames.shape == clip.frames.shape
    assert out.fps == clip.fps
    for index, source in enumerate(sources):
        assert f"Reenacting frame {index} from source frame {source}" in caplog.text
    assert model.training


def test_reenact_video_length_mismatch(model):
    clip, _ = _clip_and_coeffs()
    with pytest.raises(LengthMismatch):
        reenact_video(model, clip, CoeffSequence(np.zeros((2, 64)), np.zeros((2, 6))))


def test_from_config():
    config = PipelineConfig.from_preset('toy')
    model = DNet.from_config(config)
    assert model.window == config.dnet['coeff_window']
    assert model.mapping.coeff_dim == 70


def test_gram_matrix_is_symmetric_psd():
    generator = torch.Generator().manual_seed(2)
    for shape in ((3, 8, 5, 5), (1, 16, 4, 7), (2, 4, 1, 1)):
        gram = gram_matrix(torch.randn(*shape, generator=generator, dtype=torch.float64))
        assert torch.allclose(gram, gram.transpose(1, 2), atol=1e-12)
        assert float(torch.linalg.eigvalsh(gram).min()) >= -1e-10


def test_edit_loss_without_style_is_perceptual():
    features = RandomPyramidFeatures()
    generator = torch.Generator().manual_seed(1)
    target = torch.rand(2, 3, 32, 32, generator=generator)
    out = DNetOutput(warped=torch.rand(2, 3, 32, 32, generator=generator),
                     edited=torch.rand(2, 3, 32, 32, generator=generator), flow=torch.zeros(2, 2, 8, 8))
    _, loss_edit, breakdown = dnet_loss(out, target, features, lambda_c=1.0, lambda_s=0.0)
    assert breakdown['edit_style'] > 0.0
    assert float(loss_edit) == pytest.approx(float(perceptual_distance(features, target, out.edited)), rel=1e-6)
    assert breakdown['L_De'] == pytest.approx(breakdown['edit_perceptual'], rel=1e-6)


def test_last_window_frame_moves_the_latent():
    torch.manual_seed(0)
    mapping = MappingNet(70, 16, window=27).eval()
    window = torch.randn(1, 27, 70)
    perturbed = window.clone()
    perturbed[:, -1] += 1.0
    with torch.no_grad():
        assert not torch.allclose(mapping(window), mapping(perturbed))


def test_edit_path_matches_finite_difference(model, window):
    source = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        # one power iteration for the spectral norms
        model(source, window[:1])
    model = model.double().eval()
    generator = torch.Generator().manual_seed(5)
    weights = torch.rand(1, 3, 64, 64, generator=generator, dtype=torch.float64)
    source, coeffs = source.double(), window[:1].double()

    assert finite_difference_error(lambda x: (model(x, coeffs).edited * weights).sum(), source) <= 5e-2
    assert finite_difference_error(lambda w: (model(source, w).edited * weights).sum(), coeffs) <= 5e-2
