import numpy as np
import pytest
import torch

from pyretalk.exceptions import BadShape, ClipTooShort, EmptyDataset, ZeroVector
from pyretalk.media_io import AudioTrack, compute_mel
from pyretalk.sync_expert import (EPS, SyncNet, lower_face_crops, lse_metrics, make_sync_examples,
                                  sync_loss, sync_probability, train_syncnet)


@pytest.fixture
def model() -> SyncNet:
    torch.manual_seed(0)
    return SyncNet(embed_dim=16, base_channels=4)


@pytest.fixture
def clip() -> tuple:
    """40 frames of lower faces with 1.6 s of noise."""
    generator = torch.Generator().manual_seed(0)
    faces = torch.rand(40, 3, 48, 96, generator=generator)
    audio = AudioTrack(np.random.default_rng(0).uniform(-0.5, 0.5, size=25600))
    return faces, compute_mel(audio)


def test_probability_limits():
    v = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    assert float(sync_probability(v, v)) == pytest.approx(1.0)
    assert float(sync_loss(v, v)) == pytest.approx(0.0, abs=1e-12)

    orthogonal = sync_probability(torch.tensor([[1.0, 0.0]], dtype=torch.float64),
                                  torch.tensor([[0.0, 1.0]], dtype=torch.float64))
    assert float(orthogonal) == EPS
    opposite = sync_probability(v, -v)
    assert float(opposite) == EPS


def test_probability_zero_vectors():
    with pytest.raises(ZeroVector):
        sync_probability(torch.zeros(1, 4), torch.zeros(1, 4))
    assert float(sync_probability(torch.zeros(1, 4), torch.ones(1, 4))) == pytest.approx(EPS)


def test_embedding_shapes(model):
    model.eval()
    with torch.no_grad():
        assert model.embed_video(torch.rand(2, 15, 48, 96)).shape == (2, 16)
        assert model.embed_video(torch.rand(2, 5, 3, 48, 96)).shape == (2, 16)
        assert model.embed_audio(torch.randn(2, 80, 16)).shape == (2, 16)
        assert model(torch.rand(2, 15, 48, 96), torch.randn(2, 80, 16)).shape == (2,)
    with pytest.raises(BadShape):
        model.embed_video(torch.rand(2, 15, 96, 96))
    with pytest.raises(BadShape):
        model.embed_audio(torch.randn(2, 80, 20))


def test_sync_examples(clip):
    faces, mel = clip
    examples = make_sync_examples(faces, mel, 25, np.random.default_rng(0), count=8)
    assert len(examples) == 8
    assert [example.label for example in examples] == [1.0, 0.0] * 4
    assert examples[0].faces.shape == (15, 48, 96)
    assert examples[0].mel.shape == (80, 16)


def test_sync_examples_short_clip(clip):
    faces, mel = clip
    with pytest.raises(ClipTooShort):
        make_sync_examples(faces[:9], mel, 25, np.random.default_rng(0), count=2)


def test_train_syncnet(model, clip):
    faces, mel = clip
    examples = make_sync_examples(faces, mel, 25, np.random.default_rng(0), count=8)
    history = train_syncnet(model, examples, iterations=3, batch_size=4)
    assert len(history) == 3
    assert all(np.isfinite(history))
    with pytest.raises(EmptyDataset):
        train_syncnet(model, [], iterations=1)


def test_lse_confidence_non_negative(model, clip):
    faces, mel = clip
    result = lse_metrics(model, faces, mel, 25, max_offset=15)
    assert result.lse_c >= 0.0
    assert result.lse_d >= 0.0
    assert -15 <= result.av_offset <= 15
    assert result.windows == 40 - 5 - 30 + 1
    assert model.training


def test_lse_degenerate_embeddings(model, clip, mocker):
    faces, mel = clip
    mocker.patch.object(model, 'embed_video', side_effect=lambda x: torch.ones(len(x), 16))
    mocker.patch.object(model, 'embed_audio', side_effect=lambda x: torch.ones(len(x), 16))
    result = lse_metrics(model, faces, mel, 25, max_offset=15)
    assert result.lse_c == 0.0
    assert result.lse_d == 0.0


def test_lse_short_clip(model, clip):
    faces, mel = clip
    with pytest.raises(ClipTooShort):
        lse_metrics(model, faces[:34], mel, 25, max_offset=15)


def test_lower_face_crops():
    crops = np.zeros((3, 256, 256, 3), np.uint8)
    crops[:, 128:] = 255
    lower = lower_face_crops(crops)
    assert lower.shape == (3, 3, 48, 96)
    assert torch.allclose(lower[:, :, 2:], torch.ones_like(lower[:, :, 2:]))
