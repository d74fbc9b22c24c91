import numpy as np
import pytest
import torch

from pyretalk.exceptions import DependencyMissing, EmptyDataset, RetalkConfigException
from pyretalk.providers import ProviderRegistry
from pyretalk.toy import generate_toy_dataset
from pyretalk.training import (DNetTrainer, ENetTrainer, LNetTrainer, SyncNetTrainer, prepare_clip, train,
                               trainer_for)

from .fakes import tiny_config


@pytest.fixture(scope='module')
def dataset():
    return generate_toy_dataset(2, seconds=1.0)


@pytest.fixture
def config(tmp_path):
    return tiny_config(tmp_path)


def _snapshot(module: torch.nn.Module) -> dict:
    return {name: param.detach().clone() for name, param in module.named_parameters()}


def _changed(module: torch.nn.Module, before: dict) -> bool:
    return any(not torch.equal(param, before[name]) for name, param in module.named_parameters())


def test_prepare_clip(config, dataset):
    clip = prepare_clip(dataset[0], ProviderRegistry.from_config(config), config)
    assert len(clip) == 25
    assert clip.crops.shape == (25, 256, 256, 3)
    assert clip.crops_lnet.shape == (25, 96, 96, 3)
    assert clip.crops_enet.shape == (25, 384, 384, 3)
    assert clip.lower_faces.shape == (25, 3, 48, 96)
    assert clip.coeffs.stacked().shape == (25, 70)
    assert clip.mel_windows.shape == (25, 80, 16)


def test_dependencies_are_checked(config, dataset):
    with pytest.raises(DependencyMissing) as error:
        LNetTrainer(config, dataset)
    assert error.value.stage == 'lnet'
    assert error.value.dependency == 'syncnet'
    with pytest.raises(DependencyMissing) as error:
        ENetTrainer(config, dataset)
    assert error.value.dependency == 'lnet'


def test_empty_dataset(config):
    with pytest.raises(EmptyDataset):
        SyncNetTrainer(config, [])


def test_unknown_stage(config, dataset):
    with pytest.raises(RetalkConfigException):
        trainer_for('gan', config, dataset)


def test_dnet_phases(config, dataset):
    trainer = DNetTrainer(config, dataset)
    editing = _snapshot(trainer.model.editing)
    warping = _snapshot(trainer.model.warping)

    history = trainer.fit(iterations=1)
    assert history[0]['phase'] == 1.0
    assert not _changed(trainer.model.editing, editing)
    assert _changed(trainer.model.warping, warping)

    history = trainer.fit(iterations=2)
    assert history[1]['phase'] == 2.0
    assert _changed(trainer.model.editing, editing)
    assert config.checkpoint_path('dnet').is_file()


def test_syncnet_resume_is_deterministic(config, dataset, tmp_path):
    straight = SyncNetTrainer(config, dataset, checkpoint_path=tmp_path / 'straight.ckpt')
    straight.fit(iterations=4)

    interrupted = SyncNetTrainer(config, dataset, checkpoint_path=tmp_path / 'resumed.ckpt')
    interrupted.fit(iterations=2)
    resumed = SyncNetTrainer(config, dataset, checkpoint_path=tmp_path / 'resumed.ckpt')
    resumed.fit(iterations=4, resume=True)

    assert resumed.step == 4
    assert [entry['bce'] for entry in resumed.history] == pytest.approx([entry['bce'] for entry in straight.history])
    for name, tensor in straight.model.state_dict().items():
        assert torch.allclose(resumed.model.state_dict()[name].float(), tensor.float(), atol=1e-6)


def test_syncnet_accuracy(config, dataset):
    trainer = SyncNetTrainer(config, dataset)
    trainer.fit(iterations=1)
    assert 0.0 <= trainer.accuracy(count=8) <= 1.0
    assert trainer.model.training


def test_train_returns_checkpoint(config, dataset):
    path = train('syncnet', config, dataset, iterations=1)
    assert path == config.checkpoint_path('syncnet')
    assert path.is_file()


def train_lnet(config, dataset, iterations):
    trainer = LNetTrainer(config, dataset)
    assert not trainer.sync.training
    return trainer.fit(iterations=iterations)


def test_lnet_uses_sync_expert(config, dataset):
    train('syncnet', config, dataset, iterations=1)
    history = train_lnet(config, dataset, iterations=1)
    assert set(history[0]) == {'l1', 'perceptual', 'sync', 'total'}
    assert history[0]['sync'] >= 0.0


@pytest.mark.slow
def test_enet_step(config, dataset):
    train('syncnet', config, dataset, iterations=1)
    train('lnet', config, dataset, iterations=1)
    history = ENetTrainer(config, dataset).fit(iterations=1)
    assert set(history[0]) == {'l1', 'perceptual', 'adversarial', 'identity', 'generator', 'discriminator'}
    assert all(np.isfinite(value) for value in history[0].values())


@pytest.mark.slow
def test_syncnet_loss_decreases(config, dataset):
    config = config.replace(sync={'lr': 1e-3})
    history = [entry['bce'] for entry in SyncNetTrainer(config, dataset).fit(iterations=150)]
    assert np.mean(history[-20:]) < np.mean(history[:20])


@pytest.mark.slow
def test_lnet_reconstruction_improves(config, dataset):
    train('syncnet', config, dataset, iterations=1)
    config = config.replace(lnet={'lr': 1e-3})
    history = [entry['l1'] for entry in train_lnet(config, dataset, iterations=40)]
    assert np.mean(history[-5:]) < np.mean(history[:5])
