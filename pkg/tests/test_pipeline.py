import logging

import numpy as np
import pytest
import torch

from pyretalk import Retalk
from pyretalk.checkpoint import Checkpoint, save_checkpoint
from pyretalk.cli import _evaluate
from pyretalk.exceptions import MissingCheckpoint, ProviderFailure, StageFailure
from pyretalk.face_geometry import AlignmentTransform, load_template
from pyretalk.media_io import AudioTrack
from pyretalk.providers import KIND_LANDMARKS, ProviderRegistry
from pyretalk.pyretalk import BUILDERS, STAGE_DNET, STAGE_ENET, STAGE_ORDER
from pyretalk.sync_expert import SyncNet
from pyretalk.toy import generate_toy_dataset, make_toy_sample

from .fakes import FailingProvider, tiny_config


@pytest.fixture(scope='module')
def sample():
    return make_toy_sample(0, 0, seconds=0.4)


@pytest.fixture
def config(tmp_path):
    return tiny_config(tmp_path)


@pytest.fixture
def checkpoints(config):
    """Freshly initialized networks saved where the pipeline looks for them."""
    torch.manual_seed(0)
    for stage, build in BUILDERS.items():
        save_checkpoint(config.checkpoint_path(stage),
                        Checkpoint(stage=stage, config_hash=config.config_hash(), step=0,
                                   params=build(config).state_dict()))
    return config


def fresh_models(config, stages=('dnet', 'lnet', 'enet')) -> dict:
    torch.manual_seed(0)
    return {stage: BUILDERS[stage](config).eval() for stage in stages}


def test_run_from_checkpoints(checkpoints, sample):
    pipeline = Retalk(checkpoints)
    output = pipeline(sample.video, sample.audio)
    assert output.frames.shape == sample.video.frames.shape
    assert output.frames.dtype == np.uint8
    assert output.fps == sample.video.fps
    assert pipeline.manifest.order == list(STAGE_ORDER)
    assert all(entry['status'] == 'done' for entry in pipeline.manifest.stages)
    assert not any(param.requires_grad for param in pipeline.models['lnet'].parameters())


def test_missing_lnet_checkpoint(config, sample):
    config = config.replace(mode={'use_dnet': False, 'use_enet': False})
    with pytest.raises(MissingCheckpoint) as error:
        Retalk(config).run(sample.video, sample.audio)
    assert error.value.stage == 'lnet'


def test_provider_failure_names_the_stage(config, sample):
    registry = ProviderRegistry.from_config(config)
    registry.bind(KIND_LANDMARKS, FailingProvider())
    pipeline = Retalk(config, registry, models=fresh_models(config))
    with pytest.raises(StageFailure) as error:
        pipeline.run(sample.video, sample.audio)
    assert error.value.stage == 'crop_align'
    assert isinstance(error.value.__cause__, ProviderFailure)


def test_disabled_stages_are_skipped(config, sample):
    config = config.replace(mode={'use_dnet': False, 'use_enet': False})
    pipeline = Retalk(config, models=fresh_models(config, ('lnet',)))
    output = pipeline.run(sample.video, sample.audio)
    assert output.frames.shape == sample.video.frames.shape
    statuses = {entry['stage']: entry['status'] for entry in pipeline.manifest.stages}
    assert statuses[STAGE_DNET] == 'skipped'
    assert statuses[STAGE_ENET] == 'skipped'
    assert pipeline.manifest.order == list(STAGE_ORDER)


def test_lip_sync_covers_every_frame(config, caplog):
    caplog.set_level(logging.WARNING)
    pipeline = Retalk(config, models=fresh_models(config, ('lnet',))).load(['lnet'])
    targets = torch.rand(7, 3, 96, 96)
    audio = AudioTrack(np.random.default_rng(0).uniform(-0.5, 0.5, size=16000))
    out = pipeline.lip_sync(targets, targets, audio, 25)
    assert out.shape == (7, 3, 96, 96)
    assert 'Audio is shorter than the video' not in caplog.text

    short = AudioTrack(audio.samples[:1600])
    assert pipeline.lip_sync(targets, targets, short, 25).shape == (7, 3, 96, 96)
    assert 'Audio is shorter than the video' in caplog.text


def test_realign_with_identical_transforms():
    crops = np.random.default_rng(0).integers(0, 256, size=(2, 64, 64, 3), dtype=np.uint8)
    transforms = [AlignmentTransform(1.3, 0.2, 5.0, -3.0, size=64)] * 2
    out = Retalk.realign(crops, transforms, transforms)
    assert np.abs(out.astype(int) - crops.astype(int)).max() <= 1


@pytest.mark.parametrize('ratio, expected', [(0.0, 'neutral'), (1.0, 'smile')])
def test_template_interpolation_endpoints(config, ratio, expected):
    pipeline = Retalk(config.replace(mode={'interpolation_ratio': ratio}))
    assert np.array_equal(pipeline.template().expression, load_template(expected).expression)


def test_template_without_ratio(config):
    assert Retalk(config).template().label == 'neutral'
    assert Retalk(config).template('smile').label == 'smile'


def test_rebuild_from_manifest(config, sample, tmp_path):
    config = config.replace(mode={'use_dnet': False, 'use_enet': False})
    pipeline = Retalk(config, models=fresh_models(config, ('lnet',)))
    pipeline.run(sample.video, sample.audio)
    path = pipeline.manifest.save(tmp_path / 'run.json')
    assert Retalk.from_manifest(path).config.config_hash() == config.config_hash()


def test_reenact(config, sample):
    pipeline = Retalk(config, models=fresh_models(config, ('dnet',)))
    output = pipeline.reenact(sample.video, 'smile')
    assert output.frames.shape == sample.video.frames.shape
    assert pipeline.manifest.template == 'smile'


def test_seeded_rerun_gives_identical_report(checkpoints):
    config = checkpoints.replace(sync={'max_offset': 3})
    torch.manual_seed(1)
    save_checkpoint(config.checkpoint_path('syncnet'),
                    Checkpoint(stage='syncnet', config_hash=config.config_hash(), step=0,
                               params=SyncNet.from_config(config).state_dict()))
    dataset = generate_toy_dataset(2, seconds=0.6)

    first = _evaluate(config, dataset, 'unpaired', 1)
    second = _evaluate(config, dataset, 'unpaired', 1)
    assert first.lse_d is not None
    assert first.windows > 0
    assert first.to_json() == second.to_json()
