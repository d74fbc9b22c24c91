import pytest
import torch

from pyretalk.checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
from pyretalk.exceptions import MissingCheckpoint, RetalkPipelineException


@pytest.fixture
def model() -> torch.nn.Module:
    torch.manual_seed(0)
    return torch.nn.Sequential(torch.nn.Linear(4, 3), torch.nn.BatchNorm1d(3))


@pytest.fixture
def saved(tmp_path, model):
    checkpoint = Checkpoint(stage='syncnet', config_hash='abc123', step=7, params=model.state_dict(),
                            history=[{'step': 7, 'loss': 0.5}], extra={'note': 'x'})
    return save_checkpoint(tmp_path / 'nested' / 'syncnet.ckpt', checkpoint)


def test_round_trip(saved, model):
    loaded = load_checkpoint(saved, 'syncnet')
    assert loaded.step == 7
    assert loaded.config_hash == 'abc123'
    assert loaded.history == [{'step': 7, 'loss': 0.5}]
    assert loaded.extra == {'note': 'x'}
    for name, tensor in model.state_dict().items():
        assert torch.equal(loaded.params[name], tensor)


def test_no_partial_file_left(saved):
    assert saved.is_file()
    assert [path.name for path in saved.parent.iterdir()] == ['syncnet.ckpt']


def test_load_model_freezes(saved):
    torch.manual_seed(1)
    fresh = torch.nn.Sequential(torch.nn.Linear(4, 3), torch.nn.BatchNorm1d(3))
    loaded = load_model(fresh, saved, 'syncnet')
    assert loaded is fresh
    assert not loaded.training
    assert not any(param.requires_grad for param in loaded.parameters())


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpoint) as error:
        load_checkpoint(tmp_path / 'absent.ckpt', 'lnet')
    assert error.value.stage == 'lnet'


def test_wrong_stage(saved):
    with pytest.raises(RetalkPipelineException, match="holds stage 'syncnet'"):
        load_checkpoint(saved, 'dnet')
