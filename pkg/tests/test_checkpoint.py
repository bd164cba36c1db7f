"""Tests for the ATLAB1 checkpoint format"""

import numpy as np
import pytest

from tts_alignment_lab.checkpoint import (
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from tts_alignment_lab.config import ModelConfig, TrainConfig
from tts_alignment_lab.errors import CheckpointError
from tts_alignment_lab.model import AcousticModel
from tts_alignment_lab.optim import Adam

from conftest import tiny_model_kwargs


@pytest.fixture
def checkpoint(small_task):
    config = TrainConfig(model=ModelConfig(**tiny_model_kwargs()), task=small_task, bandwidth=2)
    model = AcousticModel(config.effective_model_config(), seed=3)
    optimizer = Adam(list(model.named_parameters()))
    optimizer.state.step = 7
    for m in optimizer.state.first_moment:
        m += 0.25
    return Checkpoint(config=config, parameters=model.state_dict(), optimizer=optimizer.state)


def test_save_load_is_bit_exact(checkpoint, tmp_path):
    path = save_checkpoint(checkpoint, tmp_path / "run" / "model.ckpt")
    loaded = load_checkpoint(path)

    assert loaded.config == checkpoint.config
    assert list(loaded.parameters) == list(checkpoint.parameters)
    for name, array in checkpoint.parameters.items():
        assert loaded.parameters[name].tobytes() == array.tobytes()
    assert loaded.optimizer.step == 7
    for saved, restored in zip(checkpoint.optimizer.first_moment, loaded.optimizer.first_moment):
        assert saved.tobytes() == restored.tobytes()


def test_optimizer_state_resumes_from_checkpoint(checkpoint):
    loaded = decode_checkpoint(encode_checkpoint(checkpoint))
    model = AcousticModel.from_checkpoint(loaded)
    optimizer = Adam(list(model.named_parameters()))
    optimizer.load_state(loaded.optimizer)
    assert optimizer.state.step == 7
    assert all(np.all(m == 0.25) for m in optimizer.state.first_moment)


def test_checkpoint_without_optimizer(checkpoint):
    checkpoint.optimizer = None
    assert decode_checkpoint(encode_checkpoint(checkpoint)).optimizer is None


def test_loaded_parameters_rebuild_the_model(checkpoint):
    model = AcousticModel.from_checkpoint(decode_checkpoint(encode_checkpoint(checkpoint)))
    for name, array in model.state_dict().items():
        np.testing.assert_array_equal(array, checkpoint.parameters[name])


@pytest.mark.parametrize(
    "mutate",
    [
        lambda blob: b"XXXXXX" + blob[len(MAGIC):],
        lambda blob: blob[:-5],
        lambda blob: blob + b"\x00",
    ],
    ids=["bad-magic", "truncated", "trailing-bytes"],
)
def test_corrupt_files_are_rejected(checkpoint, mutate):
    with pytest.raises(CheckpointError):
        decode_checkpoint(mutate(encode_checkpoint(checkpoint)))


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
