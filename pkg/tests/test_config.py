"""Tests for the config records and the flat config file format"""

import pytest

from tts_alignment_lab.config import (
    ModelConfig,
    TaskConfig,
    TrainConfig,
    dump_config,
    load_config,
    parse_config_text,
    save_config,
)
from tts_alignment_lab.errors import ConfigurationError

from conftest import tiny_model_kwargs

SMALL_FILE = """
# desk run
[task]
vocab_size = 6
num_speakers = 2
frame_dim = 4
speaker_speeds = 0.8, 1.25

[model]
num_layers = 1
hidden_size = 8
num_heads = 1
prenet_bottleneck_size = 2
frame_dim = 4
vocab_size = 6
num_speakers = 2

[train]
dc_weight = 0.05
bandwidth = none   # auto
use_pb = false
"""


def test_parse_small_file():
    config = parse_config_text(SMALL_FILE)
    assert config.task.speaker_speeds == [0.8, 1.25]
    assert config.model.hidden_size == 8
    assert config.dc_weight == 0.05
    assert config.bandwidth is None
    assert config.use_pb is False


def test_dump_then_parse_is_identity(small_train_config):
    config = small_train_config.model_copy(update={"bandwidth": 3, "dc_layer_weights": [2.0]})
    assert parse_config_text(dump_config(config)) == config


def test_save_and_load(tmp_path, small_train_config):
    path = tmp_path / "lab.cfg"
    save_config(small_train_config, path)
    assert load_config(path) == small_train_config


@pytest.mark.parametrize(
    "text",
    [
        "[task]\nno_such_key = 1\n",
        "[weird]\nx = 1\n",
        "[train]\ndc_weight = 0.1\ndc_weight = 0.2\n",
        "dc_weight = 0.1\n",
        "[train]\njust a line\n",
        "[train]\nmodel = 3\n",
        "[train]\ndc_weight = -1\n",
    ],
    ids=["unknown-key", "unknown-section", "duplicate", "no-section", "no-equals", "reserved", "negative"],
)
def test_bad_files_raise_configuration_error(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.cfg")


# ===== VALIDATION =====

def test_model_and_task_must_agree():
    with pytest.raises(ValueError):
        TrainConfig(model=ModelConfig(**tiny_model_kwargs()), task=TaskConfig())


def test_heads_must_divide_hidden():
    with pytest.raises(ValueError):
        ModelConfig(**tiny_model_kwargs(num_heads=3))


def test_bottleneck_must_be_narrower_than_frames():
    with pytest.raises(ValueError):
        ModelConfig(**tiny_model_kwargs(prenet_bottleneck_size=4))
    ModelConfig(**tiny_model_kwargs(prenet_bottleneck_size=4, prenet_bottleneck_enabled=False))


def test_task_ranges_are_checked():
    with pytest.raises(ValueError):
        TaskConfig(min_tokens=5, max_tokens=3)
    with pytest.raises(ValueError):
        TaskConfig(num_speakers=2, speaker_speeds=[1.0])


def test_layer_weights_need_one_per_layer(small_task):
    with pytest.raises(ValueError):
        TrainConfig(model=ModelConfig(**tiny_model_kwargs()), task=small_task, dc_layer_weights=[1.0, 1.0])


# ===== ABLATION FLAGS =====

def test_full_scale_prenet_widths():
    config = TrainConfig.full_scale()
    assert config.effective_model_config().prenet_widths == [80, 32, 32, 256]
    wide = config.model_copy(update={"use_pb": False})
    assert wide.effective_model_config().prenet_widths == [80, 256, 256, 256]


def test_desk_defaults_keep_a_narrow_bottleneck():
    model = TrainConfig.desk().effective_model_config()
    assert model.prenet_widths[1] < model.frame_dim


def test_desk_and_full_scale_diagonal_weights():
    desk = TrainConfig.desk()
    assert desk.dc_weight == pytest.approx(0.1)
    assert desk.model.phoneme_scale_spread > 1.0
    full = TrainConfig.full_scale()
    assert full.dc_weight == pytest.approx(0.01)
    assert full.model.phoneme_scale_spread == 1.0


def test_flags_drive_effective_values():
    config = TrainConfig(use_dc=False, use_ln=False)
    assert config.effective_dc_weight == 0.0
    assert config.window_at_inference is False
    assert config.effective_model_config().encoder_input_mode == "baseline"
    assert config.model.encoder_input_mode == "layer_norm"
