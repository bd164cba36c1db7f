import os

import numpy as np
import pytest

# Set test environment BEFORE any imports
os.environ["ATLAB_THREADS"] = "1"
os.environ["ATLAB_PROGRESS"] = "false"
os.environ["ATLAB_LOG_LEVEL"] = "WARNING"

from tts_alignment_lab.config import ModelConfig, TaskConfig, TrainConfig  # noqa: E402
from tts_alignment_lab.synthdata import make_dataset  # noqa: E402


def tiny_model_kwargs(**overrides):
    """The gradient-check sized model: d=8, one layer, one head."""
    values = dict(
        num_layers=1,
        hidden_size=8,
        num_heads=1,
        ffn_filter_size=6,
        ffn_kernel_size=3,
        prenet_bottleneck_size=2,
        frame_dim=4,
        vocab_size=6,
        num_speakers=2,
        speaker_dim=3,
        dropout_rate=0.1,
        prenet_dropout_at_inference=False,
        max_text_len=16,
        max_frames=64,
    )
    values.update(overrides)
    return values


@pytest.fixture
def tiny_model_config():
    return ModelConfig(**tiny_model_kwargs())


@pytest.fixture(scope="session")
def small_task():
    return TaskConfig(
        vocab_size=6,
        num_speakers=2,
        frame_dim=4,
        min_tokens=2,
        max_tokens=5,
        min_duration=1,
        max_duration=3,
        train_size=12,
        valid_size=4,
        test_size=3,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_dataset(small_task):
    return make_dataset(small_task)


@pytest.fixture
def small_train_config(small_task):
    return TrainConfig(
        model=ModelConfig(**tiny_model_kwargs()),
        task=small_task,
        total_steps=3,
        warmup_steps=2,
        batch_frames=30,
        eval_every=2,
        valid_samples=2,
        log_every=1,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
