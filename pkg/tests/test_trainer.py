"""Tests for losses, batching, training and evaluation"""

import math

import numpy as np
import pytest

from tts_alignment_lab.alignment import AttentionMatrix, DiagonalBand, uniform_attention_rate
from tts_alignment_lab.checkpoint import Checkpoint, load_checkpoint
from tts_alignment_lab.errors import CheckpointError, NumericError, TrainingDivergedError
from tts_alignment_lab.metrics import LOG_FIELDS, read_metrics_log
from tts_alignment_lab.model import AcousticModel, Batch
from tts_alignment_lab.synthdata import make_dataset
from tts_alignment_lab.tensor import Tensor, numerical_gradient, relative_error, softmax_lastdim
from tts_alignment_lab.trainer import (
    batched_dc_loss,
    evaluate,
    make_batches,
    mel_error,
    resolve_bandwidth,
    total_loss,
    train,
)

S, T = 6, 3


@pytest.fixture
def utterance(rng):
    mel_true = rng.normal(size=(S, 4))
    stop_true = np.eye(S)[S - 1]
    return mel_true, stop_true


def attention_from(logits):
    probs = softmax_lastdim(logits)
    return [AttentionMatrix(probs[i]) for i in range(logits.shape[0])]


# ===== LOSSES =====

def test_mel_error_kinds_and_mask():
    pred = Tensor(np.array([[[1.0], [3.0], [9.0]]]))
    target = np.zeros((1, 3, 1))
    mask = np.array([[True, True, False]])
    assert mel_error(pred, target, mask, "l1").item() == pytest.approx(2.0)
    assert mel_error(pred, target, mask, "l2").item() == pytest.approx(5.0)
    assert mel_error(pred, target, kind="l1").item() == pytest.approx(13.0 / 3.0)


def test_zero_lambda_gives_attention_no_gradient(rng, utterance):
    mel_true, stop_true = utterance
    logits = Tensor(rng.normal(size=(2, S, T)), requires_grad=True)
    mel_pred = Tensor(rng.normal(size=(S, 4)), requires_grad=True)
    band = DiagonalBand.for_lengths(S, T, 1)

    loss = total_loss(mel_pred, mel_true, Tensor(np.zeros(S)), stop_true, attention_from(logits), 0.0, band)
    loss.total.backward()
    assert logits.grad is None or not np.any(logits.grad)
    assert loss.dc < 0


def test_zero_lambda_loss_ignores_attention(rng, utterance):
    mel_true, stop_true = utterance
    band = DiagonalBand.for_lengths(S, T, 1)
    values = [
        total_loss(Tensor(mel_true), mel_true, Tensor(np.zeros(S)), stop_true,
                   attention_from(Tensor(rng.normal(size=(1, S, T)))), 0.0, band).total.item()
        for _ in range(3)
    ]
    assert values[0] == values[1] == values[2]


def test_perfect_predictions_leave_minus_lambda(utterance):
    mel_true, stop_true = utterance
    stop_logits = Tensor(np.where(stop_true > 0, 60.0, -60.0))
    diagonal = AttentionMatrix(Tensor(np.eye(S)))
    band = DiagonalBand.for_lengths(S, S, 0)
    loss = total_loss(Tensor(mel_true), mel_true, stop_logits, stop_true, [diagonal], 0.01, band)
    assert loss.total.item() == pytest.approx(-0.01, abs=1e-12)
    assert loss.mean_r == pytest.approx(1.0)


def test_lambda_term_gradient(rng, utterance):
    mel_true, stop_true = utterance
    logits = Tensor(rng.normal(size=(2, S, T)), requires_grad=True)
    band = DiagonalBand.for_lengths(S, T, 1)

    def loss():
        return total_loss(
            Tensor(mel_true), mel_true, Tensor(np.zeros(S)), stop_true, attention_from(logits), 0.5, band
        ).total

    loss().backward()
    assert relative_error(logits.grad, numerical_gradient(loss, logits)) <= 1e-4


def test_batched_dc_loss_matches_single_utterance(rng):
    weights = softmax_lastdim(Tensor(rng.normal(size=(1, 2, S, T))))
    batch = Batch.collate([[0] * T], [np.zeros((S, 4))], [0])
    band = DiagonalBand.for_lengths(S, T, 1)
    single = total_loss(
        Tensor(np.zeros((S, 4))), np.zeros((S, 4)), Tensor(np.zeros(S)), np.eye(S)[S - 1],
        [AttentionMatrix(weights[0, h]) for h in range(2)], 1.0, band,
    )
    assert batched_dc_loss([weights], batch, 1).item() == pytest.approx(single.dc, abs=1e-12)


def test_non_finite_term_is_named(utterance, mocker):
    mel_true, stop_true = utterance
    broken = Tensor(np.ones(1))
    broken.data[:] = np.inf
    mocker.patch("tts_alignment_lab.trainer.mel_error", return_value=broken)
    with pytest.raises(NumericError, match="mel"):
        total_loss(Tensor(mel_true), mel_true, Tensor(np.zeros(S)), stop_true,
                   [AttentionMatrix(Tensor(np.full((S, T), 1.0 / T)))], 0.1, DiagonalBand.for_lengths(S, T, 1))


# ===== BATCHING =====

def test_batches_cover_every_sample_once(small_dataset):
    samples = small_dataset.split("train")
    batches = make_batches(samples, 30, np.random.default_rng(0))
    flat = sorted(i for batch in batches for i in batch)
    assert flat == list(range(len(samples)))
    for batch in batches:
        assert len(batch) == 1 or sum(samples[i].S for i in batch) <= 30


def test_auto_bandwidth(small_train_config, small_dataset):
    mean_frames = np.mean([s.S for s in small_dataset.split("train")])
    assert resolve_bandwidth(small_train_config, small_dataset) == math.ceil(0.1 * mean_frames)
    fixed = small_train_config.model_copy(update={"bandwidth": 7})
    assert resolve_bandwidth(fixed, small_dataset) == 7


# ===== TRAINING =====

def test_training_is_deterministic(small_train_config, small_dataset):
    first = train(small_train_config, small_dataset, progress=False)
    second = train(small_train_config, small_dataset, progress=False)
    for key in ("mel_loss", "stop_loss", "dc_loss"):
        assert first.metrics.loss_curve(key) == second.metrics.loss_curve(key)
    for name, array in first.model.state_dict().items():
        assert array.tobytes() == second.model.state_dict()[name].tobytes()


def test_metrics_log_records_every_step(small_train_config, small_dataset, tmp_path):
    config = small_train_config.model_copy(update={"log_path": tmp_path / "metrics.jsonl"})
    train(config, small_dataset, progress=False)
    records = read_metrics_log(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in records] == [1, 2, 3]
    assert all(set(r) == set(LOG_FIELDS) for r in records)
    assert records[0]["r_valid"] is None
    assert 0.0 <= records[1]["r_valid"] <= 1.0
    assert all(math.isfinite(r["mel_loss"]) for r in records)


def test_divergence_reports_the_step(small_train_config, small_dataset, mocker):
    mocker.patch("tts_alignment_lab.trainer.batch_loss", side_effect=NumericError("mel loss is not finite"))
    with pytest.raises(TrainingDivergedError) as info:
        train(small_train_config, small_dataset, progress=False)
    assert info.value.step == 1


def test_checkpoint_reproduces_evaluation(small_train_config, small_dataset, tmp_path):
    config = small_train_config.model_copy(update={"checkpoint_path": tmp_path / "run.ckpt"})
    result = train(config, small_dataset, progress=False)
    direct = evaluate(result.checkpoint, small_dataset, limit=2)
    reloaded = evaluate(load_checkpoint(result.checkpoint_path), small_dataset, limit=2)
    assert direct.to_dict() == reloaded.to_dict()
    assert result.checkpoint.config.bandwidth is not None


# ===== EVALUATION =====

def test_uniform_attention_model_scores_the_uniform_rate(small_train_config, small_dataset):
    """Zero query projections make every encoder-decoder attention row uniform"""
    config = small_train_config.model_copy(update={"bandwidth": 1})
    model = AcousticModel(config.effective_model_config(), seed=config.seed)
    for layer in model.decoder_layers:
        layer.cross_attention.wq.weight.data[:] = 0.0
        layer.cross_attention.wq.bias.data[:] = 0.0
    checkpoint = Checkpoint(config=config, parameters=model.state_dict())

    report = evaluate(checkpoint, small_dataset, split="valid")
    expected = [uniform_attention_rate(s.S, s.T, 1) for s in small_dataset.split("valid")]
    np.testing.assert_allclose(report.per_sample_r, expected, atol=1e-12)


def test_autoregressive_report_is_bounded(small_train_config, small_dataset):
    result = train(small_train_config, small_dataset, progress=False)
    for window in (True, False):
        report = evaluate(result.checkpoint, small_dataset, teacher_forced=False, window_enabled=window, limit=2)
        assert len(report.per_sample_r) == 2
        assert all(0.0 <= r <= 1.0 for r in report.per_sample_r)
        assert 0.0 <= report.stop_accuracy <= 1.0
        assert set(report.position_similarity) == {"baseline", "learnable_weight", "layer_norm"}


def test_evaluate_rejects_other_task(small_train_config, small_dataset):
    result = train(small_train_config.model_copy(update={"total_steps": 1}), small_dataset, progress=False)
    other = make_dataset(small_dataset.config.model_copy(update={"seed": 8}))
    with pytest.raises(CheckpointError):
        evaluate(result.checkpoint, other)
