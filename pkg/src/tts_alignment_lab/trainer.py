"""
Losses, batching, the training loop and evaluation.

The training objective is

    mel error + weighted BCE(stop) + lambda * L_DC,    L_DC = -mean r

where r is the diagonal attention rate of every (layer, head, sample). With the
diagonal constraint switched off the L_DC value is still computed for the log,
but on detached weights so it contributes no gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from tts_alignment_lab.alignment import (
    AttentionMatrix,
    DiagonalBand,
    batched_diagonal_rates,
    diagonal_constraint_loss,
    diagonal_rate,
)
from tts_alignment_lab.checkpoint import Checkpoint, save_checkpoint
from tts_alignment_lab.config import ENCODER_INPUT_MODES, TrainConfig
from tts_alignment_lab.errors import CheckpointError, ConfigurationError, NumericError, TrainingDivergedError
from tts_alignment_lab.metrics import MetricsTracker
from tts_alignment_lab.layers import LayerNorm
from tts_alignment_lab.model import (
    AcousticModel,
    Batch,
    ForwardOutput,
    encoder_input,
    position_similarity,
    positional_encoding,
)
from tts_alignment_lab.optim import Adam, noam_lr
from tts_alignment_lab.settings import get_settings
from tts_alignment_lab.synthdata import Dataset, SyntheticSample, dataset_stats, make_dataset
from tts_alignment_lab.tensor import Tensor, bce_with_logits, no_grad, sigmoid, tensor_abs, tensor_sum

logger = logging.getLogger(__name__)

EVAL_CHUNK = 16


# ===== LOSSES =====

@dataclass
class LossBreakdown:
    total: Tensor
    mel: float
    stop: float
    dc: float

    @property
    def mean_r(self) -> float:
        return -self.dc


def mel_error(pred: Tensor, target: np.ndarray, frame_mask: Optional[np.ndarray] = None, kind: str = "l1") -> Tensor:
    """Mean absolute (l1) or squared (l2) error over the unpadded frames."""
    diff = pred - np.asarray(target, dtype=np.float64)
    elementwise = tensor_abs(diff) if kind == "l1" else diff * diff
    if frame_mask is None:
        return elementwise.mean()
    weights = np.asarray(frame_mask, dtype=np.float64)[..., None]
    count = weights.sum() * pred.shape[-1]
    return tensor_sum(elementwise * weights) * (1.0 / count)


def _checked(name: str, term: Tensor) -> Tensor:
    if not np.all(np.isfinite(term.data)):
        raise NumericError(f"{name} loss is not finite")
    return term


def _combine(mel: Tensor, stop: Tensor, dc: Tensor, dc_weight: float) -> LossBreakdown:
    mel, stop, dc = _checked("mel", mel), _checked("stop", stop), _checked("diagonal", dc)
    total = mel + stop
    if dc_weight > 0:
        total = total + dc * dc_weight
    return LossBreakdown(total=_checked("total", total), mel=mel.item(), stop=stop.item(), dc=dc.item())


def total_loss(
    mel_pred: Tensor,
    mel_true: np.ndarray,
    stop_logits: Tensor,
    stop_true: np.ndarray,
    attns: Sequence[AttentionMatrix],
    dc_weight: float,
    band: DiagonalBand,
    mel_loss: str = "l1",
    stop_pos_weight: float = 5.0,
    frame_mask: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """Loss of one utterance from its (layer, head) attention matrices."""
    mel = mel_error(mel_pred, mel_true, frame_mask, mel_loss)
    stop = bce_with_logits(stop_logits, stop_true, stop_pos_weight, frame_mask)
    if dc_weight > 0:
        dc = diagonal_constraint_loss(attns, band)
    else:
        dc = diagonal_constraint_loss([AttentionMatrix(a.weights.detach()) for a in attns], band)
    return _combine(mel, stop, dc, dc_weight)


def batched_dc_loss(
    cross_attention: Sequence[Tensor],
    batch: Batch,
    bandwidth: int,
    layer_weights: Optional[Sequence[float]] = None,
) -> Tensor:
    """-(weighted mean over layers of the mean rate over samples and heads)."""
    weights = list(layer_weights) if layer_weights is not None else [1.0] * len(cross_attention)
    norm = sum(weights)
    total: Optional[Tensor] = None
    for weight, attention in zip(weights, cross_attention):
        rates = batched_diagonal_rates(attention, batch.text_lengths, batch.frame_lengths, bandwidth)
        term = rates.mean() * (weight / norm)
        total = term if total is None else total + term
    return total * -1.0


def batch_loss(output: ForwardOutput, batch: Batch, config: TrainConfig, bandwidth: int) -> LossBreakdown:
    frame_mask = batch.frame_mask()
    mel = mel_error(output.mel, batch.frames, frame_mask, config.mel_loss)
    stop = bce_with_logits(output.stop_logits, batch.stop_targets(), config.stop_pos_weight, frame_mask)
    dc_weight = config.effective_dc_weight
    attention = output.cross_attention
    if dc_weight == 0:
        attention = [a.detach() for a in attention]
    dc = batched_dc_loss(attention, batch, bandwidth, config.dc_layer_weights)
    return _combine(mel, stop, dc, dc_weight)


# ===== BATCHING =====

def make_batches(samples: Sequence[SyntheticSample], batch_frames: int, rng: np.random.Generator) -> List[List[int]]:
    """Shuffle, then pack samples greedily until the frame budget would be exceeded."""
    batches: List[List[int]] = []
    current: List[int] = []
    frames = 0
    for index in rng.permutation(len(samples)):
        length = samples[index].S
        if current and frames + length > batch_frames:
            batches.append(current)
            current, frames = [], 0
        current.append(int(index))
        frames += length
    if current:
        batches.append(current)
    return batches


def collate_samples(samples: Sequence[SyntheticSample]) -> Batch:
    return Batch.collate([s.phonemes for s in samples], [s.frames for s in samples], [s.speaker for s in samples])


def resolve_bandwidth(config: TrainConfig, dataset: Dataset) -> int:
    """Configured b, or ceil(0.1 * mean S) of the train split."""
    if config.bandwidth is not None:
        return config.bandwidth
    mean_frames = dataset_stats(dataset)["train"].mean_frames
    return math.ceil(0.1 * mean_frames)


def teacher_forced_rates(model: AcousticModel, samples: Sequence[SyntheticSample], bandwidth: int) -> List[float]:
    """Per-sample r of the layer-and-head mean attention without layer dropout."""
    rates: List[float] = []
    with no_grad():
        for start in range(0, len(samples), EVAL_CHUNK):
            batch = collate_samples(samples[start:start + EVAL_CHUNK])
            output = model.forward(batch, train=False, rng=0)
            per_layer = [
                batched_diagonal_rates(a, batch.text_lengths, batch.frame_lengths, bandwidth).data.mean(axis=1)
                for a in output.cross_attention
            ]
            rates.extend(float(r) for r in np.mean(per_layer, axis=0))
    return rates


def _check_dataset(config: TrainConfig, dataset: Dataset) -> None:
    if dataset.config != config.task:
        raise ConfigurationError("dataset was generated from a different task config than the run's")


# ===== TRAINING =====

@dataclass
class TrainResult:
    model: AcousticModel
    optimizer: Adam
    config: TrainConfig
    metrics: MetricsTracker
    checkpoint: Checkpoint
    checkpoint_path: Optional[Path] = None


def train(config: TrainConfig, dataset: Optional[Dataset] = None, progress: Optional[bool] = None) -> TrainResult:
    """Teacher-forced training with Adam and the warmup schedule; returns the final state."""
    dataset = dataset if dataset is not None else make_dataset(config.task)
    _check_dataset(config, dataset)
    bandwidth = resolve_bandwidth(config, dataset)
    config = config.model_copy(update={"bandwidth": bandwidth})
    model_config = config.effective_model_config()

    model = AcousticModel(model_config, seed=config.seed)
    optimizer = Adam(list(model.named_parameters()), config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    rng = np.random.default_rng([config.seed, 1])
    tracker = MetricsTracker(config.log_path)
    train_samples = dataset.split("train")
    valid_samples = dataset.split("valid")[:config.valid_samples]
    show = get_settings().progress if progress is None else progress

    logger.info(
        "training %d steps: lambda=%s b=%d input=%s prenet=%s",
        config.total_steps, config.effective_dc_weight, bandwidth,
        model_config.encoder_input_mode, "-".join(map(str, model_config.prenet_widths)),
    )
    bar = tqdm(total=config.total_steps, desc="train", unit="step", disable=not show)
    step = 0
    while step < config.total_steps:
        for indices in make_batches(train_samples, config.batch_frames, rng):
            step += 1
            batch = collate_samples([train_samples[i] for i in indices])
            lr = noam_lr(step, model_config.hidden_size, config.warmup_steps, config.lr_scale)
            optimizer.zero_grad()
            try:
                output = model.forward(batch, train=True, rng=rng)
                loss = batch_loss(output, batch, config, bandwidth)
                loss.total.backward()
                optimizer.step(lr, config.grad_clip_norm)
            except NumericError as exc:
                bar.close()
                raise TrainingDivergedError(step, str(exc)) from exc

            r_valid = None
            if valid_samples and (step % config.eval_every == 0 or step == config.total_steps):
                r_valid = float(np.mean(teacher_forced_rates(model, valid_samples, bandwidth)))
            tracker.track_step(step, lr, loss.mel, loss.stop, loss.dc, r_valid)
            if step % config.log_every == 0:
                logger.info("step %d lr=%.2e mel=%.4f stop=%.4f dc=%.4f", step, lr, loss.mel, loss.stop, loss.dc)
            bar.update(1)
            bar.set_postfix(mel=f"{loss.mel:.3f}", r=f"{loss.mean_r:.3f}")
            if step >= config.total_steps:
                break
    bar.close()

    checkpoint = Checkpoint(config=config, parameters=model.state_dict(), optimizer=optimizer.state)
    path = save_checkpoint(checkpoint, config.checkpoint_path) if config.checkpoint_path else None
    return TrainResult(model, optimizer, config, tracker, checkpoint, path)


# ===== EVALUATION =====

@dataclass
class EvalReport:
    split: str
    teacher_forced: bool
    window_enabled: bool
    mean_r: float
    mel_loss: float
    stop_accuracy: float
    per_sample_r: List[float] = field(default_factory=list)
    position_similarity: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


def mode_similarities(model: AcousticModel, phonemes: Sequence[int]) -> Dict[str, float]:
    """Similarity of the combined encoder input to p under every input mode.

    The model's own mode uses its trained alpha or gamma/beta; the other modes
    reuse its phoneme embeddings with alpha = 1 and gamma = 1, beta = 0.
    """
    ids = np.asarray(phonemes, dtype=np.int64)
    p = positional_encoding(len(ids), model.config.hidden_size)
    with no_grad():
        x = model.phoneme_embedding(ids)
        alpha = model.alpha if model.alpha is not None else Tensor(np.ones(1))
        norm = model.input_norm or LayerNorm(model.config.hidden_size, model.config.layer_norm_eps)
        return {
            mode: position_similarity(encoder_input(x, p, mode, alpha, norm).data, p)
            for mode in ENCODER_INPUT_MODES
        }


def _stop_hits(probabilities: np.ndarray, true_frames: int, threshold: float) -> np.ndarray:
    targets = np.zeros(len(probabilities))
    if true_frames - 1 < len(probabilities):
        targets[true_frames - 1] = 1.0
    return (probabilities > threshold) == (targets > 0.5)


def evaluate(
    checkpoint: Checkpoint,
    dataset: Optional[Dataset] = None,
    split: str = "valid",
    teacher_forced: bool = True,
    window_enabled: Optional[bool] = None,
    limit: Optional[int] = None,
    seed: int = 0,
) -> EvalReport:
    """Diagonal rate, mel loss, stop accuracy and position similarity on one split."""
    config = checkpoint.config
    dataset = dataset if dataset is not None else make_dataset(config.task)
    if dataset.config != config.task:
        raise CheckpointError("checkpoint was trained on a different task config than the dataset")
    model = AcousticModel.from_checkpoint(checkpoint)
    bandwidth = resolve_bandwidth(config, dataset)
    window = config.window_at_inference if window_enabled is None else window_enabled
    samples = dataset.split(split)[:limit]

    rates: List[float] = []
    mel_losses: List[float] = []
    stop_hits: List[np.ndarray] = []
    similarities: Dict[str, List[float]] = {mode: [] for mode in ENCODER_INPUT_MODES}
    for index, sample in enumerate(samples):
        for mode, value in mode_similarities(model, sample.phonemes).items():
            similarities[mode].append(value)
        if teacher_forced:
            with no_grad():
                mel, stop_logits, attns = model.forward_teacher_forced(
                    sample.phonemes, sample.frames, sample.speaker, rng=seed
                )
            attention = np.mean([a.numpy() for a in attns], axis=0)
            probabilities = sigmoid(stop_logits.data)
            predicted = mel.data
        else:
            cap = min(model.config.max_frames, math.ceil(config.max_len_ratio * sample.T))
            result = model.infer_autoregressive(
                sample.phonemes, sample.speaker, window, cap, config.stop_threshold, seed=seed + index
            )
            attention = result.attention.mean(axis=(0, 1))
            probabilities = result.stop_probabilities
            predicted = result.mel

        matrix = AttentionMatrix(Tensor(attention))
        band = DiagonalBand.for_lengths(matrix.S, matrix.T, bandwidth)
        rates.append(diagonal_rate(matrix, band).item())
        overlap = min(len(predicted), sample.S)
        mel_losses.append(
            mel_error(Tensor(predicted[:overlap]), sample.frames[:overlap], kind=config.mel_loss).item()
        )
        stop_hits.append(_stop_hits(probabilities[:overlap], sample.S, config.stop_threshold))

    report = EvalReport(
        split=split,
        teacher_forced=teacher_forced,
        window_enabled=window,
        mean_r=float(np.mean(rates)) if rates else 0.0,
        mel_loss=float(np.mean(mel_losses)) if mel_losses else 0.0,
        stop_accuracy=float(np.concatenate(stop_hits).mean()) if stop_hits else 0.0,
        per_sample_r=rates,
        position_similarity={mode: float(np.mean(v)) for mode, v in similarities.items() if v},
    )
    logger.info(
        "%s %s r=%.4f mel=%.4f stop_acc=%.3f",
        split, "tf" if teacher_forced else "ar", report.mean_r, report.mel_loss, report.stop_accuracy,
    )
    return report
