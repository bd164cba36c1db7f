"""
Encoder-decoder acoustic model.

Phoneme ids -> embedding -> input scheme (x + p, x + alpha*p or LN(x) + p) ->
pre-norm transformer encoder -> speaker conditioning. Frames are shifted right
behind a zero go-frame, passed through the pre-net, speaker-conditioned, given
positions and decoded with causal self-attention and encoder-decoder attention
into frame and stop predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tts_alignment_lab.alignment import (
    AttentionMatrix,
    attention_centroid,
    window_allowed,
    window_init,
    window_update,
)
from tts_alignment_lab.checkpoint import Checkpoint
from tts_alignment_lab.config import ModelConfig
from tts_alignment_lab.errors import CheckpointError, ConfigurationError, NumericError, ParameterError, ShapeError
from tts_alignment_lab.layers import DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear, Module
from tts_alignment_lab.tensor import Tensor, dropout, no_grad, relu, sigmoid, softsign

logger = logging.getLogger(__name__)

RngLike = Union[int, np.random.Generator, None]


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal positions: PE[pos, 2i] = sin(pos / 10000^(2i/dim)), PE[pos, 2i+1] = cos(...)."""
    if dim % 2:
        raise ParameterError(f"positional encoding needs an even dim, got {dim}")
    if length < 0:
        raise ParameterError("length must be non-negative")
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions / rates
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def encoder_input(
    x: Tensor,
    p: np.ndarray,
    mode: str,
    alpha: Optional[Tensor] = None,
    norm: Optional[LayerNorm] = None,
) -> Tensor:
    """Combine phoneme embeddings x with positions p according to the input mode."""
    if x.shape[-2:] != np.shape(p):
        raise ShapeError(f"embedding {x.shape} and positions {np.shape(p)} disagree")
    if mode == "baseline":
        return x + p
    if mode == "learnable_weight":
        if alpha is None:
            raise ConfigurationError("learnable_weight input needs the alpha parameter")
        return x + alpha * p
    if mode == "layer_norm":
        if norm is None:
            raise ConfigurationError("layer_norm input needs gamma and beta")
        return norm(x) + p
    raise ConfigurationError(f"unknown encoder input mode {mode!r}")


def position_similarity(combined: np.ndarray, p: np.ndarray) -> float:
    """Mean over positions of cos(combined[t], p[t])."""
    combined = np.asarray(combined, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if combined.shape != p.shape or combined.ndim != 2:
        raise ShapeError(f"position_similarity: {combined.shape} vs {p.shape}")
    norms = np.linalg.norm(combined, axis=1) * np.linalg.norm(p, axis=1)
    if np.any(norms == 0):
        raise NumericError("position_similarity: zero-norm row")
    return float(np.mean((combined * p).sum(axis=1) / norms))


@dataclass
class Batch:
    """Right-padded samples. Padding token id and padding frames are 0."""

    phonemes: np.ndarray
    frames: np.ndarray
    speakers: np.ndarray
    text_lengths: np.ndarray
    frame_lengths: np.ndarray

    @classmethod
    def collate(
        cls,
        phonemes: Sequence[Sequence[int]],
        frames: Sequence[np.ndarray],
        speakers: Sequence[int],
    ) -> "Batch":
        if not phonemes or not (len(phonemes) == len(frames) == len(speakers)):
            raise ShapeError("collate needs equally many phoneme, frame and speaker entries")
        text_lengths = np.array([len(ids) for ids in phonemes], dtype=np.int64)
        frame_lengths = np.array([len(f) for f in frames], dtype=np.int64)
        if text_lengths.min() < 1 or frame_lengths.min() < 1:
            raise ParameterError("every sample needs T >= 1 and S >= 1")
        frame_dim = np.shape(frames[0])[1]
        ids = np.zeros((len(phonemes), text_lengths.max()), dtype=np.int64)
        padded = np.zeros((len(frames), frame_lengths.max(), frame_dim))
        for i, (tokens, target) in enumerate(zip(phonemes, frames)):
            ids[i, :len(tokens)] = tokens
            padded[i, :len(target)] = target
        return cls(ids, padded, np.asarray(speakers, dtype=np.int64), text_lengths, frame_lengths)

    @property
    def size(self) -> int:
        return len(self.text_lengths)

    def text_mask(self) -> np.ndarray:
        return np.arange(self.phonemes.shape[1])[None, :] < self.text_lengths[:, None]

    def frame_mask(self) -> np.ndarray:
        return np.arange(self.frames.shape[1])[None, :] < self.frame_lengths[:, None]

    def stop_targets(self) -> np.ndarray:
        """1 at the last true frame of each sample, 0 elsewhere."""
        targets = np.zeros(self.frames.shape[:2])
        targets[np.arange(self.size), self.frame_lengths - 1] = 1.0
        return targets


@dataclass
class ForwardOutput:
    mel: Tensor
    stop_logits: Tensor
    cross_attention: List[Tensor]


@dataclass
class InferenceResult:
    """Outcome of autoregressive generation for one utterance."""

    mel: np.ndarray
    attention: np.ndarray
    stop_probabilities: np.ndarray
    centers: List[int] = field(default_factory=list)
    stopped_at: Optional[int] = None

    @property
    def num_frames(self) -> int:
        return len(self.mel)


class PreNet(Module):
    """Three linear layers; relu and dropout after the first two."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.widths = config.prenet_widths
        self.layers = [Linear(a, b, rng) for a, b in zip(self.widths, self.widths[1:])]
        self.dropout_rate = config.prenet_dropout_rate

    def __call__(self, frames: Tensor, active: bool, rng: np.random.Generator) -> Tensor:
        h = frames
        for index, layer in enumerate(self.layers):
            h = layer(h)
            if index < len(self.layers) - 1:
                h = dropout(relu(h), self.dropout_rate, active, rng)
        return h


class SpeakerModule(Module):
    """Speaker embedding -> softsign -> site-specific projection, added to hidden rows."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.num_speakers = config.num_speakers
        self.embedding = Embedding(config.num_speakers, config.speaker_dim, rng)
        self.encoder_projection = Linear(config.speaker_dim, config.hidden_size, rng)
        self.decoder_projection = Linear(config.speaker_dim, config.hidden_size, rng)

    def __call__(self, speakers: np.ndarray, site: str) -> Tensor:
        speakers = np.asarray(speakers, dtype=np.int64)
        if speakers.size and (speakers.min() < 0 or speakers.max() >= self.num_speakers):
            raise ParameterError(f"unknown speaker id in {speakers.tolist()} (have {self.num_speakers})")
        projection = self.encoder_projection if site == "encoder" else self.decoder_projection
        return projection(softsign(self.embedding(speakers)))


class AcousticModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        d = config.hidden_size
        self.phoneme_embedding = Embedding(config.vocab_size, d, rng, config.phoneme_scale_spread)
        self.alpha = (
            Tensor(np.ones(1), requires_grad=True)
            if config.encoder_input_mode == "learnable_weight"
            else None
        )
        self.input_norm = (
            LayerNorm(d, config.layer_norm_eps) if config.encoder_input_mode == "layer_norm" else None
        )
        self.speaker = SpeakerModule(config, rng)
        block = (d, config.num_heads, config.ffn_filter_size, config.ffn_kernel_size,
                 config.dropout_rate, config.layer_norm_eps)
        self.encoder_layers = [EncoderLayer(*block, rng) for _ in range(config.num_layers)]
        self.encoder_norm = LayerNorm(d, config.layer_norm_eps)
        self.decoder_prenet = PreNet(config, rng)
        self.decoder_layers = [DecoderLayer(*block, rng) for _ in range(config.num_layers)]
        self.decoder_norm = LayerNorm(d, config.layer_norm_eps)
        self.mel_projection = Linear(d, config.frame_dim, rng)
        self.stop_projection = Linear(d, 1, rng)

    # ----- pieces -----

    def _check_lengths(self, text_len: int, speech_len: int) -> None:
        if text_len < 1 or speech_len < 1:
            raise ParameterError("model needs T >= 1 and S >= 1")
        if text_len > self.config.max_text_len:
            raise ParameterError(f"text length {text_len} exceeds max_text_len {self.config.max_text_len}")
        if speech_len > self.config.max_frames:
            raise ParameterError(f"frame count {speech_len} exceeds max_frames {self.config.max_frames}")

    def _prenet_active(self, train: bool) -> bool:
        return train or self.config.prenet_dropout_at_inference

    def embed_text(self, phonemes: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        """Combined encoder input [B, T, d] and the positions that went into it."""
        x = self.phoneme_embedding(phonemes)
        p = positional_encoding(x.shape[-2], self.config.hidden_size)
        return encoder_input(x, p, self.config.encoder_input_mode, self.alpha, self.input_norm), p

    def encode(self, phonemes: np.ndarray, text_lengths: np.ndarray, speakers: np.ndarray,
               train: bool, rng: np.random.Generator) -> Tensor:
        combined, _ = self.embed_text(phonemes)
        h = dropout(combined, self.config.dropout_rate, train, rng)
        text_mask = np.arange(phonemes.shape[1])[None, :] < np.asarray(text_lengths)[:, None]
        allowed = text_mask[:, None, None, :]
        keep = text_mask[:, :, None].astype(np.float64)
        for layer in self.encoder_layers:
            h = layer(h, allowed, keep, train, rng)
        h = self.encoder_norm(h)
        return self.speaker_condition(h, speakers, site="encoder")

    def speaker_condition(self, hidden: Tensor, speaker, site: str = "encoder") -> Tensor:
        """Add the speaker vector to every row of hidden ([L, d] with one id, or [B, L, d])."""
        if hidden.ndim == 2:
            vector = self.speaker(np.array([speaker]), site)
            return hidden + vector.reshape(self.config.hidden_size)
        vector = self.speaker(np.asarray(speaker), site)
        return hidden + vector.reshape(hidden.shape[0], 1, self.config.hidden_size)

    def prenet(self, frames: Union[Tensor, np.ndarray], train: bool = False, rng_seed: RngLike = 0) -> Tensor:
        """Pre-net of one frame vector [F] -> [d], or of stacked frames [..., F] -> [..., d]."""
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        if frames.ndim < 1 or frames.shape[-1] != self.config.frame_dim:
            raise ShapeError(f"pre-net expects frame_dim {self.config.frame_dim}, got shape {frames.shape}")
        single = frames.ndim == 1
        if single:
            frames = frames.reshape(1, self.config.frame_dim)
        out = self.decoder_prenet(frames, self._prenet_active(train), np.random.default_rng(rng_seed))
        return out.reshape(self.config.hidden_size) if single else out

    # ----- execution -----

    def forward(self, batch: Batch, train: bool = False, rng: RngLike = None) -> ForwardOutput:
        """Teacher-forced pass over a padded batch."""
        rng = np.random.default_rng(0 if rng is None else rng)
        batch_size, max_text = batch.phonemes.shape
        max_frames = batch.frames.shape[1]
        self._check_lengths(max_text, max_frames)
        d = self.config.hidden_size

        memory = self.encode(batch.phonemes, batch.text_lengths, batch.speakers, train, rng)

        shifted = np.zeros_like(batch.frames)
        shifted[:, 1:] = batch.frames[:, :-1]
        h = self.decoder_prenet(Tensor(shifted), self._prenet_active(train), rng)
        h = self.speaker_condition(h, batch.speakers, site="decoder")
        h = h + positional_encoding(max_frames, d)
        h = dropout(h, self.config.dropout_rate, train, rng)

        self_allowed = np.tril(np.ones((max_frames, max_frames), dtype=bool))[None, None]
        cross_allowed = batch.text_mask()[:, None, None, :]
        keep = batch.frame_mask()[:, :, None].astype(np.float64)
        attention: List[Tensor] = []
        for layer in self.decoder_layers:
            h, weights = layer(h, memory, self_allowed, cross_allowed, keep, train, rng)
            attention.append(weights)
        h = self.decoder_norm(h)
        mel = self.mel_projection(h)
        stop = self.stop_projection(h).reshape(batch_size, max_frames)
        return ForwardOutput(mel=mel, stop_logits=stop, cross_attention=attention)

    def forward_teacher_forced(
        self,
        phonemes: Sequence[int],
        frames: np.ndarray,
        speaker: int,
        train: bool = False,
        rng: RngLike = None,
    ) -> Tuple[Tensor, Tensor, List[AttentionMatrix]]:
        """Single utterance: mel [S, F], stop logits [S], one AttentionMatrix per (layer, head)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.config.frame_dim:
            raise ShapeError(f"frames must be S x {self.config.frame_dim}, got {frames.shape}")
        batch = Batch.collate([list(phonemes)], [frames], [speaker])
        out = self.forward(batch, train=train, rng=rng)
        attns = [
            AttentionMatrix(weights[0, head])
            for weights in out.cross_attention
            for head in range(self.config.num_heads)
        ]
        return out.mel[0], out.stop_logits[0], attns

    def infer_autoregressive(
        self,
        phonemes: Sequence[int],
        speaker: int,
        window_enabled: bool = True,
        max_frames: Optional[int] = None,
        stop_threshold: float = 0.5,
        seed: int = 0,
    ) -> InferenceResult:
        """Generate frames one at a time, feeding each prediction back through the pre-net.

        With the window on, all encoder-decoder attention rows of a frame share one
        window; its state is updated once per frame from the layer-and-head mean row.
        """
        limit = self.config.max_frames if max_frames is None else max_frames
        if limit < 1:
            raise ParameterError("max_frames must be >= 1")
        if not 0.0 < stop_threshold <= 1.0:
            raise ParameterError("stop_threshold must be in (0, 1]")
        ids = np.asarray(phonemes, dtype=np.int64)[None, :]
        text_len = ids.shape[1]
        self._check_lengths(text_len, limit)
        speakers = np.array([speaker], dtype=np.int64)
        rng = np.random.default_rng(seed)
        prenet_active = self._prenet_active(False)

        frames: List[np.ndarray] = []
        rows: List[np.ndarray] = []
        probabilities: List[float] = []
        centers: List[int] = []
        stopped_at: Optional[int] = None
        state = window_init()
        with no_grad():
            memory = self.encode(ids, np.array([text_len]), speakers, False, rng)
            caches = [layer.start(memory) for layer in self.decoder_layers]
            positions = positional_encoding(limit, self.config.hidden_size)
            previous = np.zeros((1, 1, self.config.frame_dim))
            for step in range(limit):
                centers.append(state.center)
                allowed = window_allowed(state, text_len)[None, None, None, :] if window_enabled else None
                h = self.decoder_prenet(Tensor(previous), prenet_active, rng)
                h = self.speaker_condition(h, speakers, site="decoder") + positions[step]
                frame_rows = []
                for layer, cache in zip(self.decoder_layers, caches):
                    h, weights = layer.step(h, cache, allowed)
                    frame_rows.append(weights.data[0, :, 0, :])
                h = self.decoder_norm(h)
                frame = self.mel_projection(h).data
                probability = float(sigmoid(self.stop_projection(h).data[0, 0, 0]))

                frames.append(frame[0, 0].copy())
                rows.append(np.stack(frame_rows))
                probabilities.append(probability)
                if window_enabled:
                    centroid = attention_centroid(rows[-1].mean(axis=(0, 1)))
                    state = window_update(state, centroid, text_len)
                if probability > stop_threshold:
                    stopped_at = step + 1
                    break
                previous = frame

        if stopped_at is None:
            logger.debug("no stop within %d frames", limit)
        return InferenceResult(
            mel=np.stack(frames),
            attention=np.stack(rows).transpose(1, 2, 0, 3),
            stop_probabilities=np.array(probabilities),
            centers=centers,
            stopped_at=stopped_at,
        )

    # ----- diagnostics -----

    def input_position_similarity(self, phonemes: Sequence[int]) -> float:
        """Cosine similarity of the combined encoder input to its positions, for one sequence."""
        with no_grad():
            combined, p = self.embed_text(np.asarray(phonemes, dtype=np.int64)[None, :])
        return position_similarity(combined.data[0], p)

    @property
    def alpha_value(self) -> Optional[float]:
        return None if self.alpha is None else self.alpha.item()

    # ----- persistence -----

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, parameters: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(parameters))
        unexpected = sorted(set(parameters) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {unexpected}")
        for name, param in own.items():
            if param.shape != parameters[name].shape:
                raise CheckpointError(f"{name}: expected shape {param.shape}, got {parameters[name].shape}")
            param.data = np.array(parameters[name], dtype=np.float64)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "AcousticModel":
        model = cls(checkpoint.config.effective_model_config(), seed=checkpoint.config.seed)
        model.load_state_dict(checkpoint.parameters)
        return model
