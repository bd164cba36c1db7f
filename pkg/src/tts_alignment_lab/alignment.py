"""
Diagonal attention band, diagonal attention rate, the diagonal constraint loss,
and the inference-time sliding attention window.

Orientation: an AttentionMatrix stores one row per decoder frame s and one column
per encoder position t (S x T). The band is the set of cells with |s - k*t| <= b,
k = S/T, clipped to the matrix. All indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from tts_alignment_lab.errors import ParameterError, ShapeError
from tts_alignment_lab.tensor import Tensor, tensor_sum

ROW_TOLERANCE = 1e-9
FLOAT_BAND_SLACK = 1e-12

Bandwidth = Union[int, float]


@dataclass
class AttentionMatrix:
    """Row-stochastic encoder-decoder attention of one (layer, head)."""

    weights: Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.weights, Tensor):
            self.weights = Tensor(self.weights)
        if self.weights.ndim != 2:
            raise ShapeError(f"attention matrix must be S x T, got {self.weights.shape}")
        speech_len, text_len = self.weights.shape
        if speech_len < 1 or text_len < 1:
            raise ShapeError("attention matrix needs S >= 1 and T >= 1")
        data = self.weights.data
        if np.any(data < 0) or np.any(np.abs(data.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise ParameterError("attention rows must be non-negative and sum to 1")

    @property
    def S(self) -> int:
        return self.weights.shape[0]

    @property
    def T(self) -> int:
        return self.weights.shape[1]

    def numpy(self) -> np.ndarray:
        return self.weights.data


@dataclass(frozen=True)
class DiagonalBand:
    """Half-width b (speech frames) around the line s = k*t with k = S/T."""

    b: Bandwidth
    k: Fraction
    speech_len: Optional[int] = None
    text_len: Optional[int] = None

    def __post_init__(self) -> None:
        if self.b < 0:
            raise ParameterError("bandwidth b must be >= 0")
        if self.k <= 0:
            raise ParameterError("slope k must be positive")

    @classmethod
    def for_lengths(cls, speech_len: int, text_len: int, b: Bandwidth) -> "DiagonalBand":
        if speech_len < 1 or text_len < 1:
            raise ParameterError("band needs S >= 1 and T >= 1")
        return cls(b=b, k=Fraction(speech_len, text_len), speech_len=speech_len, text_len=text_len)


def _within(distance: Fraction, b: Bandwidth) -> bool:
    if float(b).is_integer():
        return distance <= int(b)
    return float(distance) <= b + FLOAT_BAND_SLACK


def in_band(t: int, s: int, band: DiagonalBand) -> bool:
    """True iff |s - k*t| <= b, evaluated exactly with rational k."""
    if t < 0 or s < 0:
        raise ParameterError("band indices must be non-negative")
    if band.text_len is not None and t >= band.text_len:
        raise ParameterError(f"encoder index {t} outside [0, {band.text_len})")
    if band.speech_len is not None and s >= band.speech_len:
        raise ParameterError(f"decoder index {s} outside [0, {band.speech_len})")
    return _within(abs(Fraction(s) - band.k * t), band.b)


def band_mask(speech_len: int, text_len: int, b: Bandwidth) -> np.ndarray:
    """Boolean S x T mask of in-band cells: |s*T - S*t| <= b*T in integers."""
    s = np.arange(speech_len, dtype=np.int64)[:, None]
    t = np.arange(text_len, dtype=np.int64)[None, :]
    scaled = np.abs(s * text_len - speech_len * t)
    if float(b).is_integer():
        return scaled <= int(b) * text_len
    return scaled / text_len <= b + FLOAT_BAND_SLACK


def _check_band(attn: AttentionMatrix, band: DiagonalBand) -> None:
    if band.k != Fraction(attn.S, attn.T):
        raise ParameterError(f"band slope {band.k} does not match S/T = {attn.S}/{attn.T}")


def diagonal_rate(attn: AttentionMatrix, band: DiagonalBand) -> Tensor:
    """r = (attention mass inside the band) / S; differentiable w.r.t. the weights."""
    _check_band(attn, band)
    mask = band_mask(attn.S, attn.T, band.b).astype(np.float64)
    return tensor_sum(attn.weights * mask) * (1.0 / attn.S)


def diagonal_constraint_loss(attns: Sequence[AttentionMatrix], band: DiagonalBand) -> Tensor:
    """L_DC = -mean of the per-matrix diagonal rates (the trainer applies lambda)."""
    if not attns:
        raise ParameterError("diagonal constraint loss needs at least one attention matrix")
    shape = (attns[0].S, attns[0].T)
    if any((a.S, a.T) != shape for a in attns):
        raise ShapeError("all attention matrices must share S and T")
    total = diagonal_rate(attns[0], band)
    for attn in attns[1:]:
        total = total + diagonal_rate(attn, band)
    return total * (-1.0 / len(attns))


def batched_band_mask(
    text_lengths: Sequence[int],
    frame_lengths: Sequence[int],
    max_frames: int,
    max_text: int,
    b: Bandwidth,
) -> np.ndarray:
    """[B, 1, S_max, T_max] float mask; padded cells are 0."""
    mask = np.zeros((len(text_lengths), 1, max_frames, max_text))
    for i, (text_len, speech_len) in enumerate(zip(text_lengths, frame_lengths)):
        mask[i, 0, :speech_len, :text_len] = band_mask(speech_len, text_len, b)
    return mask


def batched_diagonal_rates(
    weights: Tensor,
    text_lengths: Sequence[int],
    frame_lengths: Sequence[int],
    b: Bandwidth,
) -> Tensor:
    """Per-(sample, head) rates [B, H] of padded attention weights [B, H, S_max, T_max].

    Padded frames and tokens are excluded; each sample is divided by its true S.
    """
    if weights.ndim != 4:
        raise ShapeError(f"expected [B, H, S, T] attention, got {weights.shape}")
    _, _, max_frames, max_text = weights.shape
    mask = batched_band_mask(text_lengths, frame_lengths, max_frames, max_text, b)
    inside = tensor_sum(weights * mask, axis=(2, 3))
    scale = 1.0 / np.asarray(frame_lengths, dtype=np.float64)[:, None]
    return inside * scale


def uniform_attention_rate(speech_len: int, text_len: int, b: Bandwidth) -> float:
    """Rate of an attention matrix whose rows are uniform over all T positions."""
    return float(band_mask(speech_len, text_len, b).sum()) / (speech_len * text_len)


def average_attention(attns: Sequence[AttentionMatrix]) -> AttentionMatrix:
    """Head-and-layer mean of matrices sharing S and T."""
    if not attns:
        raise ParameterError("nothing to average")
    stacked = np.stack([a.numpy() for a in attns])
    return AttentionMatrix(Tensor(stacked.mean(axis=0)))


def attention_centroid(row: np.ndarray) -> int:
    """floor(sum_t row[t] * t); sums within 1e-9 below an integer round up first."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size < 1:
        raise ShapeError("centroid needs a non-empty vector")
    if abs(row.sum() - 1.0) > ROW_TOLERANCE:
        raise ParameterError("centroid row must sum to 1")
    value = float(row @ np.arange(row.size))
    nearest = round(value)
    if 0.0 <= nearest - value <= ROW_TOLERANCE:
        return int(nearest)
    return int(math.floor(value))


# ===== SLIDING WINDOW =====

@dataclass(frozen=True)
class SlidingWindowState:
    """Window [center - back, center + ahead] over encoder positions."""

    center: int = 0
    deviation_count: int = 0
    back: int = 1
    ahead: int = 4


DEVIATIONS_TO_ADVANCE = 3


def window_init() -> SlidingWindowState:
    return SlidingWindowState()


def window_range(state: SlidingWindowState, text_len: int) -> Tuple[int, int]:
    """Inclusive retained encoder range, clamped to [0, T-1]."""
    if text_len < 1:
        raise ParameterError("window needs T >= 1")
    center = min(state.center, text_len - 1)
    return max(0, center - state.back), min(text_len - 1, center + state.ahead)


def window_allowed(state: SlidingWindowState, text_len: int) -> np.ndarray:
    low, high = window_range(state, text_len)
    allowed = np.zeros(text_len, dtype=bool)
    allowed[low:high + 1] = True
    return allowed


def window_mask(logits: np.ndarray, state: SlidingWindowState) -> np.ndarray:
    """Logits outside the window become -inf; in-window logits are unchanged."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.where(window_allowed(state, logits.shape[-1]), logits, -np.inf)


def window_update(state: SlidingWindowState, centroid: int, text_len: int) -> SlidingWindowState:
    """Count consecutive forward deviations; the third one moves the center by one."""
    if not 0 <= centroid < text_len:
        raise ParameterError(f"centroid {centroid} outside [0, {text_len})")
    if centroid <= state.center:
        return replace(state, deviation_count=0)
    count = state.deviation_count + 1
    if count < DEVIATIONS_TO_ADVANCE:
        return replace(state, deviation_count=count)
    return replace(state, center=min(state.center + 1, text_len - 1), deviation_count=0)
