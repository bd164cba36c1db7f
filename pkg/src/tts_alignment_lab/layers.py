"""
Building blocks of the acoustic model: parameter containers, projections,
multi-head attention, the convolutional feed-forward network and the pre-norm
encoder/decoder blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from tts_alignment_lab.tensor import (
    Tensor,
    conv1d,
    dropout,
    embedding,
    layer_norm,
    relu,
    softmax_lastdim,
)


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Module:
    """Anything holding trainable Tensors, directly or through child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [param for _, param in self.named_parameters()]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = _glorot(rng, (in_features, out_features), in_features, out_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def row_scales(count: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    """Per-row scales log-uniform in [1/spread, spread]; all ones (and no draws) when spread is 1."""
    if spread == 1.0:
        return np.ones(count)
    bound = math.log(spread)
    return np.exp(rng.uniform(-bound, bound, size=count))


class Embedding(Module):
    """N(0, 1) rows, each optionally multiplied by its own scale."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale_spread: float = 1.0):
        weight = rng.normal(0.0, 1.0, size=(count, dim))
        self.weight = Tensor(weight * row_scales(count, scale_spread, rng)[:, None], requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.epsilon = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.epsilon)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over `num_heads` heads of width hidden/num_heads."""

    def __init__(self, hidden_size: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.wq = Linear(hidden_size, hidden_size, rng)
        self.wk = Linear(hidden_size, hidden_size, rng)
        self.wv = Linear(hidden_size, hidden_size, rng)
        self.wo = Linear(hidden_size, hidden_size, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def project_memory(self, memory: Tensor) -> Tuple[Tensor, Tensor]:
        """Keys and values [B, H, Lk, dk] of a memory sequence."""
        return self._split(self.wk(memory)), self._split(self.wv(memory))

    def attend(
        self,
        query: Tensor,
        keys: Tensor,
        values: Tensor,
        allowed: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, Tensor]:
        batch, length, hidden = query.shape
        q = self._split(self.wq(query))
        scores = (q @ keys.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        weights = softmax_lastdim(scores, allowed)
        context = (weights @ values).transpose(0, 2, 1, 3).reshape(batch, length, hidden)
        return self.wo(context), weights

    def __call__(
        self, query: Tensor, memory: Tensor, allowed: Optional[np.ndarray] = None
    ) -> Tuple[Tensor, Tensor]:
        """Returns the attended output [B, Lq, d] and the weights [B, H, Lq, Lk]."""
        keys, values = self.project_memory(memory)
        return self.attend(query, keys, values, allowed)


class ConvFeedForward(Module):
    """conv(K) -> relu -> conv(K) over the sequence axis; causal convs see only the past."""

    def __init__(self, hidden_size: int, filter_size: int, kernel_size: int, causal: bool, rng: np.random.Generator):
        self.kernel_size = kernel_size
        self.causal = causal
        wide, narrow = kernel_size * filter_size, kernel_size * hidden_size
        self.inner_weight = _glorot(rng, (kernel_size, hidden_size, filter_size), narrow, wide)
        self.inner_bias = Tensor(np.zeros(filter_size), requires_grad=True)
        self.outer_weight = _glorot(rng, (kernel_size, filter_size, hidden_size), wide, narrow)
        self.outer_bias = Tensor(np.zeros(hidden_size), requires_grad=True)

    @property
    def receptive_field(self) -> int:
        return 2 * self.kernel_size - 1

    def __call__(self, x: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
        if keep is not None:
            x = x * keep
        h = relu(conv1d(x, self.inner_weight, self.inner_bias, causal=self.causal))
        if keep is not None:
            h = h * keep
        return conv1d(h, self.outer_weight, self.outer_bias, causal=self.causal)


def _concat_rows(history: Optional[Tensor], row: Tensor) -> Tensor:
    """Append along the sequence axis of [B, L, d]; inference-only (no tape)."""
    if history is None:
        return Tensor(row.data)
    return Tensor(np.concatenate([history.data, row.data], axis=1))


class EncoderLayer(Module):
    def __init__(self, hidden_size: int, num_heads: int, filter_size: int, kernel_size: int,
                 dropout_rate: float, epsilon: float, rng: np.random.Generator):
        self.attention_norm = LayerNorm(hidden_size, epsilon)
        self.self_attention = MultiHeadAttention(hidden_size, num_heads, rng)
        self.ffn_norm = LayerNorm(hidden_size, epsilon)
        self.ffn = ConvFeedForward(hidden_size, filter_size, kernel_size, False, rng)
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, allowed: np.ndarray, keep: np.ndarray, train: bool,
                 rng: np.random.Generator) -> Tensor:
        h = self.attention_norm(x)
        attended, _ = self.self_attention(h, h, allowed)
        x = x + dropout(attended, self.dropout_rate, train, rng)
        h = self.ffn(self.ffn_norm(x), keep)
        return x + dropout(h, self.dropout_rate, train, rng)


@dataclass
class DecoderCache:
    """Per-layer state of incremental decoding."""

    self_inputs: Optional[Tensor] = None
    ffn_inputs: Optional[Tensor] = None
    cross_keys: Optional[Tensor] = None
    cross_values: Optional[Tensor] = None


class DecoderLayer(Module):
    def __init__(self, hidden_size: int, num_heads: int, filter_size: int, kernel_size: int,
                 dropout_rate: float, epsilon: float, rng: np.random.Generator):
        self.self_norm = LayerNorm(hidden_size, epsilon)
        self.self_attention = MultiHeadAttention(hidden_size, num_heads, rng)
        self.cross_norm = LayerNorm(hidden_size, epsilon)
        self.cross_attention = MultiHeadAttention(hidden_size, num_heads, rng)
        self.ffn_norm = LayerNorm(hidden_size, epsilon)
        self.ffn = ConvFeedForward(hidden_size, filter_size, kernel_size, True, rng)
        self.dropout_rate = dropout_rate

    def __call__(
        self,
        y: Tensor,
        memory: Tensor,
        self_allowed: np.ndarray,
        cross_allowed: np.ndarray,
        keep: np.ndarray,
        train: bool,
        rng: np.random.Generator,
    ) -> Tuple[Tensor, Tensor]:
        h = self.self_norm(y)
        attended, _ = self.self_attention(h, h, self_allowed)
        y = y + dropout(attended, self.dropout_rate, train, rng)
        attended, weights = self.cross_attention(self.cross_norm(y), memory, cross_allowed)
        y = y + dropout(attended, self.dropout_rate, train, rng)
        h = self.ffn(self.ffn_norm(y), keep)
        return y + dropout(h, self.dropout_rate, train, rng), weights

    def start(self, memory: Tensor) -> DecoderCache:
        keys, values = self.cross_attention.project_memory(memory)
        return DecoderCache(cross_keys=keys, cross_values=values)

    def step(self, y: Tensor, cache: DecoderCache, cross_allowed: Optional[np.ndarray]) -> Tuple[Tensor, Tensor]:
        """Advance one frame. y is [B, 1, d]; returns the new row and cross weights [B, H, 1, T]."""
        h = self.self_norm(y)
        cache.self_inputs = _concat_rows(cache.self_inputs, h)
        attended, _ = self.self_attention(h, cache.self_inputs)
        y = y + attended
        attended, weights = self.cross_attention.attend(
            self.cross_norm(y), cache.cross_keys, cache.cross_values, cross_allowed
        )
        y = y + attended
        window = _concat_rows(cache.ffn_inputs, self.ffn_norm(y))
        cache.ffn_inputs = Tensor(window.data[:, -self.ffn.receptive_field:, :])
        h = self.ffn(cache.ffn_inputs)
        return y + h[:, -1:, :], weights
