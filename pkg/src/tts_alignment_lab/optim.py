"""Adam with bias correction, the inverse-square-root warmup schedule, and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from tts_alignment_lab.errors import ParameterError, ShapeError
from tts_alignment_lab.tensor import Tensor


@dataclass
class AdamState:
    """Moments per parameter (same order and shapes as the parameter list)."""

    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9

    @classmethod
    def zeros_like(
        cls,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.98,
        epsilon: float = 1e-9,
    ) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One Adam update in place; increments state.step."""
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ShapeError("adam_step: params, grads and moments differ in length")
    for param, grad, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if not (param.shape == grad.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch for parameter {param.shape}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for param, grad, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ParameterError("noam_lr step starts at 1")
    if warmup < 1 or d_model < 1:
        raise ParameterError("noam_lr needs warmup >= 1 and d_model >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    """Scale gradients so their global L2 norm is at most max_norm (0 disables)."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm <= 0 or total <= max_norm:
        return list(grads), total
    factor = max_norm / (total + 1e-12)
    return [g * factor for g in grads], total


@dataclass
class Adam:
    """Named parameters plus their AdamState."""

    named_params: List[Tuple[str, Tensor]]
    state: AdamState = field(init=False)
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9

    def __post_init__(self) -> None:
        self.state = AdamState.zeros_like(
            [p for _, p in self.named_params], self.beta1, self.beta2, self.epsilon
        )

    @property
    def params(self) -> List[Tensor]:
        return [p for _, p in self.named_params]

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self, lr: float, max_grad_norm: float = 0.0) -> float:
        """Apply one update from the populated .grad fields; returns the pre-clip norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        grads, norm = clip_grad_norm(grads, max_grad_norm)
        adam_step(self.params, grads, self.state, lr)
        return norm

    def load_state(self, state: Optional[AdamState]) -> None:
        if state is None:
            return
        for param, m, v in zip(self.params, state.first_moment, state.second_moment):
            if param.shape != m.shape or param.shape != v.shape:
                raise ShapeError("optimizer state does not match parameter shapes")
        self.state = state
