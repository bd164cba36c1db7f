"""
Dense float64 tensors with a dynamic reverse-mode tape.

Every op records its parents and a closure mapping the output gradient to the
parents' gradients. The tape is rebuilt on each forward pass; `backward` walks it
once in reverse topological order and then releases it.

Broadcasting is limited to what the model needs: numpy rules for elementwise ops
(bias rows, per-sample speaker rows, constant masks) and shared weights in matmul.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from tts_alignment_lab.errors import GraphError, NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", float, int, np.ndarray]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward computations without recording the tape (thread-local)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    def __init__(self, data: Union[np.ndarray, Sequence, float], requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        _check_finite(array, "tensor")
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # --- operators ---
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ===== ELEMENTWISE =====

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("division by zero in 'div'")

    def grad_fn(g: np.ndarray):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._from_op(a.data / b.data, (a, b), grad_fn, "div")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def grad_fn(g: np.ndarray):
        return (g * positive,)

    return Tensor._from_op(np.where(positive, x.data, 0.0), (x,), grad_fn, "relu")


def softsign(x: Tensor) -> Tensor:
    """x / (1 + |x|), bounded in (-1, 1)."""
    denom = 1.0 + np.abs(x.data)

    def grad_fn(g: np.ndarray):
        return (g / (denom * denom),)

    return Tensor._from_op(x.data / denom, (x,), grad_fn, "softsign")


def tensor_abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def grad_fn(g: np.ndarray):
        return (g * sign,)

    return Tensor._from_op(np.abs(x.data), (x,), grad_fn, "abs")


# ===== REDUCTIONS AND SHAPE =====

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), grad_fn, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def grad_fn(g: np.ndarray):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g: np.ndarray):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), grad_fn, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.array(x.data[index], dtype=np.float64)

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return Tensor._from_op(out, (x,), grad_fn, "getitem")


# ===== LINEAR ALGEBRA =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes follow numpy matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions differ in {a.shape} x {b.shape}") from exc

    def grad_fn(g: np.ndarray):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor._from_op(out, (a, b), grad_fn, "matmul")


def softmax_lastdim(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    `mask` (broadcastable to x, True = keep) gives masked positions a weight of
    exactly 0; the logits themselves stay finite.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        exps = np.exp(shifted)
    else:
        keep = np.broadcast_to(mask, x.shape)
        peak = np.where(keep, x.data, -np.inf).max(axis=-1, keepdims=True)
        peak = np.where(np.isfinite(peak), peak, 0.0)
        exps = np.where(keep, np.exp(np.where(keep, x.data - peak, 0.0)), 0.0)
    totals = exps.sum(axis=-1, keepdims=True)
    probs = exps / np.where(totals > 0, totals, 1.0)

    def grad_fn(g: np.ndarray):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return Tensor._from_op(probs, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """gamma * (x - mean) / sqrt(var + epsilon) + beta over the last axis (population variance)."""
    if epsilon <= 0:
        raise ParameterError("layer_norm epsilon must be positive")
    dim = x.shape[-1]
    if dim < 1 or gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(f"layer_norm: x {x.shape} with gamma {gamma.shape} and beta {beta.shape}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + epsilon)
    normed = centered * inv_std

    def grad_fn(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        d_normed = g * gamma.data
        d_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return d_x, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(normed * gamma.data + beta.data, (x, gamma, beta), grad_fn, "layer_norm")


def dropout(x: Tensor, rate: float, active: bool, rng_seed: Union[int, np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    rng = np.random.default_rng(rng_seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def grad_fn(g: np.ndarray):
        return (g * keep,)

    return Tensor._from_op(x.data * keep, (x,), grad_fn, "dropout")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup weight[ids]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ParameterError(f"embedding ids outside [0, {weight.shape[0]})")

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(weight.data[ids], (weight,), grad_fn, "embedding")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, causal: bool = False) -> Tensor:
    """1-D convolution along axis 1 of x[B, L, Cin] with weight[K, Cin, Cout].

    Output length equals input length: centred ("same") padding, or left-only
    padding when `causal` so output s only sees inputs <= s.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {weight.shape}")
    batch, length, channels = x.shape
    kernel, _, out_channels = weight.shape
    left = kernel - 1 if causal else (kernel - 1) // 2
    right = kernel - 1 - left
    padded = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    cols = np.stack([padded[:, k:k + length, :] for k in range(kernel)], axis=2)
    cols = cols.reshape(batch, length, kernel * channels)
    flat_weight = weight.data.reshape(kernel * channels, out_channels)
    out = cols @ flat_weight + bias.data

    def grad_fn(g: np.ndarray):
        grad_weight = cols.reshape(-1, kernel * channels).T @ g.reshape(-1, out_channels)
        grad_cols = (g @ flat_weight.T).reshape(batch, length, kernel, channels)
        grad_padded = np.zeros_like(padded)
        for k in range(kernel):
            grad_padded[:, k:k + length, :] += grad_cols[:, :, k, :]
        return (
            grad_padded[:, left:left + length, :],
            grad_weight.reshape(weight.shape),
            g.sum(axis=(0, 1)),
        )

    return Tensor._from_op(out, (x, weight, bias), grad_fn, "conv1d")


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function on plain arrays, stable for large |z|."""
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(
    logits: Tensor,
    targets: np.ndarray,
    pos_weight: float = 1.0,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean weighted binary cross-entropy over unmasked positions."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce: targets {targets.shape} vs logits {logits.shape}")
    weights = np.ones_like(targets) if mask is None else np.asarray(mask, dtype=np.float64)
    count = weights.sum()
    if count <= 0:
        raise ParameterError("bce needs at least one unmasked position")
    z = logits.data
    per_item = pos_weight * targets * np.logaddexp(0.0, -z) + (1.0 - targets) * np.logaddexp(0.0, z)
    loss = np.asarray((per_item * weights).sum() / count)

    def grad_fn(g: np.ndarray):
        prob = sigmoid(z)
        local = pos_weight * targets * (prob - 1.0) + (1.0 - targets) * prob
        return (g * local * weights / count,)

    return Tensor._from_op(loss, (logits,), grad_fn, "bce_with_logits")


# ===== BACKWARD =====

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward was already called on this loss; run a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter that requires grad")
    loss._consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NumericError(f"non-finite gradient in backward of '{node.op}'")
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        node._parents = ()
        node._backward = None


# ===== GRADIENT CHECKING =====

def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn() w.r.t. every element of param."""
    param.data = np.ascontiguousarray(param.data)
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn().item()
            flat[i] = original - h
            lower = fn().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)
