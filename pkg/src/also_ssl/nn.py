"""A small numpy neural-network kernel with hand-written backward passes.

Training runs in float32; gradient checks switch whole models to float64
with ``astype``. Every forward output is checked for NaN/Inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import rng

RELU_GAIN = math.sqrt(2.0)


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def kaiming_uniform(n_in: int, n_out: int, seed, gain: float = RELU_GAIN) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / n_in)
    return rng.generator(seed, "kaiming").uniform(-bound, bound, size=(n_out, n_in))


class Linear:
    """y = x W^T + b with gradient accumulators."""

    def __init__(self, n_in: int, n_out: int, seed=0, gain: float = RELU_GAIN, dtype=np.float32):
        self.weight = kaiming_uniform(n_in, n_out, seed, gain).astype(dtype)
        self.bias = np.zeros(n_out, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected {self.n_in} input features, got {x.shape[-1]}")
        return check_finite(x @ self.weight.T + self.bias, "linear output")

    def backward(self, x: np.ndarray, dy: np.ndarray, need_input_grad: bool = True):
        self.grad_weight += dy.T @ x
        self.grad_bias += dy.sum(axis=0)
        return dy @ self.weight if need_input_grad else None

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def astype(self, dtype):
        for name in ("weight", "bias", "grad_weight", "grad_bias"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def parameters(self, prefix: str) -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        yield prefix + ".weight", self.weight, self.grad_weight
        yield prefix + ".bias", self.bias, self.grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through ReLU given its output ``y`` (zero at the kink)."""
    return dy * (y > 0)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _segment_ids(starts: np.ndarray, n: int) -> np.ndarray:
    ids = np.zeros(n, dtype=np.int64)
    ids[starts[1:]] = 1
    return np.cumsum(ids)


def maxpool_rows(x: np.ndarray, starts: np.ndarray):
    """Column-wise max over contiguous row segments beginning at ``starts``.

    Returns the pooled rows and, per output entry, the source row (first
    index on ties), which the backward pass routes gradient to.
    """
    starts = np.asarray(starts, dtype=np.int64)
    n = len(x)
    sizes = np.diff(np.append(starts, n))
    if (sizes <= 0).any():
        raise ValueError("empty pooling segment")
    if (sizes == sizes[0]).all():
        k = int(sizes[0])
        x3 = x.reshape(len(starts), k, -1)
        arg = np.argmax(x3, axis=1)
        out = np.take_along_axis(x3, arg[:, None, :], axis=1)[:, 0, :]
        return out, arg + starts[:, None]
    out = np.maximum.reduceat(x, starts, axis=0)
    seg = _segment_ids(starts, n)
    rows = np.where(x == out[seg], np.arange(n)[:, None], n)
    return out, np.minimum.reduceat(rows, starts, axis=0)


def maxpool_rows_backward(argmax: np.ndarray, dy: np.ndarray, n_rows: int) -> np.ndarray:
    dx = np.zeros((n_rows, dy.shape[1]), dtype=dy.dtype)
    cols = np.broadcast_to(np.arange(dy.shape[1]), dy.shape)
    dx[argmax, cols] = dy  # each (row, col) receives at most one segment's gradient
    return dx


def avgpool_rows(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    sizes = np.diff(np.append(starts, len(x)))
    if (sizes <= 0).any():
        raise ValueError("empty pooling segment")
    return np.add.reduceat(x, starts, axis=0) / sizes[:, None].astype(x.dtype)


def avgpool_rows_backward(starts: np.ndarray, dy: np.ndarray, n_rows: int) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    sizes = np.diff(np.append(starts, n_rows))
    return np.repeat(dy / sizes[:, None].astype(dy.dtype), sizes, axis=0)


# ---------------------------------------------------------------- losses


def bce_with_logits(logits, targets, weights) -> Tuple[float, np.ndarray]:
    """Weighted binary cross-entropy on logits.

    loss = sum_i w_i * (max(x,0) - x*t + log1p(exp(-|x|))) and
    d loss / d x_i = w_i * (sigmoid(x_i) - t_i).
    """
    x = np.asarray(logits)
    check_finite(x, "logits")
    x64 = x.astype(np.float64)
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    per = np.maximum(x64, 0.0) - x64 * t + np.log1p(np.exp(-np.abs(x64)))
    loss = float(np.sum(w * per))
    grad = w * (sigmoid_forward(x64) - t)
    return loss, grad.astype(x.dtype, copy=False)


def _masked_weights(mask, weights, n):
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if weights is None:
        m = int(mask.sum())
        return np.where(mask, 1.0 / m if m else 0.0, 0.0)
    return np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)


def l1_loss(pred, target, mask=None, weights=None) -> Tuple[float, np.ndarray]:
    """Mean (or weighted) absolute error over masked entries."""
    p = np.asarray(pred)
    w = _masked_weights(mask, weights, len(p))
    diff = np.where(w > 0, p.astype(np.float64) - np.asarray(target, dtype=np.float64), 0.0)
    loss = float(np.sum(w * np.abs(diff)))
    return loss, (w * np.sign(diff)).astype(p.dtype, copy=False)


def l2_loss(pred, target, mask=None, weights=None) -> Tuple[float, np.ndarray]:
    """Mean (or weighted) squared error over masked entries."""
    p = np.asarray(pred)
    w = _masked_weights(mask, weights, len(p))
    diff = np.where(w > 0, p.astype(np.float64) - np.asarray(target, dtype=np.float64), 0.0)
    loss = float(np.sum(w * diff * diff))
    return loss, (2.0 * w * diff).astype(p.dtype, copy=False)


def softmax_cross_entropy(logits, labels, weights=None) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    x = np.asarray(logits)
    check_finite(x, "logits")
    x64 = x.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x64)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = x64 - x64.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = float(-np.sum(w * logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad * w[:, None]).astype(x.dtype, copy=False)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    lr: Optional[float] = None,
) -> AdamWState:
    """One AdamW update, in place on ``params``; decay is decoupled from the moments."""
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        check_finite(g, f"gradient of {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        m = state.exp_avg.setdefault(name, np.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p))
        if state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        denom = np.sqrt(v) / p.dtype.type(math.sqrt(bc2)) + p.dtype.type(state.eps)
        p -= p.dtype.type(lr / bc1) * m / denom
        check_finite(p, f"parameter {name}")
    return state


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine annealing from ``base_lr`` at the first epoch to 0 at the last."""
    if not 0 <= epoch < total_epochs:
        raise ValueError("epoch out of range")
    if total_epochs == 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


# ---------------------------------------------------------------- composites


class MLP:
    """Linear layers with ReLU between them (and optionally after the last)."""

    def __init__(
        self,
        widths: Sequence[int],
        seed=0,
        final_relu: bool = False,
        dtype=np.float32,
    ):
        self.final_relu = final_relu
        self.layers: List[Linear] = []
        n = len(widths) - 1
        for i in range(n):
            relu_after = final_relu or i < n - 1
            gain = RELU_GAIN if relu_after else 1.0
            self.layers.append(Linear(widths[i], widths[i + 1], (seed, i), gain, dtype))

    def forward(self, x: np.ndarray):
        acts = [x]
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            y = layer.forward(acts[-1])
            if self.final_relu or i < n - 1:
                y = relu_forward(y)
            acts.append(y)
        return acts[-1], acts

    def backward(self, acts, dy: np.ndarray, need_input_grad: bool = True):
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            if self.final_relu or i < n - 1:
                dy = relu_backward(acts[i + 1], dy)
            dy = self.layers[i].backward(acts[i], dy, need_input_grad or i > 0)
        return dy

    def parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}.{i}")

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()
