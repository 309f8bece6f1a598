"""Small set of layers with hand-written reverse-mode gradients.

Each op returns ``(output, backward)``; ``backward(grad_out)`` returns the
gradients w.r.t. the op's inputs. The closure is the forward cache, so it
belongs to exactly one forward call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .numerics import SeededRng


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ContractViolation(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def glorot_uniform(rng: SeededRng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_linear(rng: SeededRng, prefix: str, d_in: int, d_out: int) -> list[Param]:
    return [
        Param(f"{prefix}.weight", glorot_uniform(rng, d_out, d_in)),
        Param(f"{prefix}.bias", np.zeros(d_out)),
    ]


def linear(x, weight, bias):
    """``y = x W^T + b``. Backward returns ``(grad_x, grad_W, grad_b)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ContractViolation(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = x @ weight.T + bias

    def backward(grad_out):
        return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)

    return y, backward


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(grad_out):
        return grad_out * out * (1.0 - out)

    return out, backward


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    out = np.where(mask, x, 0.0)

    def backward(grad_out):
        return grad_out * mask

    return out, backward


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Per-sample cross-entropy ``-log softmax(logits)[y]``.

    ``backward(grad_losses)`` takes the upstream gradient of each per-sample
    loss (``1/n`` everywhere for a mean) and returns ``grad_logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"labels shape {labels.shape} does not match {n} logits rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ContractViolation(f"labels must lie in [0, {C})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    losses = -logp[rows, labels]

    def backward(grad_losses):
        grad_losses = np.broadcast_to(np.asarray(grad_losses, dtype=np.float64), (n,))
        g = np.exp(logp)
        g[rows, labels] -= 1.0
        return g * grad_losses[:, None]

    return losses, backward


def global_avg_pool(x):
    """Mean over the trailing spatial axis of an ``n x d x s`` array.

    A 2-D ``n x d`` input is treated as ``s = 1`` and passes through.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x, lambda grad_out: grad_out
    if x.ndim != 3:
        raise ContractViolation(f"global_avg_pool expects n x d x s input, got {x.shape}")
    s = x.shape[2]
    if s == 0:
        raise ContractViolation("global_avg_pool: spatial size must be >= 1")
    out = x.mean(axis=2)

    def backward(grad_out):
        return np.repeat(grad_out[:, :, None] / s, s, axis=2)

    return out, backward
