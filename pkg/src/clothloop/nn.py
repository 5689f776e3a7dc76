"""Numpy building blocks for the point regressor and the policy networks."""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np

from clothloop.errors import NumericalError
from clothloop.mesh import FloatArray

Params = dict[str, FloatArray]


def relu(x: FloatArray) -> FloatArray:
    """Rectified linear unit."""
    return np.maximum(x, 0.0)


def sigmoid(x: FloatArray) -> FloatArray:
    """Logistic function, stable for large magnitudes."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: FloatArray) -> FloatArray:
    """Row-wise log-softmax."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def check_finite(name: str, value: FloatArray) -> None:
    """Raise NumericalError naming ``name`` when ``value`` holds NaN or inf."""
    if not np.all(np.isfinite(value)):
        msg = f"non-finite values in {name}"
        raise NumericalError(msg)


def warmup_cosine(epoch: int, epochs: int, warmup: int, peak: float) -> float:
    """Learning rate for a 0-based epoch: linear warm-up, then cosine annealing to 0."""
    if warmup > 0 and epoch < warmup:
        return peak * (epoch + 1) / warmup
    decay = max(epochs - warmup, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / decay))


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        """Initialize empty moment estimates."""
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Mapping[str, FloatArray], lr: float) -> None:
        """Apply one bias-corrected update."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(grad)
                self.v[name] = np.zeros_like(grad)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            params[name] -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def clip_grad_norm(grads: Params, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for name in grads:
            grads[name] *= scale
    return total


class MLP:
    """Fully connected network with ReLU hidden layers and a linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0) -> None:
        """Initialize with He-uniform hidden weights and a scaled output layer.

        Args:
            sizes: Layer widths, input first.
            rng: Random generator.
            out_scale: Multiplier on the output layer's initial weights.
        """
        self.sizes = list(sizes)
        self.params: Params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
            bound = math.sqrt(6.0 / fan_in)
            if i == len(sizes) - 2:
                bound *= out_scale
            self.params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def layer_count(self) -> int:
        """Number of weight layers."""
        return len(self.sizes) - 1

    def forward(self, x: FloatArray) -> tuple[FloatArray, list[FloatArray]]:
        """Outputs plus the per-layer inputs needed by ``backward``."""
        cache = []
        h = x
        for i in range(self.layer_count):
            cache.append(h)
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.layer_count - 1:
                h = relu(h)
        check_finite("mlp output", h)
        return h, cache

    def backward(self, cache: list[FloatArray], dout: FloatArray) -> Params:
        """Parameter gradients for an upstream gradient on the outputs."""
        grads: Params = {}
        delta = dout
        for i in reversed(range(self.layer_count)):
            h_in = cache[i]
            grads[f"W{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[f"W{i}"].T) * (h_in > 0)
        return grads

    def state(self) -> Params:
        """Copy of the parameters."""
        return {k: v.copy() for k, v in self.params.items()}

    def load(self, params: Mapping[str, FloatArray]) -> None:
        """Replace the parameters with copies of ``params``."""
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
