"""Layers with hand-written forward and backward passes.

Every layer follows the same protocol: ``forward(x, train)`` caches what the
backward pass needs, ``backward(grad_out)`` returns the gradient with respect
to the input and *accumulates* parameter gradients into ``Param.grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DataError, ShapeError
from .tensor import DTYPE, Rng, as_tensor


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    decay: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


class Module:
    """Minimal container protocol: children are discovered from attributes."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)

    def own_params(self) -> dict[str, Param]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_params(self) -> Iterator[tuple[str, Param]]:
        for path, mod in self.modules():
            for name, p in mod.own_params().items():
                yield (f"{path}.{name}" if path else name), p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.modules():
            for name, b in mod.own_buffers().items():
                yield (f"{path}.{name}" if path else name), b

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Conv2d(Module):
    """2-D cross-correlation with zero padding (no kernel flip)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, pad: int = 0,
                 rng: Rng | None = None, bias: bool = True):
        if k < 1 or stride < 1 or pad < 0:
            raise ShapeError(f"invalid conv geometry k={k} stride={stride} pad={pad}")
        self.c_in, self.c_out, self.k, self.stride, self.pad = c_in, c_out, k, stride, pad
        std = math.sqrt(2.0 / (k * k * c_in))
        w = rng.normal((c_out, c_in, k, k), std) if rng is not None else np.zeros((c_out, c_in, k, k))
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out)) if bias else None
        self._cache = None

    def own_params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def _geometry(self, x: np.ndarray):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} input channels, got {c}")
        ho = conv_output_size(h, self.k, self.stride, self.pad)
        wo = conv_output_size(w, self.k, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output size {ho}x{wo} is not positive for input {h}x{w}")
        return n, ho, wo

    def forward(self, x, train=False):
        x = as_tensor(x)
        n, ho, wo = self._geometry(x)
        k, s, p = self.k, self.stride, self.pad
        # channel-major padded input, then im2col in (c, u, v) x (n, i, j) layout
        xp_t = np.zeros((self.c_in, n, x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=DTYPE)
        xp_t[:, :, p:p + x.shape[2], p:p + x.shape[3]] = x.transpose(1, 0, 2, 3)
        cols = np.empty((self.c_in, k, k, n, ho, wo), dtype=DTYPE)
        for u in range(k):
            for v in range(k):
                cols[:, u, v] = xp_t[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]
        cols = cols.reshape(self.c_in * k * k, -1)
        out = self.weight.value.reshape(self.c_out, -1) @ cols
        if self.bias is not None:
            out += self.bias.value[:, None]
        self._cache = (x.shape, xp_t.shape, cols, (n, ho, wo))
        return np.ascontiguousarray(out.reshape(self.c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, grad_out):
        x_shape, xp_t_shape, cols, (n, ho, wo) = self._cache
        expected = (n, self.c_out, ho, wo)
        if grad_out.shape != expected:
            raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expected}")
        g_t = np.ascontiguousarray(np.transpose(grad_out, (1, 0, 2, 3))).reshape(self.c_out, -1)
        self.weight.grad += (g_t @ cols.T).reshape(self.weight.value.shape)
        if self.bias is not None:
            self.bias.grad += g_t.sum(axis=1)
        k, s, p = self.k, self.stride, self.pad
        dcols = (self.weight.value.reshape(self.c_out, -1).T @ g_t).reshape(self.c_in, k, k, n, ho, wo)
        gxp_t = np.zeros(xp_t_shape, dtype=DTYPE)
        for u in range(k):
            for v in range(k):
                gxp_t[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s] += dcols[:, u, v]
        gx = gxp_t[:, :, p:p + x_shape[2], p:p + x_shape[3]].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx)


def conv2d_forward(layer: Conv2d, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv2d_backward(layer: Conv2d, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    layer.forward(x)
    return layer.backward(grad_out)


# -------------------------------------------------------------- normalization


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(channels), decay=False)
        self.beta = Param(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        x = as_tensor(x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m <= 1:
                raise DataError("batchnorm in train mode needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            mom = self.momentum
            self.running_mean *= mom
            self.running_mean += (1.0 - mom) * mean
            self.running_var *= mom
            self.running_var += (1.0 - mom) * var * (m / (m - 1))
            self._cache = (True, xhat, inv_std, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
            self._cache = (False, xhat, inv_std, None)
        return g * xhat + b

    def backward(self, grad_out):
        batch_stats, xhat, inv_std, m = self._cache
        self.gamma.grad += (grad_out * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * self.gamma.value[None, :, None, None]
        if not batch_stats:
            return dxhat * inv_std[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


def batchnorm_forward(layer: BatchNorm2d, x: np.ndarray, train: bool = True) -> np.ndarray:
    return layer.forward(x, train)


# ------------------------------------------------------------ pointwise/heads


class ReLU(Module):
    def forward(self, x, train=False):
        self._x = x
        self._mask = x > 0
        # np.maximum keeps NaN so divergence reaches the loss
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return np.where(self._mask, grad_out, 0.0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        x = as_tensor(x)
        if x.shape[2] * x.shape[3] < 1:
            raise ShapeError("global average pool over an empty spatial extent")
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad_out):
        n, c, h, w = self._shape
        return np.broadcast_to(grad_out / (h * w), self._shape).copy()


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return GlobalAvgPool().forward(x)


class Linear(Module):
    """Fully connected layer; rank-4 (N, C, 1, 1) inputs are flattened."""

    def __init__(self, c_in: int, c_out: int, rng: Rng | None = None):
        self.c_in, self.c_out = c_in, c_out
        std = math.sqrt(1.0 / c_in)
        w = rng.normal((c_out, c_in), std) if rng is not None else np.zeros((c_out, c_in))
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out))

    def own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        self._in_shape = np.shape(x)
        x2 = np.asarray(x, dtype=DTYPE).reshape(self._in_shape[0], -1)
        if x2.shape[1] != self.c_in:
            raise ShapeError(f"linear expects {self.c_in} inputs, got {x2.shape[1]}")
        self._x = x2
        return x2 @ self.weight.value.T + self.bias.value

    def backward(self, grad_out):
        self.weight.grad += grad_out.T @ self._x
        self.bias.grad += grad_out.sum(axis=0)
        return (grad_out @ self.weight.value).reshape(self._in_shape)


def linear_forward(layer: Linear, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
