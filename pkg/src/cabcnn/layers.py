"""Differentiable layers for the convolutional front end and the dense heads.

Activations flow as ``(batch, channels, time)`` arrays. The single-example
helpers (``conv1d_forward`` and friends) accept ``(channels, time)`` inputs
and promote them to a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, ShapeError
from .tensor import Tensor, matmul, relu, transpose

TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def same_pad(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def pool_output_length(length: int, stride: int) -> int:
    return -(-length // stride)


# ---------------------------------------------------------------------------
# Conv1D
# ---------------------------------------------------------------------------

_IM2COL_BUDGET = 1 << 22  # float64 entries per im2col chunk (32 MiB)


def _column_chunks(rows: int, n: int):
    step = max(1024, _IM2COL_BUDGET // max(rows, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _im2col(windows: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Rows ordered (channel, tap) to match ``w.reshape(out, in * kernel)``."""
    chunk = windows[:, start:stop, :]
    return np.ascontiguousarray(chunk.transpose(0, 2, 1)).reshape(-1, stop - start)


def _conv1d_grads(g, w, flat, n_valid, kernel):
    """Weight and padded-input gradients for the flat-layout convolution.

    ``g`` is ``(out, B*Lp)`` with zeros at the invalid tail of each example.
    """
    out_ch, in_ch, _ = w.shape
    w2 = w.reshape(out_ch, in_ch * kernel)
    windows = np.lib.stride_tricks.sliding_window_view(flat, kernel, axis=1)
    gw = np.zeros_like(w2)
    gflat = np.zeros((in_ch, flat.shape[1]))
    for start, stop in _column_chunks(in_ch * kernel, n_valid):
        gchunk = g[:, start:stop]
        gw += gchunk @ _im2col(windows, start, stop).T
        gcols = (w2.T @ gchunk).reshape(in_ch, kernel, stop - start)
        for k in range(kernel):
            gflat[:, start + k:stop + k] += gcols[:, k, :]
    return gw.reshape(w.shape), gflat


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 'same' convolution of ``x`` (B, C, L) with ``w`` (O, C, K)."""
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (batch, channels, length), got {x.shape}")
    batch, in_ch, length = x.shape
    out_ch, w_in, kernel = w.shape
    if in_ch != w_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs weights {w.shape}")
    left, _ = same_pad(kernel)
    padded_len = length + kernel - 1
    n_valid = batch * padded_len - (kernel - 1)

    # examples laid end to end; outputs straddling two examples are discarded
    xp = np.zeros((in_ch, batch, padded_len))
    xp[:, :, left:left + length] = x.data.transpose(1, 0, 2)
    flat = xp.reshape(in_ch, batch * padded_len)
    windows = np.lib.stride_tricks.sliding_window_view(flat, kernel, axis=1)
    w2 = w.data.reshape(out_ch, in_ch * kernel)
    out = np.zeros((out_ch, batch * padded_len))
    for start, stop in _column_chunks(in_ch * kernel, n_valid):
        out[:, start:stop] = w2 @ _im2col(windows, start, stop)
    out = out.reshape(out_ch, batch, padded_len)[:, :, :length]
    out += b.data[:, None, None]
    result = np.ascontiguousarray(out.transpose(1, 0, 2))

    def backward(g):
        gpad = np.zeros((out_ch, batch, padded_len))
        gpad[:, :, :length] = g.transpose(1, 0, 2)
        gw, gflat = _conv1d_grads(gpad.reshape(out_ch, -1), w.data, flat, n_valid, kernel)
        gx = gflat.reshape(in_ch, batch, padded_len)[:, :, left:left + length].transpose(1, 0, 2)
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2))

    return Tensor.from_op(result, (x, w, b), backward)


@dataclass
class Conv1DLayer:
    in_channels: int
    out_channels: int
    kernel_size: int
    weights: Tensor
    bias: Tensor
    padding: str = "same"

    @classmethod
    def create(cls, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator) -> Conv1DLayer:
        shape = (out_channels, in_channels, kernel_size)
        w = glorot_uniform(rng, shape, in_channels * kernel_size, out_channels * kernel_size)
        return cls(
            in_channels,
            out_channels,
            kernel_size,
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_channels), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv1D expects {self.in_channels} input channels, got input of shape {x.shape}")
        return conv1d(x, self.weights, self.bias)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weights", self.weights), ("bias", self.bias)]


def conv1d_forward(layer: Conv1DLayer, x: Tensor) -> Tensor:
    if x.ndim == 2:
        return layer(x.reshape(1, *x.shape)).reshape(layer.out_channels, x.shape[1])
    return layer(x)


# ---------------------------------------------------------------------------
# MaxPool1D
# ---------------------------------------------------------------------------

def maxpool1d(x: Tensor, size: int, stride: int) -> Tensor:
    """'Same' max pooling; out-of-range positions behave as -inf.

    Ties go to the earliest position in the window.
    """
    *lead, length = x.shape
    n_out = pool_output_length(length, stride)
    total_pad = max(0, (n_out - 1) * stride + size - length)
    left = total_pad // 2
    padded_len = max(length + total_pad, (n_out - 1) * stride + size)
    xp = np.full((*lead, padded_len), -np.inf)
    xp[..., left:left + length] = x.data
    span = (n_out - 1) * stride + 1
    out = xp[..., 0:span:stride].copy()
    for j in range(1, size):
        np.maximum(out, xp[..., j:j + span:stride], out=out)

    def backward(g):
        # scan taps from last to first so the earliest maximum wins
        arg = np.full(out.shape, size - 1, dtype=np.int64)
        for j in range(size - 2, -1, -1):
            np.copyto(arg, j, where=xp[..., j:j + span:stride] == out)
        rows = int(np.prod(lead, dtype=np.int64))
        base = (np.arange(rows, dtype=np.int64) * padded_len)[:, None] + np.arange(n_out, dtype=np.int64) * stride
        index = (base + arg.reshape(rows, n_out)).ravel()
        gp = np.bincount(index, weights=g.ravel(), minlength=rows * padded_len)
        return (gp.reshape(*lead, padded_len)[..., left:left + length],)

    return Tensor.from_op(out, (x,), backward)


@dataclass
class MaxPool1DLayer:
    size: int
    stride: int
    padding: str = "same"

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool1d(x, self.size, self.stride)


def maxpool1d_forward(layer: MaxPool1DLayer, x: Tensor) -> Tensor:
    return layer(x)


# ---------------------------------------------------------------------------
# BatchNormalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormLayer:
    channels: int
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, epsilon: float = 1e-5) -> BatchNormLayer:
        if epsilon <= 0:
            raise ConfigError("batchnorm epsilon must be positive")
        return cls(
            channels,
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            np.zeros(channels),
            np.ones(channels),
            momentum,
            epsilon,
        )

    def __call__(self, x: Tensor, mode: str = INFER) -> Tensor:
        return batchnorm_forward(self, x, mode)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta)]


def batchnorm_forward(layer: BatchNormLayer, x: Tensor, mode: str) -> Tensor:
    """Per-channel normalisation over the batch and time axes of (B, C, L)."""
    _check_mode(mode)
    if x.ndim != 3 or x.shape[1] != layer.channels:
        raise ShapeError(f"BatchNorm expects (batch, {layer.channels}, length), got {x.shape}")
    gamma = layer.gamma.data[None, :, None]
    beta = layer.beta.data[None, :, None]

    if mode == INFER:
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        scale = gamma * inv_std[None, :, None]
        xhat = (x.data - layer.running_mean[None, :, None]) * inv_std[None, :, None]
        out = xhat * gamma + beta

        def backward_infer(g):
            return g * scale, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

        return Tensor.from_op(out, (x, layer.gamma, layer.beta), backward_infer)

    batch, _, length = x.shape
    n = batch * length
    if n < 2:
        raise DegenerateError(f"BatchNorm train mode needs at least 2 values per channel, got batch*length={n}")
    mu = x.data.mean(axis=(0, 2))
    centered = x.data - mu[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = centered * inv_std[None, :, None]
    out = xhat * gamma + beta

    layer.running_mean = layer.momentum * layer.running_mean + (1.0 - layer.momentum) * mu
    layer.running_var = layer.momentum * layer.running_var + (1.0 - layer.momentum) * var * (n / (n - 1))

    def backward_train(g):
        dxhat = g * gamma
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        dx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return Tensor.from_op(out, (x, layer.gamma, layer.beta), backward_train)


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    in_dim: int
    out_dim: int
    weights: Tensor
    bias: Tensor

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> DenseLayer:
        w = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim)
        return cls(in_dim, out_dim, Tensor(w, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))

    @classmethod
    def from_arrays(cls, weights, bias) -> DenseLayer:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w.shape[1], w.shape[0], Tensor(w, requires_grad=True), Tensor(bias, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weights", self.weights), ("bias", self.bias)]


def dense_forward(layer: DenseLayer, x: Tensor) -> Tensor:
    """``weights @ x + bias`` over the last axis; accepts a vector or rows."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"Dense layer expects last dimension {layer.in_dim}, got input of shape {x.shape}")
    if x.ndim == 1:
        return (matmul(x.reshape(1, layer.in_dim), transpose(layer.weights)) + layer.bias).reshape(layer.out_dim)
    return matmul(x, transpose(layer.weights)) + layer.bias


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout_forward(x: Tensor, rate: float, mode: str, rng: int | np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in infer mode or at rate 0."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == INFER or rate == 0.0:
        return x
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = gen.random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


@dataclass
class DropoutLayer:
    rate: float

    def __call__(self, x: Tensor, mode: str, rng) -> Tensor:
        return dropout_forward(x, self.rate, mode, rng)


__all__ = [
    "TRAIN",
    "INFER",
    "Conv1DLayer",
    "MaxPool1DLayer",
    "BatchNormLayer",
    "DenseLayer",
    "DropoutLayer",
    "conv1d",
    "conv1d_forward",
    "maxpool1d",
    "maxpool1d_forward",
    "batchnorm_forward",
    "dense_forward",
    "dropout_forward",
    "relu",
    "pool_output_length",
    "same_pad",
]
