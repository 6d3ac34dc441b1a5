"""Linear, convolution and batch-norm primitives plus BN folding."""
from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, axis_apply, record, reshape

# Instrumentation hook: when set, weighted ops report their operands here.
_tracer: contextvars.ContextVar = contextvars.ContextVar("spikemlp_tracer", default=None)


@contextlib.contextmanager
def trace_ops(tracer):
    token = _tracer.set(tracer)
    try:
        yield tracer
    finally:
        _tracer.reset(token)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Fully connected map acting on one axis of its input.

    ``axis=1`` is a channel FC; the axial token weights use the height/width axes.
    Training layers carry no bias; folding adds one.
    """

    def __init__(self, in_features: int, out_features: int, axis: int = 1, name: str = "",
                 rng: np.random.Generator | None = None, weight: np.ndarray | None = None,
                 bias: np.ndarray | None = None):
        self.name = name
        self.axis = axis
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = _uniform_init(rng, (out_features, in_features), in_features)
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = Parameter(bias, name=f"{name}.bias") if bias is not None else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[self.axis] != self.in_features:
            raise ShapeError(f"{self.name}: expected size {self.in_features} on axis {self.axis}, got {x.shape}")
        tracer = _tracer.get()
        if tracer is not None:
            tracer.linear(self.name, self.weight.data, x.data, self.axis, self.bias is not None)
        y = axis_apply(self.weight, x, self.axis)
        if self.bias is not None:
            shape = [1] * x.ndim
            shape[self.axis] = self.out_features
            y = y + reshape(self.bias, shape)
        return y


class Conv2d:
    """2-d cross-correlation over [N x C x H x W] inputs."""

    axis = 1

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, name: str = "", rng: np.random.Generator | None = None,
                 weight: np.ndarray | None = None, bias: np.ndarray | None = None):
        if stride <= 0 or padding < 0 or kernel_size <= 0:
            raise ValueError("kernel_size and stride must be positive, padding nonnegative")
        self.name = name
        self.stride = stride
        self.padding = padding
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            fan_in = in_channels * kernel_size * kernel_size
            weight = _uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.weight = Parameter(weight, name=f"{name}.weight")
        self.bias = Parameter(bias, name=f"{name}.bias") if bias is not None else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def __call__(self, x: Tensor) -> Tensor:
        tracer = _tracer.get()
        if tracer is not None:
            tracer.conv(self.name, self.weight.data, x.data, self.stride, self.padding, self.bias is not None)
        y = conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + reshape(self.bias, (1, self.out_features, 1, 1))
        return y


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Return patches as [N*Ho*Wo, C*k*k] plus the output spatial size."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c != c_in or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: spatial size {(h, w)} smaller than kernel {k} after padding {padding}")
    cols, ho, wo = im2col(x.data, k, stride, padding)
    wm = weight.data.reshape(c_out, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        gr = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gr.T @ cols).reshape(weight.shape)
        gcols = (gr @ wm).reshape(n, ho, wo, c, k, k)
        gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(gx), gw

    return record(np.ascontiguousarray(out), (x, weight), bw)


class BatchNorm:
    """Batch normalization over one feature axis; every other axis is pooled.

    Time is folded into the leading batch axis by the network, so training
    statistics cover batch x time x remaining axes.
    """

    def __init__(self, num_features: int, axis: int = 1, eps: float = 1e-5, momentum: float = 0.1,
                 name: str = ""):
        self.name = name
        self.axis = axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(num_features), name=f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.training = True

    @property
    def num_features(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return bn_forward(x, self, "train" if self.training else "eval")


def bn_forward(x: Tensor, bn: BatchNorm, mode: str = "train") -> Tensor:
    axis = bn.axis % x.ndim
    if x.shape[axis] != bn.num_features:
        raise ShapeError(f"{bn.name}: expected {bn.num_features} features on axis {axis}, got {x.shape}")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = bn.num_features
    X = x.data
    gamma = bn.gamma.data.reshape(bshape)
    beta = bn.beta.data.reshape(bshape)
    n = X.size // bn.num_features
    if mode == "train":
        if n < 2:
            raise ValueError(f"{bn.name}: train-mode batch norm needs at least 2 values per feature, got {n}")
        mu = X.mean(axis=red, keepdims=True)
        var = X.var(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        xhat = (X - mu) * inv_std
        m = bn.momentum
        bn.running_mean[:] = (1 - m) * bn.running_mean + m * mu.reshape(-1)
        bn.running_var[:] = (1 - m) * bn.running_var + m * var.reshape(-1) * n / (n - 1)

        def bw(g):
            ggamma = (g * xhat).sum(axis=red)
            gbeta = g.sum(axis=red)
            gx_hat = g * gamma
            gx = inv_std / n * (n * gx_hat - gx_hat.sum(axis=red, keepdims=True)
                                - xhat * (gx_hat * xhat).sum(axis=red, keepdims=True))
            return gx, ggamma, gbeta
    elif mode == "eval":
        tracer = _tracer.get()
        if tracer is not None:
            tracer.batchnorm(bn.name, X)
        inv_std = 1.0 / np.sqrt(bn.running_var.reshape(bshape) + bn.eps)
        xhat = (X - bn.running_mean.reshape(bshape)) * inv_std

        def bw(g):
            return g * gamma * inv_std, (g * xhat).sum(axis=red), g.sum(axis=red)
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    return record(gamma * xhat + beta, (x, bn.gamma, bn.beta), bw)


def fold_bn(layer: Linear | Conv2d, bn: BatchNorm, dtype=np.float32) -> Linear | Conv2d:
    """Absorb eval-mode ``bn`` into ``layer``: returns a layer with scaled weights and a bias."""
    if layer.out_features != bn.num_features:
        raise ShapeError(f"cannot fold {bn.name} ({bn.num_features} features) into "
                         f"{layer.name} ({layer.out_features} outputs)")
    if isinstance(layer, Linear) and layer.axis != bn.axis:
        raise ShapeError(f"{bn.name} normalizes axis {bn.axis} but {layer.name} writes axis {layer.axis}")
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    w = layer.weight.data * scale.reshape((-1,) + (1,) * (layer.weight.ndim - 1))
    b = bn.beta.data - scale * bn.running_mean
    if layer.bias is not None:
        b = b + scale * layer.bias.data
    w, b = w.astype(dtype), b.astype(dtype)
    if isinstance(layer, Linear):
        return Linear(layer.in_features, layer.out_features, axis=layer.axis, name=layer.name, weight=w, bias=b)
    return Conv2d(layer.in_channels, layer.out_features, layer.kernel_size, layer.stride, layer.padding,
                  name=layer.name, weight=w, bias=b)


class Projection:
    """A weighted layer followed by its batch norm; after folding the norm is gone."""

    def __init__(self, layer: Linear | Conv2d, bn: BatchNorm | None):
        self.layer = layer
        self.bn = bn

    @property
    def name(self) -> str:
        return self.layer.name

    @property
    def folded(self) -> bool:
        return self.bn is None

    def parameters(self) -> list[Parameter]:
        return self.layer.parameters() + (self.bn.parameters() if self.bn is not None else [])

    def buffers(self) -> dict[str, np.ndarray]:
        return self.bn.buffers() if self.bn is not None else {}

    def __call__(self, x: Tensor) -> Tensor:
        y = self.layer(x)
        return self.bn(y) if self.bn is not None else y

    def fold(self, dtype=np.float32) -> "Projection":
        if self.bn is None:
            return self
        return Projection(fold_bn(self.layer, self.bn, dtype), None)
