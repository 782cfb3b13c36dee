"""Differentiable layers with hand-written reverse-mode gradients.

Every layer follows the same contract::

    y, ctx = layer.forward(x, train=True)
    gx = layer.backward(ctx, gy)   # parameter gradients accumulate (+=) into the store

Linear and Conv2d take ``input_grad=False`` for layers fed directly by data;
their backward then returns ``None``.

A context can be consumed by exactly one backward call of the layer that
produced it. Linear, Conv2d and BatchNorm accept optional active channel counts
so the same parameters can be run at a reduced width; the active slice is
always the leading channels and gradients land only in that slice.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, UsageError
from .params import Param, ParamStore
from .tensor import Rng, rand_uniform


class Context:
    __slots__ = ("layer", "saved", "spent")

    def __init__(self, layer, saved):
        self.layer = layer
        self.saved = saved
        self.spent = False


class Layer:
    def _context(self, **saved) -> Context:
        return Context(self, saved)

    def _open(self, ctx) -> dict:
        if not isinstance(ctx, Context) or ctx.layer is not self:
            raise UsageError(f"{type(self).__name__}.backward got a context from a different layer")
        if ctx.spent:
            raise UsageError(f"{type(self).__name__}.backward: context already consumed")
        ctx.spent = True
        return ctx.saved

    def params(self) -> list[Param]:
        return []


def kaiming_uniform(rng: Rng | None, shape, fan_in: int) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    bound = math.sqrt(6.0 / fan_in)
    return rand_uniform(rng, shape, -bound, bound)


class Linear(Layer):
    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int,
                 bias: bool = True, rng: Rng | None = None):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        self.weight = store.add(f"{name}.weight",
                                kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = store.add(f"{name}.bias", np.zeros(out_features)) if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, train=True, in_features=None, out_features=None, input_grad=True):
        i = in_features or self.in_features
        o = out_features or self.out_features
        if x.ndim != 2 or x.shape[1] != i:
            raise DimensionError(f"{self.name}: expected input (batch, {i}), got {x.shape}")
        w = self.weight.value[:o, :i]
        y = x @ w.T
        if self.bias is not None:
            y = y + self.bias.value[:o]
        return y, self._context(x=x, w=w, i=i, o=o, input_grad=input_grad)

    def backward(self, ctx, gy):
        s = self._open(ctx)
        i, o = s["i"], s["o"]
        self.weight.grad[:o, :i] += gy.T @ s["x"]
        if self.bias is not None:
            self.bias.grad[:o] += gy.sum(axis=0)
        return gy @ s["w"] if s["input_grad"] else None


def _im2col(x, k, stride, pad, ho, wo):
    """Rows are output pixels (n, i, j), columns are (channel, ky, kx) taps."""
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, ho, wo, c, k, k))
    for a in range(k):
        for b in range(k):
            cols[..., a, b] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride].transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * k * k), xp.shape


class Conv2d(Layer):
    """2-D convolution over NCHW input, implemented as an im2col matmul."""

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel_size: int = 3, stride: int = 1, padding: int = 1,
                 bias: bool = True, rng: Rng | None = None):
        if kernel_size % 2 != 1:
            raise DimensionError(f"{name}: kernel size must be odd, got {kernel_size}")
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = store.add(
            f"{name}.kernel",
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in),
        )
        self.bias = store.add(f"{name}.bias", np.zeros(out_channels)) if bias else None

    def params(self):
        return [self.kernel] + ([self.bias] if self.bias is not None else [])

    def output_size(self, h, w):
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo

    def forward(self, x, train=True, in_channels=None, out_channels=None, input_grad=True):
        ci = in_channels or self.in_channels
        co = out_channels or self.out_channels
        if x.ndim != 4 or x.shape[1] != ci:
            raise DimensionError(f"{self.name}: expected input (N, {ci}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        ho, wo = self.output_size(h, w)
        if ho < 1 or wo < 1:
            raise DimensionError(f"{self.name}: input {h}x{w} too small for kernel {self.k}")
        p, st, k = self.padding, self.stride, self.k
        cols, xshape = _im2col(x, k, st, p, ho, wo)
        kmat = self.kernel.value[:co, :ci].reshape(co, ci * k * k)
        y = cols @ kmat.T
        if self.bias is not None:
            y += self.bias.value[:co]
        y = np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
        return y, self._context(cols=cols, kmat=kmat, xshape=xshape, hw=(h, w), ci=ci, co=co,
                                input_grad=input_grad)

    def backward(self, ctx, gy):
        s = self._open(ctx)
        ci, co, k, st, p = s["ci"], s["co"], self.k, self.stride, self.padding
        n, _, ho, wo = gy.shape
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, co)
        self.kernel.grad[:co, :ci] += (g2.T @ s["cols"]).reshape(co, ci, k, k)
        if self.bias is not None:
            self.bias.grad[:co] += g2.sum(axis=0)
        if not s["input_grad"]:
            return None
        h, w = s["hw"]
        if st == 1 and p <= k - 1:
            # stride 1: input gradient is a full correlation of gy with the flipped kernel
            q = k - 1 - p
            cols, _ = _im2col(gy, k, 1, q, h, w)
            flipped = s["kmat"].reshape(co, ci, k, k)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
            gx = cols @ flipped.T
            return np.ascontiguousarray(gx.reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        gcols = (g2 @ s["kmat"]).reshape(n, ho, wo, ci, k, k)
        gxp = np.zeros(s["xshape"])
        for a in range(k):
            for b in range(k):
                gxp[:, :, a:a + st * ho:st, b:b + st * wo:st] += gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + w]


class BatchNorm(Layer):
    """Batch normalization over the channel axis of (N, C) or (N, C, H, W) input.

    ``affine`` may pass in a shared ``(gamma, beta)`` pair of full-width
    parameters; the leading ``channels`` entries are then used. Running
    moments are always private to this layer.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5, affine: tuple[Param, Param] | None = None):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        if affine is None:
            self.gamma = store.add(f"{name}.gamma", np.ones(channels))
            self.beta = store.add(f"{name}.beta", np.zeros(channels))
            self.owns_affine = True
        else:
            self.gamma, self.beta = affine
            self.owns_affine = False
        self.running_mean = store.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
        self.running_var = store.add(f"{name}.running_var", np.ones(channels), trainable=False)

    def params(self):
        return [self.gamma, self.beta] if self.owns_affine else []

    def forward(self, x, train=True):
        c = self.channels
        if x.ndim not in (2, 4) or x.shape[1] != c:
            raise DimensionError(f"{self.name}: expected {c} channels, got input {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
        m = x.size // c
        if train:
            mu = x.mean(axis=axes)
            centered = x - mu.reshape(bshape)
            var = np.mean(centered * centered, axis=axes)
            mom = self.momentum
            unbiased = var * m / (m - 1) if m > 1 else var
            self.running_mean.value[...] = (1 - mom) * self.running_mean.value + mom * mu
            self.running_var.value[...] = (1 - mom) * self.running_var.value + mom * unbiased
        else:
            centered = x - self.running_mean.value.reshape(bshape)
            var = self.running_var.value
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv.reshape(bshape)
        gamma = self.gamma.value[:c].reshape(bshape)
        y = gamma * xhat + self.beta.value[:c].reshape(bshape)
        return y, self._context(xhat=xhat, inv=inv, gamma=gamma, axes=axes, bshape=bshape, m=m, train=train)

    def backward(self, ctx, gy):
        s = self._open(ctx)
        c, axes, bshape, xhat = self.channels, s["axes"], s["bshape"], s["xhat"]
        self.gamma.grad[:c] += np.sum(gy * xhat, axis=axes)
        self.beta.grad[:c] += np.sum(gy, axis=axes)
        gxhat = gy * s["gamma"]
        inv = s["inv"].reshape(bshape)
        if not s["train"]:
            return gxhat * inv
        m = s["m"]
        sum_g = np.sum(gxhat, axis=axes).reshape(bshape)
        sum_gx = np.sum(gxhat * xhat, axis=axes).reshape(bshape)
        return inv / m * (m * gxhat - sum_g - xhat * sum_gx)


class ReLU(Layer):
    def forward(self, x, train=True):
        mask = x > 0
        return np.where(mask, x, 0.0), self._context(mask=mask)

    def backward(self, ctx, gy):
        return np.where(self._open(ctx)["mask"], gy, 0.0)


class AvgPool2d(Layer):
    """Non-overlapping k x k average pooling; H and W must be multiples of k."""

    def __init__(self, k: int = 2):
        self.k = k

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise DimensionError(f"AvgPool2d({k}): spatial size {h}x{w} not divisible")
        y = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, self._context(shape=x.shape)

    def backward(self, ctx, gy):
        n, c, h, w = self._open(ctx)["shape"]
        k = self.k
        g = np.broadcast_to(gy[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        return g.reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    def forward(self, x, train=True):
        return x.mean(axis=(2, 3)), self._context(shape=x.shape)

    def backward(self, ctx, gy):
        n, c, h, w = self._open(ctx)["shape"]
        return np.broadcast_to(gy[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Flatten(Layer):
    def forward(self, x, train=True):
        return x.reshape(x.shape[0], -1), self._context(shape=x.shape)

    def backward(self, ctx, gy):
        return gy.reshape(self._open(ctx)["shape"])


class Tape:
    """Records (layer, context) pairs of a forward chain for reverse replay."""

    def __init__(self):
        self.entries = []

    def run(self, layer, x, **kwargs):
        y, ctx = layer.forward(x, **kwargs)
        self.entries.append((layer, ctx))
        return y

    def backward(self, g):
        for layer, ctx in reversed(self.entries):
            if g is None:
                break
            g = layer.backward(ctx, g)
        self.entries = []
        return g
