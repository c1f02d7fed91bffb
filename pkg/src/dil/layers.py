"""Neural building blocks: convolution, pooling, upsampling, batch norm,
linear projection, softmax.

Each op is a fused tape primitive with a hand-written backward rule.
Convolution runs as image-to-column plus one BLAS matmul; the naive loop
reference lives in the test suite as its oracle. All convs here are
size-preserving (odd kernel, stride 1, pad (k-1)/2).
"""

from __future__ import annotations

import numpy as np

from dil.tensor import Tensor, _record


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Size-preserving convolution layer (kernel 3x3 pad 1, or 1x1 pad 0)."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if ksize % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {ksize}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = 1
        self.padding = (ksize - 1) // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        w = kaiming_uniform(rng, (out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def named_buffers(self):
        return iter(())


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    ``training=True`` uses batch statistics and updates the running ones
    with momentum 0.1; ``training=False`` reads only the running stats
    (initialized to mean 0, var 1).
    """

    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def load_buffer(self, name: str, arr: np.ndarray) -> None:
        cur = getattr(self, name)
        if cur.shape != arr.shape:
            raise ValueError(f"buffer {name}: shape {arr.shape} != {cur.shape}")
        cur[...] = arr


class Linear:
    """Affine map on the trailing dimension."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.d_in = d_in
        self.d_out = d_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (d_in, d_out), d_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def named_buffers(self):
        return iter(())


# ---------------------------------------------------------------------------
# Functional ops


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N,C,H,W) -> (C*k*k, N*H*W) patch matrix, stride 1, zero padding.

    Built from k*k shifted-slice block copies, which beat a generic
    strided gather by a wide margin.
    """
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki : ki + h, kj : kj + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def _cols_to_image(out2d: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    cout = out2d.shape[0]
    return np.ascontiguousarray(out2d.reshape(cout, n, h, w).transpose(1, 0, 2, 3))


def _conv_raw(x: np.ndarray, w: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Cross-correlation via im2col + one GEMM; returns (N, Cout, H, W)."""
    n, _, h, wdt = x.shape
    out2d = w.reshape(w.shape[0], -1) @ _im2col(x, k, pad)
    return _cols_to_image(out2d, n, h, wdt)


def conv2d(x: Tensor, layer: Conv2d) -> Tensor:
    """Zero-padded cross-correlation preserving spatial size."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W), got {x.data.shape}")
    if x.data.shape[1] != layer.in_ch:
        raise ValueError(
            f"conv2d: input has {x.data.shape[1]} channels, layer expects {layer.in_ch}"
        )
    k, pad = layer.ksize, layer.padding
    weight, bias = layer.weight, layer.bias
    n, _, h, w_ = x.data.shape
    cols = _im2col(x.data, k, pad)  # kept for the weight gradient
    y = _cols_to_image(weight.data.reshape(layer.out_ch, -1) @ cols, n, h, w_)
    y += bias.data[None, :, None, None]
    out = Tensor(y)
    wd = weight.data

    def _back(g):
        co = g.shape[1]
        # input gradient: correlate g with the flipped, in/out-swapped kernel
        w_flip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _conv_raw(g, np.ascontiguousarray(w_flip), k, pad)
        g_mat = g.transpose(1, 0, 2, 3).reshape(co, n * h * w_)
        gw = (g_mat @ cols.T).reshape(wd.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record(out, (x, weight, bias), _back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first max in each
    window (row-major order)."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0])

    def _back(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(out, (x,), _back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    n, c, h, w = x.data.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def _back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), _back)


def batchnorm2d(x: Tensor, layer: BatchNorm2d) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects (N,C,H,W), got {x.data.shape}")
    if x.data.shape[1] != layer.ch:
        raise ValueError(
            f"batchnorm2d: input has {x.data.shape[1]} channels, layer has {layer.ch}"
        )
    gamma, beta = layer.gamma, layer.beta
    eps = x.data.dtype.type(layer.eps)
    if layer.training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased, matches the backward rule
        m = layer.momentum
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean.astype(
            layer.running_mean.dtype
        )
        layer.running_var[...] = (1 - m) * layer.running_var + m * var.astype(
            layer.running_var.dtype
        )
    else:
        mean = layer.running_mean.astype(x.data.dtype)
        var = layer.running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None])
    xd = x.data
    training = layer.training

    def _back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gs = g * gamma.data[None, :, None, None]
        if not training:
            gx = gs * inv_std[None, :, None, None]
            return gx, ggamma, gbeta
        nper = xd.shape[0] * xd.shape[2] * xd.shape[3]
        xc = xd - mean[None, :, None, None]
        gvar = (gs * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std**3
        gmean = -gs.sum(axis=(0, 2, 3)) * inv_std + gvar * (-2.0 / nper) * xc.sum(
            axis=(0, 2, 3)
        )
        gx = (
            gs * inv_std[None, :, None, None]
            + gvar[None, :, None, None] * (2.0 / nper) * xc
            + gmean[None, :, None, None] / nper
        )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), _back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def _back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), _back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Batched affine map over the trailing dimension: y = x @ W (+ b)."""
    d_in, d_out = weight.data.shape
    if x.data.shape[-1] != d_in:
        raise ValueError(f"linear: input dim {x.data.shape[-1]} != weight dim {d_in}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    y = x2 @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y.reshape(*lead, d_out))

    def _back(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, _back)
