"""Convolutional building blocks with hand-written backward passes.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward``; parameter gradients are accumulated (``+=``)
into the layer's :class:`Param` buffers. Layers compute in the dtype of
their parameters, so casting a model to float64 gives the verification path.
"""
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import DTYPE, Param, ShapeError, check_tensor


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def conv_out_size(size, kernel, stride, pad, dilation):
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def xavier_init(shape, seed=0, rng=None, dtype=DTYPE):
    """Uniform Xavier/Glorot init for conv weights ``(out, in, kh, kw)``."""
    rng = np.random.default_rng(seed) if rng is None else rng
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def bilinear_init(kernel, stride=None, channels=1, dtype=DTYPE):
    """Channel-diagonal bilinear upsampling weights ``(c, c, k, k)``.

    The 1-D tent is ``1 - |y - (k-1)/2| / ceil(k/2)``.
    """
    kh, kw = _pair(kernel)
    if kh != kw:
        raise ValueError(f"bilinear kernel must be square, got {kh}x{kw}")
    f = math.ceil(kh / 2)
    center = (kh - 1) / 2
    tent = 1 - np.abs(np.arange(kh) - center) / f
    filt = np.outer(tent, tent)
    w = np.zeros((channels, channels, kh, kw), dtype=dtype)
    for c in range(channels):
        w[c, c] = filt
    return w


def im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow):
    """Strided window view ``(n, c, oh, ow, kh, kw)`` of a padded input."""
    n, c = xp.shape[:2]
    s = xp.strides
    return as_strided(xp, shape=(n, c, oh, ow, kh, kw),
                      strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2] * dh, s[3] * dw),
                      writeable=False)


def col2im_cf(cols, out, sh, sw, dh, dw):
    """Scatter-add channel-first ``cols`` ``(c, kh, kw, n, oh, ow)`` into ``out``."""
    _, kh, kw, _, oh, ow = cols.shape
    view = out.transpose(1, 0, 2, 3)
    for i in range(kh):
        y0 = i * dh
        for j in range(kw):
            x0 = j * dw
            view[:, :, y0:y0 + sh * (oh - 1) + 1:sh, x0:x0 + sw * (ow - 1) + 1:sw] += cols[:, i, j]
    return out


class Layer:
    def params(self):
        return []

    def __call__(self, x):
        return self.forward(x)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)
    dilation: tuple = (1, 1)
    has_bias: bool = True

    def __post_init__(self):
        for f in ("kernel", "stride", "pad", "dilation"):
            object.__setattr__(self, f, _pair(getattr(self, f)))
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be >= 1")

    def out_shape(self, h, w):
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.pad, self.dilation
        return conv_out_size(h, kh, sh, ph, dh), conv_out_size(w, kw, sw, pw, dw)

    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel


class Conv2d(Layer):
    def __init__(self, spec, name, rng=None, dtype=DTYPE):
        self.spec = spec
        self.name = name
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = Param(f"{name}.weight", xavier_init(spec.weight_shape(), rng=rng, dtype=dtype))
        self.bias = Param(f"{name}.bias", np.zeros(spec.out_channels, dtype=dtype)) if spec.has_bias else None
        self.need_input_grad = True

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        check_tensor(x, self.name)
        s = self.spec
        if x.shape[1] != s.in_channels:
            raise ShapeError(f"{self.name}: expected {s.in_channels} channels, got {x.shape[1]}")
        n, c, h, w = x.shape
        oh, ow = s.out_shape(h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: output size {oh}x{ow} for input {h}x{w}")
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = s.kernel, s.stride, s.pad, s.dilation
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        # columns are (c*kh*kw, n*oh*ow) so the copy runs along contiguous rows
        cols = im2col(xp, kh, kw, sh, sw, dh, dw, oh, ow)
        cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
        out = self.weight.value.reshape(s.out_channels, -1) @ cols
        if self.bias is not None:
            out += self.bias.value[:, None]
        self._cache = (cols, xp.shape, (n, oh, ow))
        return np.ascontiguousarray(out.reshape(s.out_channels, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(self, grad):
        s = self.spec
        cols, xp_shape, (n, oh, ow) = self._cache
        g = grad.transpose(1, 0, 2, 3).reshape(s.out_channels, n * oh * ow)
        wmat = self.weight.value.reshape(s.out_channels, -1)
        self.weight.grad += (g @ cols.T).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += g.sum(axis=1)
        if not self.need_input_grad:
            return None
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = s.kernel, s.stride, s.pad, s.dilation
        dcols = (wmat.T @ g).reshape(s.in_channels, kh, kw, n, oh, ow)
        dxp = col2im_cf(dcols, np.zeros(xp_shape, dtype=grad.dtype), sh, sw, dh, dw)
        return dxp[:, :, ph:xp_shape[2] - ph, pw:xp_shape[3] - pw]



@dataclass(frozen=True)
class Deconv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (4, 4)
    stride: tuple = (2, 2)
    pad: tuple = (1, 1)
    trainable: bool = True

    def __post_init__(self):
        for f in ("kernel", "stride", "pad"):
            object.__setattr__(self, f, _pair(getattr(self, f)))

    def out_shape(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.pad
        return (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw

    def weight_shape(self):
        return (self.in_channels, self.out_channels) + self.kernel


class Deconv2d(Layer):
    """Transposed convolution; weights are ``(in, out, kh, kw)``."""

    def __init__(self, spec, name, dtype=DTYPE, bilinear=True, rng=None):
        self.spec = spec
        self.name = name
        if bilinear:
            if spec.in_channels != spec.out_channels:
                raise ShapeError("bilinear deconv needs in_channels == out_channels")
            w = bilinear_init(spec.kernel, spec.stride, spec.in_channels, dtype=dtype)
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            w = xavier_init(spec.weight_shape(), rng=rng, dtype=dtype)
        self.weight = Param(f"{name}.weight", w)

    def params(self):
        return [self.weight] if self.spec.trainable else []

    def forward(self, x):
        check_tensor(x, self.name)
        s = self.spec
        if x.shape[1] != s.in_channels:
            raise ShapeError(f"{self.name}: expected {s.in_channels} channels, got {x.shape[1]}")
        n, c, h, w = x.shape
        (kh, kw), (sh, sw), (ph, pw) = s.kernel, s.stride, s.pad
        oh, ow = s.out_shape(h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: output size {oh}x{ow} for input {h}x{w}")
        xm = x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        cols = (self.weight.value.reshape(c, -1).T @ xm).reshape(s.out_channels, kh, kw, n, h, w)
        full = np.zeros((n, s.out_channels, (h - 1) * sh + kh, (w - 1) * sw + kw), dtype=x.dtype)
        col2im_cf(cols, full, sh, sw, 1, 1)
        self._cache = (xm, (n, h, w))
        return np.ascontiguousarray(full[:, :, ph:ph + oh, pw:pw + ow])

    def backward(self, grad):
        s = self.spec
        xm, (n, h, w) = self._cache
        (kh, kw), (sh, sw), (ph, pw) = s.kernel, s.stride, s.pad
        full_h, full_w = (h - 1) * sh + kh, (w - 1) * sw + kw
        gp = np.zeros((n, s.out_channels, full_h, full_w), dtype=grad.dtype)
        gp[:, :, ph:ph + grad.shape[2], pw:pw + grad.shape[3]] = grad
        gcols = im2col(gp, kh, kw, sh, sw, 1, 1, h, w)
        gcols = gcols.transpose(1, 4, 5, 0, 2, 3).reshape(-1, n * h * w)
        wmat = self.weight.value.reshape(s.in_channels, -1)
        if s.trainable:
            self.weight.grad += (xm @ gcols.T).reshape(self.weight.shape)
        dx = wmat @ gcols
        return np.ascontiguousarray(dx.reshape(s.in_channels, n, h, w).transpose(1, 0, 2, 3))


@dataclass(frozen=True)
class L2NormSpec:
    channels: int
    scale: float = 20.0
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


class L2Norm(Layer):
    """Per-location channel L2 normalisation with a learnable per-channel scale."""

    def __init__(self, spec, name, dtype=DTYPE):
        self.spec = spec
        self.name = name
        self.scale = Param(f"{name}.scale", np.full(spec.channels, spec.scale, dtype=dtype))

    def params(self):
        return [self.scale]

    def forward(self, x):
        check_tensor(x, self.name)
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"{self.name}: expected {self.spec.channels} channels, got {x.shape[1]}")
        r = np.sqrt((x * x).sum(axis=1, keepdims=True) + self.spec.epsilon)
        u = x / r
        self._cache = (x, r, u)
        return u * self.scale.value[None, :, None, None]

    def backward(self, grad):
        x, r, u = self._cache
        self.scale.grad += (grad * u).sum(axis=(0, 2, 3))
        gu = grad * self.scale.value[None, :, None, None]
        return (gu - x * (gu * x).sum(axis=1, keepdims=True) / (r * r)) / r


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2(Layer):
    """2x2 stride-2 max pooling; ties route the gradient to the first index."""

    def forward(self, x):
        check_tensor(x, "maxpool input")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        # window positions in row-major order: (0,0), (0,1), (1,0), (1,1)
        taps = [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]]
        out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))
        idx = np.full(out.shape, 3, dtype=np.int8)
        for k in (2, 1, 0):
            idx[taps[k] == out] = k
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad):
        shape, idx = self._cache
        dx = np.zeros(shape, dtype=grad.dtype)
        for k, (dy, dxo) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            dx[:, :, dy::2, dxo::2] = grad * (idx == k)
        return dx


def relu(x):
    return np.maximum(x, 0)


def conv2d(x, weight, bias=None, stride=1, pad=0, dilation=1):
    """Functional convolution forward (no gradient bookkeeping)."""
    spec = Conv2dSpec(weight.shape[1], weight.shape[0], weight.shape[2:], stride, pad, dilation,
                      has_bias=bias is not None)
    layer = Conv2d.__new__(Conv2d)
    layer.spec, layer.name, layer.need_input_grad = spec, "conv2d", False
    layer.weight = Param("w", weight)
    layer.bias = Param("b", bias) if bias is not None else None
    return layer.forward(x)


def deconv2d(x, weight, stride=2, pad=1):
    """Functional transposed convolution forward."""
    spec = Deconv2dSpec(weight.shape[0], weight.shape[1], weight.shape[2:], stride, pad)
    layer = Deconv2d.__new__(Deconv2d)
    layer.spec, layer.name = spec, "deconv2d"
    layer.weight = Param("w", weight)
    return layer.forward(x)
