"""Multi-level feature fusion: concatenation and element-sum modules.

A fusion module takes feature maps from several backbone taps, brings each
one to the resolution of the target tap (transposed convolution for a deeper
tap, 2x max pooling for a shallower one), passes it through a 3x3 conv, ReLU
and a scaled L2 normalisation, and then combines the branches either by
channel concatenation followed by a 1x1 conv, or by an unweighted sum.
"""
from dataclasses import dataclass

import numpy as np

from .layers import (Conv2d, Conv2dSpec, Deconv2d, Deconv2dSpec, L2Norm, L2NormSpec,
                     MaxPool2, ReLU)
from .tensor import DTYPE, ShapeError, concat_channels, eltwise_sum

MODES = ("none", "concat", "eltsum")
DEFAULT_BRANCH_KERNELS = {"concat": 512, "eltsum": 384, "none": 0}


@dataclass
class FusionConfig:
    mode: str = "none"
    branch_kernels: int = 0          # 0 selects the per-mode default
    reduce_kernels: int = 0          # concat only; 0 means branch_kernels
    norm_scale_shallow: float = 10.0
    norm_scale_deep: float = 20.0
    norm_scale_extra: float = 10.0   # third branch, shallower than the target
    deconv_trainable: bool = True
    taps: tuple = ("conv4a", "conv5a")
    target: str = "conv4a"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"fusion mode must be one of {MODES}, got {self.mode!r}")
        self.taps = tuple(self.taps)
        if self.mode != "none" and self.target not in self.taps:
            raise ValueError(f"fusion target {self.target!r} is not among taps {self.taps}")

    @property
    def kernels(self):
        return self.branch_kernels or DEFAULT_BRANCH_KERNELS[self.mode]

    @property
    def out_channels(self):
        if self.mode == "concat":
            return self.reduce_kernels or self.kernels
        return self.kernels


def _resample_kind(size, target):
    if size == target:
        return "same"
    if (size[0] * 2, size[1] * 2) == tuple(target):
        return "up"
    if (size[0], size[1]) == (target[0] * 2, target[1] * 2):
        return "down"
    raise ShapeError(f"cannot fuse a {size} map into a {target} map; sizes must differ by 2x")


class Branch:
    """resample -> 3x3 conv -> ReLU -> L2Norm(scale)."""

    def __init__(self, tap, channels, kind, kernels, scale, cfg, rng, dtype):
        prefix = f"fusion.{tap}"
        self.tap, self.kind = tap, kind
        if kind == "up":
            self.resample = Deconv2d(Deconv2dSpec(channels, channels, 4, 2, 1, cfg.deconv_trainable),
                                     f"{prefix}.deconv", dtype=dtype)
        elif kind == "down":
            self.resample = MaxPool2()
        else:
            self.resample = None
        self.conv = Conv2d(Conv2dSpec(channels, kernels, 3, 1, 1), f"{prefix}.conv", rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.norm = L2Norm(L2NormSpec(kernels, scale), f"{prefix}.norm", dtype=dtype)

    def layers(self):
        return [l for l in (self.resample, self.conv, self.relu, self.norm) if l is not None]

    def params(self):
        return [p for l in self.layers() for p in l.params()]

    def forward(self, x):
        for layer in self.layers():
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers()):
            g = layer.backward(g)
        return g


class FusionModule:
    """Fuses ``cfg.taps`` into one map at the resolution of ``cfg.target``.

    ``channels`` and ``sizes`` map each tap name to its channel count and
    spatial size.
    """

    def __init__(self, cfg, channels, sizes, rng=None, dtype=DTYPE):
        if cfg.mode == "none":
            raise ValueError("FusionModule needs mode 'concat' or 'eltsum'")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.target_size = tuple(sizes[cfg.target])
        k = cfg.kernels
        self.branches = []
        for tap in cfg.taps:
            kind = _resample_kind(tuple(sizes[tap]), self.target_size)
            scale = {"same": cfg.norm_scale_shallow, "up": cfg.norm_scale_deep,
                     "down": cfg.norm_scale_extra}[kind]
            self.branches.append(Branch(tap, channels[tap], kind, k, scale, cfg, rng, dtype))
        if cfg.mode == "concat":
            self.reduce = Conv2d(Conv2dSpec(k * len(cfg.taps), cfg.out_channels, 1, 1, 0),
                                 "fusion.reduce", rng=rng, dtype=dtype)
        else:
            self.reduce = None
        self.out_relu = ReLU()

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def params(self):
        ps = [p for b in self.branches for p in b.params()]
        if self.reduce is not None:
            ps += self.reduce.params()
        return ps

    def forward(self, *features):
        if len(features) != len(self.branches):
            raise ShapeError(f"expected {len(self.branches)} feature maps, got {len(features)}")
        self.branch_outputs = [b.forward(f) for b, f in zip(self.branches, features)]
        for b, out in zip(self.branches, self.branch_outputs):
            if out.shape[2:] != self.target_size:
                raise ShapeError(f"branch {b.tap} produced {out.shape[2:]}, expected {self.target_size}")
        return self.combine(self.branch_outputs)

    def combine(self, outputs):
        if self.cfg.mode == "concat":
            self._splits = [o.shape[1] for o in outputs]
            x = outputs[0]
            for o in outputs[1:]:
                x = concat_channels(x, o)
            x = self.reduce.forward(x)
        else:
            x = outputs[0]
            for o in outputs[1:]:
                x = eltwise_sum(x, o)
        return self.out_relu.forward(x)

    def backward(self, grad):
        """Returns the gradients w.r.t. each input feature map, in tap order."""
        g = self.out_relu.backward(grad)
        if self.cfg.mode == "concat":
            g = self.reduce.backward(g)
            edges = np.cumsum([0] + self._splits)
            branch_grads = [g[:, a:b] for a, b in zip(edges[:-1], edges[1:])]
        else:
            branch_grads = [g] * len(self.branches)
        return [b.backward(bg) for b, bg in zip(self.branches, branch_grads)]


def concat_fusion_forward(f_shallow, f_deep, cfg, module):
    if cfg.mode != "concat":
        raise ValueError(f"concat fusion called with mode {cfg.mode!r}")
    _check_pair(f_shallow, f_deep)
    return module.forward(f_shallow, f_deep)


def eltsum_fusion_forward(f_shallow, f_deep, cfg, module):
    if cfg.mode != "eltsum":
        raise ValueError(f"eltsum fusion called with mode {cfg.mode!r}")
    _check_pair(f_shallow, f_deep)
    return module.forward(f_shallow, f_deep)


def _check_pair(f_shallow, f_deep):
    hs, ws = f_shallow.shape[2:]
    hd, wd = f_deep.shape[2:]
    if (hd * 2, wd * 2) != (hs, ws):
        raise ShapeError(f"deep map {hd}x{wd} must be half the shallow map {hs}x{ws}")


@dataclass
class LayerCost:
    kind: str
    name: str
    params: int
    mult_adds: int


def conv_cost(name, cin, cout, k, out_h, out_w, bias=True):
    return LayerCost("conv", name, cout * cin * k * k + (cout if bias else 0), out_h * out_w * cout * cin * k * k)


def fusion_layers(cfg, input_shapes):
    """Closed-form per-layer costs. ``input_shapes`` maps tap -> (c, h, w)."""
    if cfg.mode == "none":
        return []
    th, tw = input_shapes[cfg.target][1:]
    k = cfg.kernels
    out = []
    for tap in cfg.taps:
        c, h, w = input_shapes[tap]
        kind = _resample_kind((h, w), (th, tw))
        if kind == "up":
            out.append(LayerCost("deconv", f"fusion.{tap}.deconv", c * c * 16, h * w * c * c * 16))
        out.append(conv_cost(f"fusion.{tap}.conv", c, k, 3, th, tw))
        out.append(LayerCost("norm", f"fusion.{tap}.norm", k, th * tw * k))
    if cfg.mode == "concat":
        out.append(conv_cost("fusion.reduce", k * len(cfg.taps), cfg.out_channels, 1, th, tw))
    return out


def fusion_cost(cfg, input_shapes):
    """(parameter count, multiply-add count) of the fusion module."""
    layers = fusion_layers(cfg, input_shapes)
    return sum(l.params for l in layers), sum(l.mult_adds for l in layers)
