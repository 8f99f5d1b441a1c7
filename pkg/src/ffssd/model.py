"""Desk-scale single-shot detector with an optional fusion module.

The backbone is a small VGG-like stack whose named taps mirror the layers a
full-size SSD draws on: ``conv3a`` (1/4 resolution), ``conv4a`` (1/8),
``conv5a`` (1/16), a dilated ``fc6a`` (1/16) and a strided ``conv7a`` (1/32).
When fusion is enabled, the fused map replaces the target tap as the source
of the smallest-scale predictions; all other prediction taps are unchanged.
"""
from dataclasses import dataclass, field

import numpy as np

from .boxes import VARIANCES, center_to_corner, decode_box, generate_priors, nms
from .fusion import FusionConfig, FusionModule, conv_cost, fusion_layers
from .layers import Conv2d, Conv2dSpec, MaxPool2, ReLU
from .loss import log_softmax
from .tensor import DTYPE, ShapeError, check_tensor

TAPS = ("conv3a", "conv4a", "conv5a", "fc6a", "conv7a")
PIXEL_MEAN = 0.5


@dataclass
class ModelConfig:
    input_size: int = 96
    # conv1, conv2, conv3a, conv4a, conv5a
    stage_channels: tuple = (16, 32, 64, 64, 64)
    fc6_channels: int = 64
    fc6_dilation: int = 2
    extra_channels: int = 64
    pred_taps: tuple = ("conv4a", "fc6a", "conv7a")
    prior_scales: tuple = (0.1, 0.3, 0.55)
    max_scale: float = 0.8
    aspect_ratios: tuple = ((1.0, 2.0, 0.5), (1.0, 2.0, 0.5, 3.0, 1 / 3), (1.0, 2.0, 0.5, 3.0, 1 / 3))
    num_categories: int = 6
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.pred_taps = tuple(self.pred_taps)
        self.prior_scales = tuple(self.prior_scales)
        self.aspect_ratios = tuple(tuple(a) for a in self.aspect_ratios)
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels needs 5 entries (conv1, conv2, conv3a, conv4a, conv5a)")
        if not (len(self.pred_taps) == len(self.prior_scales) == len(self.aspect_ratios)):
            raise ValueError("pred_taps, prior_scales and aspect_ratios must have equal length")
        if any(len(a) < 1 for a in self.aspect_ratios):
            raise ValueError("every prediction tap needs at least one aspect ratio")
        if self.input_size % 16:
            raise ValueError("input_size must be a multiple of 16")

    def tap_sizes(self):
        s = self.input_size
        s7 = (s // 16 + 2 - 3) // 2 + 1
        return {"conv3a": (s // 4, s // 4), "conv4a": (s // 8, s // 8), "conv5a": (s // 16, s // 16),
                "fc6a": (s // 16, s // 16), "conv7a": (s7, s7)}

    def tap_channels(self):
        c = self.stage_channels
        return {"conv3a": c[2], "conv4a": c[3], "conv5a": c[4], "fc6a": self.fc6_channels,
                "conv7a": self.extra_channels}

    def shapes_per_cell(self):
        return [len(a) + 1 for a in self.aspect_ratios]

    def num_priors(self):
        sizes = self.tap_sizes()
        return sum(sizes[t][0] * sizes[t][1] * a for t, a in zip(self.pred_taps, self.shapes_per_cell()))


@dataclass
class Detection:
    category: int
    score: float
    box: tuple  # normalised corner form


class Backbone:
    def __init__(self, cfg, rng, dtype=DTYPE):
        c = cfg.stage_channels

        def conv(name, cin, cout, **kw):
            return Conv2d(Conv2dSpec(cin, cout, 3, kw.get("stride", 1), kw.get("pad", 1),
                                     kw.get("dilation", 1)), f"backbone.{name}", rng=rng, dtype=dtype)

        d = cfg.fc6_dilation
        # (layer, tap name recorded after it)
        self.seq = [
            (conv("conv1", 3, c[0]), None), (ReLU(), None), (MaxPool2(), None),
            (conv("conv2", c[0], c[1]), None), (ReLU(), None), (MaxPool2(), None),
            (conv("conv3a", c[1], c[2]), None), (ReLU(), "conv3a"), (MaxPool2(), None),
            (conv("conv4a", c[2], c[3]), None), (ReLU(), "conv4a"), (MaxPool2(), None),
            (conv("conv5a", c[3], c[4]), None), (ReLU(), "conv5a"),
            (conv("fc6a", c[4], cfg.fc6_channels, pad=d, dilation=d), None), (ReLU(), "fc6a"),
            (conv("conv7a", cfg.fc6_channels, cfg.extra_channels, stride=2, pad=1), None), (ReLU(), "conv7a"),
        ]
        self.seq[0][0].need_input_grad = False

    def convs(self):
        return [l for l, _ in self.seq if isinstance(l, Conv2d)]

    def params(self):
        return [p for l in self.convs() for p in l.params()]

    def forward(self, x, upto=None):
        taps = {}
        self._depth = len(self.seq)
        for i, (layer, tap) in enumerate(self.seq):
            x = layer.forward(x)
            if tap:
                taps[tap] = x
                if tap == upto:
                    self._depth = i + 1
                    break
        return taps

    def backward(self, tap_grads, need_input_grad=False):
        self.seq[0][0].need_input_grad = need_input_grad
        g = None
        for layer, tap in reversed(self.seq[:self._depth]):
            if tap and tap in tap_grads:
                g = tap_grads[tap] if g is None else g + tap_grads[tap]
            if g is not None:
                g = layer.backward(g)
        self.seq[0][0].need_input_grad = False
        return g


class SSD:
    """Backbone + optional fusion + per-tap 3x3 prediction heads."""

    def __init__(self, cfg, seed=0, dtype=DTYPE):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg, rng, dtype)
        sizes, channels = cfg.tap_sizes(), cfg.tap_channels()
        fcfg = cfg.fusion
        self.fusion = FusionModule(fcfg, channels, sizes, rng=rng, dtype=dtype) if fcfg.mode != "none" else None
        k = 4 + cfg.num_categories + 1
        self.heads = []
        for tap, shapes in zip(cfg.pred_taps, cfg.shapes_per_cell()):
            src, cin = self._source(tap)
            self.heads.append((tap, src, Conv2d(Conv2dSpec(cin, shapes * k, 3, 1, 1), f"head.{src}",
                                                rng=rng, dtype=dtype)))
        self.priors = generate_priors([sizes[t] for t in cfg.pred_taps], cfg.prior_scales,
                                      cfg.aspect_ratios, cfg.max_scale)

    def _source(self, tap):
        if self.fusion is not None and tap == self.cfg.fusion.target:
            return "fusion", self.fusion.out_channels
        return tap, self.cfg.tap_channels()[tap]

    def params(self):
        ps = self.backbone.params()
        if self.fusion is not None:
            ps += self.fusion.params()
        for _, _, head in self.heads:
            ps += head.params()
        return ps

    def named_params(self):
        return {p.name: p for p in self.params()}

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        self.dtype = dtype
        return self

    def features(self, images):
        check_tensor(images, "images")
        s = self.cfg.input_size
        if images.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images of shape (n, 3, {s}, {s}), got {images.shape}")
        taps = self.backbone.forward(images.astype(self.dtype, copy=False) - PIXEL_MEAN)
        if self.fusion is not None:
            taps["fusion"] = self.fusion.forward(*[taps[t] for t in self.cfg.fusion.taps])
        return taps

    def forward(self, images):
        """Returns ``(conf_logits (n, P, K+1), loc (n, P, 4))`` in prior order."""
        taps = self.features(images)
        n = images.shape[0]
        outs = []
        self._head_shapes = []
        for _, src, head in self.heads:
            y = head.forward(taps[src])
            _, ch, h, w = y.shape
            a = ch // (4 + self.cfg.num_categories + 1)
            self._head_shapes.append((a, h, w))
            outs.append(y.reshape(n, a, -1, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, -1))
        out = np.concatenate(outs, axis=1)
        return out[..., 4:], out[..., :4]

    def backward(self, d_conf, d_loc, need_input_grad=False):
        n = d_conf.shape[0]
        d_out = np.concatenate([d_loc, d_conf], axis=-1).astype(self.dtype, copy=False)
        src_grads = {}
        start = 0
        for (_, src, head), (a, h, w) in zip(self.heads, self._head_shapes):
            g = d_out[:, start:start + h * w * a]
            start += h * w * a
            g = np.ascontiguousarray(g.reshape(n, h, w, a, -1).transpose(0, 3, 4, 1, 2).reshape(n, -1, h, w))
            gx = head.backward(g)
            src_grads[src] = src_grads[src] + gx if src in src_grads else gx
        if self.fusion is not None and "fusion" in src_grads:
            for tap, gx in zip(self.cfg.fusion.taps, self.fusion.backward(src_grads.pop("fusion"))):
                src_grads[tap] = src_grads[tap] + gx if tap in src_grads else gx
        return self.backbone.backward(src_grads, need_input_grad)

    def detect(self, images, score_threshold=0.01, nms_threshold=0.45, top_k=200):
        """Per-image lists of :class:`Detection`, highest score first."""
        conf, loc = self.forward(images)
        probs = np.exp(log_softmax(conf.astype(np.float64)))
        results = []
        for i in range(images.shape[0]):
            boxes = np.clip(center_to_corner(decode_box(loc[i].astype(np.float64), self.priors)), 0.0, 1.0)
            dets = []
            for c in range(1, probs.shape[-1]):
                idx = np.flatnonzero(probs[i, :, c] > score_threshold)
                if idx.size == 0:
                    continue
                for j in nms(boxes[idx], probs[i, idx, c], nms_threshold, top_k):
                    dets.append(Detection(c - 1, float(probs[i, idx[j], c]), tuple(boxes[idx[j]])))
            dets.sort(key=lambda d: -d.score)
            results.append(dets[:top_k])
        return results


def detect_forward(image, model, **kw):
    if image.ndim == 3:
        image = image[None]
    return model.detect(image, **kw)[0]


def model_layers(cfg):
    """Closed-form cost of every weighted layer of the detector."""
    sizes, ch = cfg.tap_sizes(), cfg.tap_channels()
    s = cfg.input_size
    c = cfg.stage_channels
    out = [
        conv_cost("backbone.conv1", 3, c[0], 3, s, s),
        conv_cost("backbone.conv2", c[0], c[1], 3, s // 2, s // 2),
        conv_cost("backbone.conv3a", c[1], c[2], 3, *sizes["conv3a"]),
        conv_cost("backbone.conv4a", c[2], c[3], 3, *sizes["conv4a"]),
        conv_cost("backbone.conv5a", c[3], c[4], 3, *sizes["conv5a"]),
        conv_cost("backbone.fc6a", c[4], cfg.fc6_channels, 3, *sizes["fc6a"]),
        conv_cost("backbone.conv7a", cfg.fc6_channels, cfg.extra_channels, 3, *sizes["conv7a"]),
    ]
    shapes = {t: (ch[t],) + sizes[t] for t in TAPS}
    out += fusion_layers(cfg.fusion, shapes)
    k = 4 + cfg.num_categories + 1
    fused = cfg.fusion.mode != "none"
    for tap, a in zip(cfg.pred_taps, cfg.shapes_per_cell()):
        if fused and tap == cfg.fusion.target:
            out.append(conv_cost("head.fusion", cfg.fusion.out_channels, a * k, 3, *sizes[tap]))
        else:
            out.append(conv_cost(f"head.{tap}", ch[tap], a * k, 3, *sizes[tap]))
    return out


def model_cost(cfg):
    layers = model_layers(cfg)
    return sum(l.params for l in layers), sum(l.mult_adds for l in layers)
