"""Effective receptive field probing by gradient back-projection.

A unit gradient is placed on one spatial position of a tap (summed over its
channels) and propagated back to the input image; the absolute input
gradient, summed over colour channels and max-normalised, is the heatmap.
The effective area is the number of pixels above ``threshold * max``.
"""
import numpy as np

from .layers import Conv2d, MaxPool2
from .model import PIXEL_MEAN

THRESHOLD = 0.05


def probe_image(split=None, size=96, limit=64):
    """Mid-grey plus the mean texture of (up to ``limit`` images of) a split."""
    if split is None or len(split) == 0:
        return np.full((1, 3, size, size), PIXEL_MEAN, dtype=np.float32)
    ids = split.image_ids[:limit]
    mean = np.mean([split.image(i)[0] for i in ids], axis=0)
    return mean[None].astype(np.float32)


def erf_probe(model, tap, position, image=None, threshold=THRESHOLD):
    """Returns ``(heatmap (1, 1, H, W), area)`` for ``tap`` at ``(y, x)``."""
    sizes = model.cfg.tap_sizes()
    if tap not in sizes:
        raise KeyError(f"unknown tap {tap!r}; choose from {sorted(sizes)}")
    y, x = position
    th, tw = sizes[tap]
    if not (0 <= y < th and 0 <= x < tw):
        raise IndexError(f"position {position} outside the {th}x{tw} {tap} map")
    s = model.cfg.input_size
    if image is None:
        image = np.full((1, 3, s, s), PIXEL_MEAN, dtype=np.float32)
    feats = model.backbone.forward(image.astype(model.dtype) - PIXEL_MEAN, upto=tap)
    g = np.zeros_like(feats[tap])
    g[0, :, y, x] = 1.0
    grad = model.backbone.backward({tap: g}, need_input_grad=True)
    heat = np.abs(grad[0]).sum(axis=0).astype(np.float64)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    area = int((heat > threshold).sum()) if peak > 0 else 0
    return heat[None, None], area


def theoretical_field(model, tap, position):
    """Closed-form input window ``(y0, y1, x0, x1)`` (half-open, clipped) of a tap position."""
    start, jump, size = 0.0, 1, 1
    for layer, name in model.backbone.seq:
        if isinstance(layer, Conv2d):
            k, st, p, d = layer.spec.kernel[0], layer.spec.stride[0], layer.spec.pad[0], layer.spec.dilation[0]
            span = d * (k - 1) + 1
            start -= p * jump
            size += (span - 1) * jump
            jump *= st
        elif isinstance(layer, MaxPool2):
            size += jump
            jump *= 2
        if name == tap:
            break
    s = model.cfg.input_size
    y, x = position
    y0 = int(start + y * jump)
    x0 = int(start + x * jump)
    return max(0, y0), min(s, y0 + size), max(0, x0), min(s, x0 + size)
