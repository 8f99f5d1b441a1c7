"""Finite-difference verification of hand-written backward passes.

Each check projects the layer output onto a fixed random tensor ``r`` so
the scalar ``sum(forward(x) * r)`` has gradient ``backward(r)``.
"""
from dataclasses import dataclass

import numpy as np

from .fusion import FusionConfig, FusionModule
from .layers import Conv2d, Conv2dSpec, Deconv2d, Deconv2dSpec, L2Norm, L2NormSpec, MaxPool2, ReLU
from .tensor import CHECK_DTYPE, finite_diff_grad, rel_error

EPS = 1e-5
TOLERANCE = 1e-6


@dataclass
class GradCheck:
    label: str
    error: float

    @property
    def ok(self):
        return self.error < TOLERANCE


def check_layer(layer, inputs, rng, eps=EPS):
    """Max relative error over input and parameter gradients.

    ``layer`` exposes ``forward(*inputs)``, ``backward(grad)`` and
    ``params()``; for several inputs ``backward`` returns a list.
    """
    inputs = [np.asarray(x, dtype=CHECK_DTYPE) for x in inputs]
    out = layer.forward(*inputs)
    r = rng.standard_normal(out.shape)

    def f(_):
        return float(np.sum(layer.forward(*inputs) * r))

    for p in layer.params():
        p.zero_grad()
    layer.forward(*inputs)
    grads = layer.backward(r)
    if len(inputs) == 1 and not isinstance(grads, list):
        grads = [grads]
    analytic = [(g, x) for g, x in zip(grads, inputs)] + [(p.grad.copy(), p.value) for p in layer.params()]
    return max(rel_error(g, finite_diff_grad(f, x, eps)) for g, x in analytic)


class _Single:
    """Adapter giving plain layers the multi-input interface."""

    def __init__(self, layer):
        self.layer = layer

    def forward(self, x):
        return self.layer.forward(x)

    def backward(self, g):
        return self.layer.backward(g)

    def params(self):
        return self.layer.params()


def random_case(kind, rng):
    """A ``(layer, inputs)`` pair of the given kind with a random small shape."""
    n = int(rng.integers(1, 3))
    if kind == "conv":
        c, o = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 2, 3]))
        stride, pad, dil = int(rng.integers(1, 3)), int(rng.integers(0, 2)), int(rng.integers(1, 3))
        h, w = rng.integers(dil * (k - 1) + 1, 7, size=2)
        spec = Conv2dSpec(int(c), int(o), k, stride, pad, dil)
        layer = Conv2d(spec, "conv", rng=rng, dtype=CHECK_DTYPE)
        layer.bias.value[:] = rng.standard_normal(int(o))
        return _Single(layer), [rng.standard_normal((n, int(c), int(h), int(w)))]
    if kind == "deconv":
        c, o = rng.integers(1, 4, size=2)
        spec = Deconv2dSpec(int(c), int(o))
        layer = Deconv2d(spec, "deconv", dtype=CHECK_DTYPE, bilinear=False, rng=rng)
        h, w = rng.integers(1, 5, size=2)
        return _Single(layer), [rng.standard_normal((n, int(c), int(h), int(w)))]
    if kind == "l2norm":
        c = int(rng.integers(1, 6))
        layer = L2Norm(L2NormSpec(c, scale=float(rng.uniform(1, 20))), "norm", dtype=CHECK_DTYPE)
        layer.scale.value[:] = rng.uniform(0.5, 20, size=c)
        h, w = rng.integers(1, 5, size=2)
        return _Single(layer), [rng.standard_normal((n, c, int(h), int(w)))]
    if kind == "relu":
        h, w = rng.integers(1, 6, size=2)
        x = rng.standard_normal((n, int(rng.integers(1, 4)), int(h), int(w)))
        # keep inputs away from the kink so central differences are exact
        x = np.where(np.abs(x) < 1e-3, 0.1, x)
        return _Single(ReLU()), [x]
    if kind == "maxpool":
        h, w = 2 * rng.integers(1, 4, size=2)
        # distinct values: a permutation keeps every window free of near-ties
        size = n * 2 * int(h) * int(w)
        x = rng.permutation(size).reshape(n, 2, int(h), int(w)) * 0.01
        return _Single(MaxPool2()), [x]
    if kind in ("concat", "eltsum"):
        cs, cd = (int(v) for v in rng.integers(1, 4, size=2))
        h, w = (int(v) for v in rng.integers(1, 4, size=2))
        k = int(rng.integers(2, 5))
        cfg = FusionConfig(mode=kind, branch_kernels=k, reduce_kernels=int(rng.integers(2, 5)),
                           taps=("shallow", "deep"), target="shallow")
        module = FusionModule(cfg, {"shallow": cs, "deep": cd}, {"shallow": (2 * h, 2 * w), "deep": (h, w)},
                              rng=rng, dtype=CHECK_DTYPE)
        # positive biases keep branch activations (and so the L2 norms) away
        # from zero, where central differences lose accuracy
        for p in module.params():
            if p.name.endswith("bias"):
                p.value[:] = rng.uniform(1.0, 2.0, size=p.shape)
        return module, [rng.standard_normal((n, cs, 2 * h, 2 * w)), rng.standard_normal((n, cd, h, w))]
    raise ValueError(f"unknown layer kind {kind!r}")


KINDS = ("conv", "deconv", "l2norm", "relu", "maxpool", "concat", "eltsum")


def gradient_suite(trials=20, seed=0, kinds=KINDS):
    """Runs ``trials`` random shapes per kind; returns ``{kind: [GradCheck]}``."""
    rng = np.random.default_rng(seed)
    out = {}
    for kind in kinds:
        results = []
        for t in range(trials):
            layer, inputs = random_case(kind, rng)
            shape = "x".join(str(d) for d in inputs[0].shape)
            results.append(GradCheck(f"{kind}[{t}] {shape}", check_layer(layer, inputs, rng)))
        out[kind] = results
    return out
