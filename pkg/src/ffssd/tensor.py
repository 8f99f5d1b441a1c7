"""Dense NCHW tensors, parameters and the finite-difference gradient oracle.

Tensors are plain 4-D numpy arrays in C (row-major) order. Element
``(i, j, y, x)`` of an ``(n, c, h, w)`` tensor sits at flat index
``((i*c + j)*h + y)*w + x``. float32 is the working precision; float64 is
used only for gradient verification.
"""
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    pass


def check_tensor(x, name="tensor"):
    """Validate that ``x`` is a contiguous 4-D array with positive dims."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def tensor(data, dtype=DTYPE):
    """Build a tensor from nested data, promoting lower ranks to NCHW."""
    x = np.array(data, dtype=dtype)
    while x.ndim < 4:
        x = x[None]
    return check_tensor(np.ascontiguousarray(x))


def flat_index(shape, i, j, y, x):
    n, c, h, w = shape
    return ((i * c + j) * h + y) * w + x


@dataclass
class Param:
    """A named learnable tensor with an accumulating gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)


def concat_channels(a, b):
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad, split):
    """Split an upstream gradient at channel ``split``."""
    return grad[:, :split], grad[:, split:]


def eltwise_sum(a, b):
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"element-wise sum needs equal shapes, got {a.shape} and {b.shape}")
    return a + b


def eltwise_sum_backward(grad):
    return grad, grad


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored, so it should be float64.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    """max over elements of |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
