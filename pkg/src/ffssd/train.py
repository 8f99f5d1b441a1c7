"""SGD training with a step learning-rate schedule and baseline fine-tuning."""
import logging
from dataclasses import dataclass

import numpy as np

from .boxes import match_priors
from .checkpoint import read_checkpoint
from .loss import multibox_loss
from .model import SSD

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    iterations: int = 4000
    milestones: tuple = ((0, 1e-3), (3000, 1e-4), (3500, 1e-5))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    fine_tune_from: str = ""
    log_every: int = 50

    def __post_init__(self):
        self.milestones = tuple((int(i), float(r)) for i, r in self.milestones)
        its = [i for i, _ in self.milestones]
        rates = [r for _, r in self.milestones]
        if not self.milestones or its[0] != 0:
            raise ValueError("the first milestone must start at iteration 0")
        if any(b <= a for a, b in zip(its, its[1:])):
            raise ValueError("milestone iterations must strictly increase")
        if any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError("milestone rates must strictly decrease")


class TrainingDiverged(RuntimeError):
    pass


def lr_at(iteration, milestones):
    """Rate of the last milestone whose iteration is <= ``iteration``."""
    rate = milestones[0][1]
    for it, r in milestones:
        if it <= iteration:
            rate = r
        else:
            break
    return rate


def sgd_step(params, lr, momentum, weight_decay, velocity, iteration=None):
    """Momentum SGD with L2 decay; zeroes gradients afterwards.

    ``velocity`` maps parameter names to buffers and is updated in place.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in {p.name} at iteration {iteration}")
    for p in params:
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.value)
        v *= momentum
        v += p.grad + weight_decay * p.value
        p.value -= lr * v
        p.grad[...] = 0


@dataclass
class TrainSample:
    image: np.ndarray     # (3, H, W) float32
    labels: np.ndarray    # per-prior class, 0 = background
    offsets: np.ndarray   # per-prior encoded targets


def ground_truth(annotations, canvas):
    boxes = np.array([a.box for a in annotations], dtype=np.float64).reshape(-1, 4) / canvas
    labels = np.array([a.category for a in annotations], dtype=np.int64)
    return boxes, labels


def prepare(split, priors, canvas, threshold=0.5):
    """Load every image of a split and precompute its prior targets."""
    samples = []
    for _, image, anns in split:
        boxes, labels = ground_truth(anns, canvas)
        cls, off, _ = match_priors(boxes, labels, priors, threshold)
        samples.append(TrainSample(image[0], cls, off.astype(np.float32)))
    return samples


def load_matching(model, path):
    """Copy every checkpoint tensor whose name exists in ``model``.

    Returns ``(loaded, fresh)`` name lists. A name present in both with a
    different shape is an error.
    """
    tensors = read_checkpoint(path)
    params = model.named_params()
    loaded = []
    for name, value in tensors.items():
        if name not in params:
            continue
        p = params[name]
        if p.value.shape != value.shape:
            raise ValueError(f"{path}: {name} has shape {value.shape}, model expects {p.value.shape}")
        p.value[...] = value
        loaded.append(name)
    fresh = [n for n in params if n not in tensors]
    return loaded, fresh


def batches(n, batch_size, rng):
    """Endless epoch-shuffled index batches."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]
        if n < batch_size:
            yield order


def train(model_cfg, train_cfg, samples, model=None, on_log=None, on_load=None):
    """Train a detector; returns ``(model, loss_log)``.

    ``loss_log`` holds ``(iteration, loss)`` every ``log_every`` iterations,
    each value averaged over the preceding window. ``on_log(it, loss)`` sees
    each entry as it is produced and ``on_load(loaded, fresh)`` receives the
    parameter counts of a fine-tune load.
    """
    if not samples:
        raise ValueError("training set is empty")
    if model is None:
        model = SSD(model_cfg, seed=train_cfg.seed)
    if train_cfg.fine_tune_from:
        loaded, fresh = load_matching(model, train_cfg.fine_tune_from)
        log.info("fine-tune: loaded %d parameters, initialised %d new", len(loaded), len(fresh))
        model.fine_tune_counts = (len(loaded), len(fresh))
        if on_load is not None:
            on_load(*model.fine_tune_counts)
    params = model.params()
    velocity = {}
    rng = np.random.default_rng(train_cfg.seed + 7919)
    stream = batches(len(samples), train_cfg.batch_size, rng)
    loss_log = []
    window = []
    for it in range(train_cfg.iterations):
        idx = next(stream)
        images = np.stack([samples[i].image for i in idx])
        labels = np.stack([samples[i].labels for i in idx])
        offsets = np.stack([samples[i].offsets for i in idx])
        conf, loc = model.forward(images)
        stats, d_conf, d_loc = multibox_loss(conf, loc, labels, offsets)
        if not np.isfinite(stats.loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        model.backward(d_conf, d_loc)
        sgd_step(params, lr_at(it, train_cfg.milestones), train_cfg.momentum,
                 train_cfg.weight_decay, velocity, it)
        window.append(stats.loss)
        if (it + 1) % train_cfg.log_every == 0 or it + 1 == train_cfg.iterations:
            loss_log.append((it + 1, float(np.mean(window))))
            window = []
            if on_log is not None:
                on_log(*loss_log[-1])
    return model, loss_log
