"""Inference throughput and closed-form cost of a detector configuration."""
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .model import SSD, model_cost


@dataclass
class BenchResult:
    mode: str
    branch_kernels: int
    images_per_sec: float
    param_count: int
    mult_adds: int

    def format(self):
        return (f"mode={self.mode}\tkernels={self.branch_kernels}\timages/sec={self.images_per_sec:.2f}"
                f"\tparams={self.param_count}\tmult_adds={self.mult_adds}")


def throughput(model, n_images=20, warmup=3, seed=0):
    """Single-image forward rate (images/sec) measured after ``warmup`` runs.

    Only the network is timed. Box decoding and NMS are left out: with
    untrained weights nearly every prior clears the score threshold, and
    NMS over random boxes would swamp the architectural difference.
    """
    s = model.cfg.input_size
    images = np.random.default_rng(seed).random((n_images, 1, 3, s, s), dtype=np.float32)
    for i in range(warmup):
        model.forward(images[i % n_images])
    t0 = time.perf_counter()
    for img in images:
        model.forward(img)
    return n_images / (time.perf_counter() - t0)


def bench(model_cfg, n_images=20, warmup=3, repeats=1, model=None, seed=0):
    """Median throughput over ``repeats`` timed runs plus closed-form cost."""
    model = SSD(model_cfg, seed=seed) if model is None else model
    rates = [throughput(model, n_images, warmup, seed) for _ in range(repeats)]
    params, macs = model_cost(model_cfg)
    f = model_cfg.fusion
    return BenchResult(f.mode, f.kernels, statistics.median(rates), params, macs)
