"""The desk-scale experiment recipe: baseline training, fused fine-tunes, seed sweeps.

Every run is a pure function of its configuration and training seed, so a
run directory doubles as a cache: a checkpoint whose file name encodes the
full configuration digest is reloaded rather than retrained.
"""
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bench import bench
from .checkpoint import load_model, save_model
from .config import RunConfig, render
from .erf import erf_probe, probe_image
from .evaluate import evaluate_model
from .fusion import FusionConfig
from .model import SSD, ModelConfig
from .synth import SceneSpec, atomic_write_text, gen_split, load_split
from .train import TrainConfig, prepare, train

log = logging.getLogger(__name__)


@dataclass
class Protocol:
    """Dataset sizes and iteration budgets of the acceptance recipe."""

    train_count: int = 500
    test_count: int = 100
    train_data_seed: int = 0
    test_data_seed: int = 1_000_000
    seeds: tuple = (0, 1, 2, 3, 4)
    base_iterations: int = 1500
    base_milestones: tuple = ((0, 1e-2), (1125, 1e-3))
    tune_iterations: int = 600
    tune_milestones: tuple = ((0, 1e-3), (450, 1e-4))
    variants: tuple = (("concat", 128), ("eltsum", 128))
    data: SceneSpec = field(default_factory=SceneSpec)

    def baseline_config(self, seed):
        return RunConfig(model=ModelConfig(),
                         train=TrainConfig(iterations=self.base_iterations, milestones=self.base_milestones,
                                           seed=seed),
                         data=self.data)

    def fused_config(self, seed, mode, kernels, base_ckpt):
        return RunConfig(model=ModelConfig(fusion=FusionConfig(mode=mode, branch_kernels=kernels)),
                         train=TrainConfig(iterations=self.tune_iterations, milestones=self.tune_milestones,
                                           seed=seed, fine_tune_from=str(base_ckpt)),
                         data=self.data)


@dataclass
class RunResult:
    label: str
    seed: int
    mAP: float
    mAP_small: float
    seconds: float
    checkpoint: str


def _digest(cfg):
    # the fine-tune source enters through its own digest, not its path
    text = render(replace(cfg, train=replace(cfg.train, fine_tune_from=Path(cfg.train.fine_tune_from).name)))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


class Workspace:
    """Dataset splits and a checkpoint cache under one directory."""

    def __init__(self, root, protocol=None):
        self.root = Path(root)
        self.protocol = protocol or Protocol()
        self.root.mkdir(parents=True, exist_ok=True)
        self._samples = {}

    def split(self, name):
        p = self.protocol
        seed, count = {"train": (p.train_data_seed, p.train_count), "test": (p.test_data_seed, p.test_count)}[name]
        path = self.root / f"{name}-{seed}-{count}"
        if not (path / "manifest.txt").exists():
            gen_split(seed, p.data, count, path)
        return load_split(path)

    def samples(self, model):
        key = len(model.priors)
        if key not in self._samples:
            self._samples[key] = prepare(self.split("train"), model.priors, model.cfg.input_size)
        return self._samples[key]

    def run(self, label, cfg):
        """Train (or reload) ``cfg`` and evaluate it on the test split."""
        ckpt = self.root / f"{label}-s{cfg.train.seed}-{_digest(cfg)}.ckpt"
        meta = ckpt.with_suffix(".json")
        model = SSD(cfg.model, seed=cfg.train.seed)
        if ckpt.exists() and meta.exists():
            load_model(ckpt, model)
            seconds = json.loads(meta.read_text())["seconds"]
        else:
            t0 = time.perf_counter()
            model, _ = train(cfg.model, cfg.train, self.samples(model), model=model)
            seconds = time.perf_counter() - t0
            save_model(ckpt, model)
            atomic_write_text(meta, json.dumps({"seconds": seconds, "config": render(cfg)}))
        report = evaluate_model(model, self.split("test"))
        result = RunResult(label, cfg.train.seed, report.mAP, report.mAP_small, seconds, str(ckpt))
        log.info("%s seed %d: mAP %.4f mAP_small %.4f (%.0fs)", label, result.seed, result.mAP,
                 result.mAP_small, seconds)
        return result, model


def variant_label(mode, kernels):
    return f"{mode}@{kernels}"


def seed_sweep(ws, seeds=None, variants=None):
    """Baseline plus fine-tuned fused variants for every seed.

    Returns ``{label: [RunResult per seed]}`` with label ``baseline`` for the
    unfused model.
    """
    p = ws.protocol
    seeds = p.seeds if seeds is None else seeds
    variants = p.variants if variants is None else variants
    out = {"baseline": []}
    for seed in seeds:
        base, _ = ws.run("baseline", p.baseline_config(seed))
        out["baseline"].append(base)
        for mode, k in variants:
            res, _ = ws.run(variant_label(mode, k), p.fused_config(seed, mode, k, base.checkpoint))
            out.setdefault(variant_label(mode, k), []).append(res)
    return out


def medians(results):
    return {label: (statistics.median(r.mAP for r in rs), statistics.median(r.mAP_small for r in rs))
            for label, rs in results.items()}


def direction_of_effect(results, tolerance=0.01):
    """Each fused median mAP_small beats the baseline's; median mAP within ``tolerance``."""
    med = medians(results)
    base_map, base_small = med["baseline"]
    verdicts = {}
    for label, (m, s) in med.items():
        if label != "baseline":
            verdicts[label] = s > base_small and m >= base_map - tolerance
    return verdicts, med


def kernel_robustness(ws, seed=0, kernels=(128, 384), mode="concat"):
    """mAP per branch kernel count for one seed (fine-tuned from that seed's baseline)."""
    p = ws.protocol
    base, _ = ws.run("baseline", p.baseline_config(seed))
    return {k: ws.run(variant_label(mode, k), p.fused_config(seed, mode, k, base.checkpoint))[0] for k in kernels}


def bench_suite(configs, runs=5, n_images=20, warmup=3):
    """``{label: [images/sec per run]}`` plus closed-form costs, interleaving runs across configs."""
    rates = {label: [] for label in configs}
    costs = {}
    models = {label: SSD(cfg) for label, cfg in configs.items()}
    for _ in range(runs):
        for label, cfg in configs.items():
            r = bench(cfg, n_images, warmup, model=models[label])
            rates[label].append(r.images_per_sec)
            costs[label] = (r.param_count, r.mult_adds)
    return rates, costs


def erf_areas(model, split=None, taps=("conv3a", "conv4a", "conv5a", "fc6a")):
    """Effective receptive field area of each tap at its centre position."""
    image = probe_image(split, model.cfg.input_size)
    sizes = model.cfg.tap_sizes()
    return {t: erf_probe(model, t, (sizes[t][0] // 2, sizes[t][1] // 2), image=image)[1] for t in taps}
