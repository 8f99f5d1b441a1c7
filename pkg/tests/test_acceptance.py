"""Acceptance criteria 1-10, one test each, each recording a PASS/FAIL line.

Criteria 6, 7 and 9 share one experiment workspace (datasets plus trained
checkpoints). By default it lives in a fresh temporary directory, so the
full recipe runs; point ``FFSD_ACCEPTANCE_DIR`` at a directory to keep the
checkpoints and reuse them on the next run (training is bit-reproducible,
so a cached checkpoint is the one a rerun would produce).
"""
import os
import statistics
import time

import numpy as np
import pytest

from ffssd.boxes import center_to_corner, corner_to_center, decode_box, encode_box, match_priors, nms
from ffssd.checkpoint import decode_checkpoint, encode_checkpoint, load_model, model_tensors
from ffssd.cli import main
from ffssd.config import RunConfig, parse, render
from ffssd.evaluate import category_ap
from ffssd.experiments import (Workspace, bench_suite, direction_of_effect, erf_areas, kernel_robustness,
                               seed_sweep)
from ffssd.fusion import FusionConfig, FusionModule, fusion_cost
from ffssd.gradcheck import gradient_suite
from ffssd.layers import Deconv2d, Deconv2dSpec
from ffssd.model import SSD, ModelConfig, model_cost

from oracles import ap_exhaustive, bilinear_upsample2, nms_recursive
from test_evaluate import _random_instance

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = os.environ.get("FFSD_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance")
    return Workspace(root)


@pytest.fixture(scope="module")
def sweep(workspace):
    t0 = time.perf_counter()
    results = seed_sweep(workspace)
    return results, time.perf_counter() - t0


def test_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    results = gradient_suite(trials=20, seed=2024)
    elapsed = time.perf_counter() - t0
    worst = {k: max(r.error for r in v) for k, v in results.items()}
    ok = all(len(v) >= 20 and all(r.ok for r in v) for v in results.values())
    detail = ", ".join(f"{k} {e:.1e}" for k, e in worst.items())
    assert acceptance(1, ok and elapsed < 120, f"max rel error per kind ({detail}) in {elapsed:.0f}s")


def test_2_bilinear_exactness(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c, h, w = (int(v) for v in rng.integers(1, 9, size=3))
        x = rng.standard_normal((int(rng.integers(1, 3)), c, h, w))
        layer = Deconv2d(Deconv2dSpec(c, c, 4, 2, 1), "up", dtype=np.float64)
        worst = max(worst, float(np.max(np.abs(layer.forward(x) - bilinear_upsample2(x)))))
    assert acceptance(2, worst < 1e-6, f"max |deconv - bilinear| = {worst:.1e} over 100 inputs")


def test_3_norm_contract(acceptance):
    cfg = ModelConfig()
    rng = np.random.default_rng(3)
    worst = {}
    for mode in ("concat", "eltsum"):
        fcfg = FusionConfig(mode=mode, branch_kernels=128)
        module = FusionModule(fcfg, cfg.tap_channels(), cfg.tap_sizes(), rng=rng)
        # post-ReLU backbone activations are non-negative
        f4 = rng.random((4, 64, 12, 12)).astype(np.float32)
        f5 = rng.random((4, 64, 6, 6)).astype(np.float32)
        module.forward(f4, f5)
        for branch, out, target in zip(module.branches, module.branch_outputs, (10.0, 20.0)):
            norms = np.sqrt((out.astype(np.float64) ** 2).sum(axis=1))
            worst[f"{mode}.{branch.tap}"] = float(np.max(np.abs(norms / target - 1)))
    ok = all(v < 1e-5 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert acceptance(3, ok, f"max relative deviation from 10 (shallow) / 20 (deep): {detail}")


def test_4_oracle_equivalence(acceptance):
    rng = np.random.default_rng(4)
    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        xy = rng.random((n, 2)) * 0.8
        boxes = np.concatenate([xy, xy + 0.05 + rng.random((n, 2)) * 0.3], axis=1)
        scores = rng.random(n).round(2)
        nms_bad += nms(boxes, scores, 0.45, 200) != nms_recursive(boxes, scores, 0.45, 200)
    ap_bad = 0
    for _ in range(500):
        dets, gts, _ = _random_instance(rng)
        got = category_ap([("i", s, b) for s, b in dets], {"i": (np.array(gts), np.zeros(len(gts), bool))})
        ap_bad += got != ap_exhaustive(dets, gts)
    assert acceptance(4, nms_bad == 0 and ap_bad == 0,
                      f"NMS mismatches {nms_bad}/1000, AP mismatches {ap_bad}/500")


def test_5_round_trip_and_matching(acceptance):
    rng = np.random.default_rng(5)
    xy = rng.random((10_000, 2)) * 0.9
    gt = corner_to_center(np.concatenate([xy, xy + 0.02 + rng.random((10_000, 2)) * (0.98 - xy)], axis=1))
    xy = rng.random((10_000, 2)) * 0.9
    pr = corner_to_center(np.concatenate([xy, xy + 0.02 + rng.random((10_000, 2)) * (0.98 - xy)], axis=1))
    err = float(np.max(np.abs(decode_box(encode_box(gt, pr), pr) - gt)))
    priors = SSD(ModelConfig()).priors
    unmatched = 0
    for _ in range(1000):
        g = int(rng.integers(1, 6))
        boxes = center_to_corner(gt[rng.integers(0, 10_000, size=g)])
        _, _, owner = match_priors(boxes, [0] * g, priors)
        unmatched += len(set(range(g)) - set(owner.tolist()))
    assert acceptance(5, err < 1e-6 and unmatched == 0,
                      f"round-trip error {err:.1e} on 10^4 pairs; gts without a prior: {unmatched}")


def test_6_direction_of_effect(acceptance, sweep):
    results, elapsed = sweep
    verdicts, med = direction_of_effect(results)
    train_seconds = sum(r.seconds for rs in results.values() for r in rs)
    base = med["baseline"]
    parts = [f"baseline mAP {base[0]:.4f} small {base[1]:.4f}"]
    parts += [f"{k} mAP {m:.4f} small {s:.4f}" for k, (m, s) in med.items() if k != "baseline"]
    for label, rs in results.items():
        print(label, [(r.seed, round(r.mAP, 4), round(r.mAP_small, 4)) for r in rs])
    ok = all(verdicts.values()) and len(verdicts) == 2 and train_seconds < 45 * 60
    assert acceptance(6, ok, "medians over 5 seeds: " + "; ".join(parts)
                      + f"; training time {train_seconds / 60:.1f} min")


def test_7_kernel_robustness(acceptance, sweep, workspace):
    runs = kernel_robustness(workspace, seed=0, kernels=(128, 384))
    gap = abs(runs[128].mAP - runs[384].mAP)
    assert acceptance(7, gap <= 0.03, f"concat@128 mAP {runs[128].mAP:.4f} vs concat@384 {runs[384].mAP:.4f} "
                                      f"(gap {gap:.4f})")


def test_8_cost_ordering(acceptance):
    configs = {"none": ModelConfig(),
               "eltsum@384": ModelConfig(fusion=FusionConfig(mode="eltsum", branch_kernels=384)),
               "concat@512": ModelConfig(fusion=FusionConfig(mode="concat", branch_kernels=512))}
    macs = {k: model_cost(c)[1] for k, c in configs.items()}
    rates, _ = bench_suite(configs, runs=5, n_images=20, warmup=3)
    med = {k: statistics.median(v) for k, v in rates.items()}
    closed_form = macs["none"] < macs["eltsum@384"] < macs["concat@512"]
    measured = med["none"] >= 0.95 * med["eltsum@384"] and med["eltsum@384"] >= 0.95 * med["concat@512"]
    detail = ", ".join(f"{k}: {macs[k] / 1e6:.1f}M mult-adds, {med[k]:.1f} img/s" for k in configs)
    assert acceptance(8, closed_form and measured, detail)


def test_9_erf_ordering(acceptance, sweep, workspace):
    results, _ = sweep
    base = results["baseline"][0]
    model = SSD(ModelConfig(), seed=base.seed)
    load_model(base.checkpoint, model)
    areas = erf_areas(model, workspace.split("train"))
    ok = areas["conv3a"] <= areas["conv4a"] <= areas["conv5a"] <= areas["fc6a"]
    assert acceptance(9, ok, "ERF areas at centre: " + ", ".join(f"{k} {v}" for k, v in areas.items()))


def test_10_reproducibility(acceptance, tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "0", "--count", "40"]) == 0
    data_same = all((tmp_path / "a" / p.relative_to(tmp_path / "b")).read_bytes() == p.read_bytes()
                    for p in (tmp_path / "b").rglob("*") if p.is_file())
    for name in ("a", "b"):
        assert main(["train", "--data", str(tmp_path / "a"), "--out", str(tmp_path / f"{name}.ckpt"),
                     "--seed", "7", "--iterations", "20"]) == 0
    ckpt_same = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    capsys.readouterr()
    model = SSD(ModelConfig(fusion=FusionConfig(mode="concat", branch_kernels=32)), seed=3)
    blob = encode_checkpoint(model_tensors(model))
    ckpt_round = encode_checkpoint(decode_checkpoint(blob)) == blob
    cfg = RunConfig(model=ModelConfig(fusion=FusionConfig(mode="eltsum", branch_kernels=128)))
    cfg_round = parse(render(cfg)) == cfg and render(parse(render(cfg))) == render(cfg)
    ok = data_same and ckpt_same and ckpt_round and cfg_round
    assert acceptance(10, ok, f"gen-data identical {data_same}, train identical {ckpt_same}, "
                              f"checkpoint round trip {ckpt_round}, config round trip {cfg_round}")


def test_cost_census_agrees_with_fusion_cost():
    cfg = ModelConfig(fusion=FusionConfig(mode="eltsum", branch_kernels=384))
    shapes = {t: (cfg.tap_channels()[t],) + cfg.tap_sizes()[t] for t in cfg.tap_sizes()}
    assert fusion_cost(cfg.fusion, shapes)[1] < model_cost(cfg)[1]
