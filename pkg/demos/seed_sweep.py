"""Five-seed comparison of the baseline against both fusion variants.

Usage: python3 demos/seed_sweep.py [WORKDIR]

Checkpoints are cached in WORKDIR, so an interrupted sweep resumes where it
stopped. A full sweep is roughly 20 minutes on one core.
"""
import logging
import sys

from ffssd.experiments import Workspace, direction_of_effect, kernel_robustness, seed_sweep


def main(root):
    ws = Workspace(root)
    results = seed_sweep(ws)
    verdicts, med = direction_of_effect(results)
    print(f"{'model':12s} {'mAP':>7s} {'small':>7s}   per-seed mAP_small")
    for label, rs in results.items():
        m, s = med[label]
        seeds = " ".join(f"{r.mAP_small:.3f}" for r in rs)
        mark = "" if label == "baseline" else ("  better" if verdicts[label] else "  not better")
        print(f"{label:12s} {m:7.4f} {s:7.4f}   {seeds}{mark}")
    runs = kernel_robustness(ws)
    print("concat kernel counts (seed 0):", ", ".join(f"{k}: {r.mAP:.4f}" for k, r in runs.items()))


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    main(sys.argv[1] if len(sys.argv) > 1 else "sweep")
