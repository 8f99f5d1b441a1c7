"""Command-line entry point: ``ffssd gen-data | train | eval | detect | erf | bench``.

A trained checkpoint ``X`` is accompanied by ``X.cfg`` (the run configuration
that built the model) and ``X.loss`` (the ``iter<TAB>loss`` log).
"""
import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .bench import bench
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config, save_config
from .erf import erf_probe, probe_image
from .evaluate import evaluate, evaluate_model, format_detections, read_detections
from .model import SSD
from .synth import ManifestError, atomic_write_text, gen_split, load_split, read_ppm, write_pgm
from .train import TrainingDiverged, prepare, train

log = logging.getLogger("ffssd")


class UsageError(Exception):
    pass


def thread_limit():
    n = os.environ.get("FFSD_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def _config(path):
    return load_config(path) if path else RunConfig()


def _ckpt_config(ckpt, override=None):
    if override:
        return load_config(override)
    sidecar = Path(f"{ckpt}.cfg")
    if not sidecar.exists():
        raise UsageError(f"no configuration for {ckpt}: expected {sidecar} or --config")
    return load_config(sidecar)


def _load(ckpt, config=None):
    cfg = _ckpt_config(ckpt, config)
    return cfg, load_model(ckpt, SSD(cfg.model, seed=cfg.train.seed))


def _split(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"data directory not found: {path}")
    return load_split(path)


def cmd_gen_data(args):
    cfg = _config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory is not writable: {out}")
    anns = gen_split(args.seed, cfg.data, args.count, out)
    small = sum(a.size_class == "small" for a in anns)
    share = 100.0 * small / len(anns) if anns else 0.0
    print(f"images: {args.count}")
    print(f"objects: {len(anns)}")
    print(f"small objects: {share:.1f}%")


def cmd_train(args):
    cfg = _config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.fine_tune_from:
        if not Path(args.fine_tune_from).exists():
            raise UsageError(f"fine-tune checkpoint not found: {args.fine_tune_from}")
        cfg.train.fine_tune_from = args.fine_tune_from
    split = _split(args.data)
    model = SSD(cfg.model, seed=cfg.train.seed)
    samples = prepare(split, model.priors, cfg.model.input_size)
    model, loss_log = train(
        cfg.model, cfg.train, samples, model=model,
        on_log=lambda it, loss: print(f"{it}\t{loss:.6f}", flush=True),
        on_load=lambda loaded, fresh: print(f"fine-tune: loaded {loaded} parameters, initialised {fresh} new",
                                            flush=True))
    save_model(args.out, model)
    save_config(f"{args.out}.cfg", cfg)
    atomic_write_text(f"{args.out}.loss", "".join(f"{it}\t{loss:.6f}\n" for it, loss in loss_log))


def cmd_eval(args):
    split = _split(args.data)
    if args.detections:
        dets = read_detections(args.detections, split.categories)
        report = evaluate(dets, split.annotations, split.categories)
    else:
        cfg, model = _load(args.ckpt, args.config)
        e = cfg.eval
        report = evaluate_model(model, split, batch_size=e.batch_size, score_threshold=e.score_threshold,
                                nms_threshold=e.nms_threshold, top_k=e.top_k)
    sys.stdout.write(report.format())


def cmd_detect(args):
    cfg, model = _load(args.ckpt, args.config)
    if not Path(args.image).exists():
        raise UsageError(f"image not found: {args.image}")
    image = read_ppm(args.image)
    e = cfg.eval
    dets = model.detect(image, score_threshold=args.threshold if args.threshold is not None else e.score_threshold,
                        nms_threshold=e.nms_threshold, top_k=e.top_k)[0]
    s = cfg.model.input_size
    rows = [(Path(args.image).stem, d.category, d.score, tuple(v * s for v in d.box)) for d in dets]
    sys.stdout.write(format_detections(rows, cfg.data.categories))


def cmd_erf(args):
    cfg, model = _load(args.ckpt, args.config)
    try:
        y, x = (int(v) for v in args.pos.split(","))
    except ValueError:
        raise UsageError(f"--pos must be 'Y,X', got {args.pos!r}") from None
    image = probe_image(_split(args.data), cfg.model.input_size) if args.data else None
    heat, area = erf_probe(model, args.tap, (y, x), image=image)
    out = args.out or f"erf_{args.tap}.pgm"
    write_pgm(out, heat[0, 0])
    print(f"{args.tap}\t{area}")


def cmd_bench(args):
    for path in args.config:
        cfg = load_config(path)
        print(bench(cfg.model, args.images, args.warmup, args.repeats).format(), flush=True)


def build_parser():
    p = argparse.ArgumentParser(prog="ffssd", description="Feature-fused single-shot detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset split")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train (or fine-tune) a detector")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--fine-tune-from")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP@0.5 report for a checkpoint or detections file")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--detections")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detections for one PPM image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--config")
    d.add_argument("--threshold", type=float)
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("erf", help="effective receptive field of a backbone tap")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--tap", required=True)
    r.add_argument("--pos", required=True)
    r.add_argument("--config")
    r.add_argument("--data", help="split whose mean image is used as the probe")
    r.add_argument("--out")
    r.set_defaults(func=cmd_erf)

    b = sub.add_parser("bench", help="throughput and closed-form cost")
    b.add_argument("--config", action="append", required=True)
    b.add_argument("--images", type=int, default=20)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--repeats", type=int, default=1)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not (args.ckpt or args.detections):
        print("error: eval needs --ckpt or --detections", file=sys.stderr)
        return 2
    try:
        with thread_limit():
            args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (UsageError, ConfigError, ManifestError, CheckpointError, FileNotFoundError,
            KeyError, IndexError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
