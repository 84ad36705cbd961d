"""Command-line entry point: ``ddacdn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .augment import corrupt_gaussian
from .config import ConfigError, parse_config, parse_tiles
from .datasynth import load_dataset, synth_dataset
from .detector import Checkpoint, CheckpointError, backbone_forward, load_checkpoint, save_checkpoint
from .imgproc import ApageConfig, PGMError, apage, atomic_write, read_pgm, write_pgm
from .metrics import evaluate_model, pr_csv, pr_curve, write_csv
from .mkmmd import KernelBank, median_bandwidth, mmd2
from .train import InsufficientLabelsError, NonFiniteLossError, train_baseline, train_ddacdn

log = logging.getLogger("ddacdn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _tiles(text: str) -> tuple[int, int]:
    try:
        return parse_tiles(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


# --- subcommands ----------------------------------------------------------------------

def cmd_enhance(args) -> int:
    cfg = ApageConfig(args.patch, args.patch, clahe_clip=args.clip, clahe_tiles=args.tiles)
    write_pgm(apage(read_pgm(args.inp), cfg), args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    conf = parse_config(args.config)
    over = {"seed": args.seed} if args.seed is not None else {}
    out = synth_dataset(conf.synth_spec(**over), args.out)
    log.info("wrote dataset to %s", out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.mode == "ddacdn" and args.target is None:
        raise UsageError("train: --target is required in ddacdn mode")
    conf = parse_config(args.config)
    source = load_dataset(args.source, domain="source", split="train")
    target = (load_dataset(args.target, domain="target", split="train")
              if args.mode == "ddacdn" else None)
    out = Path(args.out)
    over = {"checkpoint_dir": str(out), "log_path": str(out / "train_log.csv")}
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = conf.train_config(**over)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "ddacdn":
        params, _ = train_ddacdn(cfg, source, target)
        pre = cfg.apage if cfg.use_apage else None
    else:
        enhance = args.mode == "baseline-apage"
        params, _ = train_baseline(cfg, source, enhance=enhance)
        pre = cfg.apage if enhance else None
    save_checkpoint(Checkpoint(cfg.geometry, params, pre), out / "model.ckpt")
    return EXIT_OK


def _eval_samples(args):
    samples = load_dataset(args.data, domain=args.domain, split=args.split)
    if not samples:
        raise ValueError(f"no samples in {args.data} for domain={args.domain} split={args.split}")
    return samples


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.model)
    samples = _eval_samples(args)
    res = evaluate_model(ckpt, samples, args.iou, args.conf)
    write_csv(res.to_csv(), args.out)
    if args.pr:
        from .detector import detect
        images = [s.image for s in samples]
        if ckpt.apage is not None:
            images = [apage(im, ckpt.apage) for im in images]
        # keep every detection so the curve spans the full confidence range
        dets = detect(ckpt.params, np.stack(images), ckpt.geometry, 0.0)
        curves = pr_curve(dets, [s.labels for s in samples], args.iou, args.points,
                          ckpt.geometry.num_classes)
        write_csv(pr_csv(curves), args.pr)
    print(f"macro_f1={res.macro_f1():.6f} image_acc={res.image_accuracy():.6f}")
    return EXIT_OK


def mmd_shift_sweep(shifts, n: int, seed: int, dim: int = 1):
    """Rows (shift, biased, unbiased) for N(0, I) against N(shift, I).

    The same base draws are reused for every shift and the kernel bank is
    fixed from the unshifted pair, so only the shift varies.
    """
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(n, dim))
    base = rng.normal(size=(n, dim))
    bank = KernelBank.from_median(median_bandwidth(xs, base))
    rows = []
    for d in shifts:
        xt = base + d
        rows.append((d, mmd2(bank, xs, xt).item(), mmd2(bank, xs, xt, "unbiased").item()))
    return rows


def cmd_mmd_demo(args) -> int:
    rows = mmd_shift_sweep(args.shift, args.n, args.seed, args.dim)
    text = "shift,mmd2_biased,mmd2_unbiased\n" + "".join(
        f"{d:g},{b:.12g},{u:.12g}\n" for d, b, u in rows)
    write_csv(text, args.out)
    return EXIT_OK


def robustness_rows(ckpt: Checkpoint, samples, ratios, sigma: float, seeds,
                    iou_thresh: float = 0.5, conf_thresh: float = 0.25):
    """(ratio, seed, class, f1) rows; corruption precedes the model's preprocessing."""
    rows = []
    for ratio in ratios:
        for seed in seeds:
            noisy = [s.replace(corrupt_gaussian(s.image, ratio, sigma,
                                                np.random.default_rng([seed, i])))
                     for i, s in enumerate(samples)]
            res = evaluate_model(ckpt, noisy, iou_thresh, conf_thresh)
            for c, m in enumerate(res.per_class("box")):
                rows.append((ratio, seed, c, m[2]))
    return rows


def cmd_robustness(args) -> int:
    ckpt = load_checkpoint(args.model)
    samples = _eval_samples(args)
    rows = robustness_rows(ckpt, samples, args.ratio, args.sigma, args.seeds, args.iou, args.conf)
    text = "ratio,seed,class,f1\n" + "".join(f"{r:g},{s},{c},{f:.6f}\n" for r, s, c, f in rows)
    write_csv(text, args.out)
    return EXIT_OK


def feature_csv(feat: np.ndarray) -> str:
    """(C, S, S) feature map as ``channel,row,col,value`` rows."""
    c, h, w = feat.shape
    ch, rr, cc = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    lines = ["channel,row,col,value"]
    lines.extend(f"{a},{b},{d},{v!r}" for a, b, d, v in
                 zip(ch.ravel(), rr.ravel(), cc.ravel(), feat.ravel().tolist()))
    return "\n".join(lines) + "\n"


def cmd_dump_features(args) -> int:
    ckpt = load_checkpoint(args.model)
    img = read_pgm(args.image)
    if ckpt.apage is not None:
        img = apage(img, ckpt.apage)
    pyramid = backbone_forward(ckpt.params, img[None], ckpt.geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, feat in enumerate(pyramid, start=2):
        atomic_write(out / f"stage{k}.csv", feature_csv(feat.data[0]).encode("ascii"))
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddacdn", description="Domain-adaptive crack detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("enhance", help="apply APAGE to a PGM image")
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--patch", type=int, default=100)
    e.add_argument("--clip", type=float, default=2.0)
    e.add_argument("--tiles", type=_tiles, default=(8, 8))
    e.set_defaults(func=cmd_enhance)

    s = sub.add_parser("synth", help="write the synthetic two-domain benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--mode", choices=("ddacdn", "baseline", "baseline-apage"), default="ddacdn")
    t.add_argument("--source", required=True)
    t.add_argument("--target")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def data_args(q):
        q.add_argument("--model", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--domain", default="target")
        q.add_argument("--split", default="test")
        q.add_argument("--iou", type=float, default=0.5)
        q.add_argument("--conf", type=float, default=0.25)
        q.add_argument("--out", required=True)

    v = sub.add_parser("eval", help="evaluate a checkpoint")
    data_args(v)
    v.add_argument("--pr")
    v.add_argument("--points", type=int, default=101)
    v.set_defaults(func=cmd_eval)

    m = sub.add_parser("mmd-demo", help="MMD between N(0,1) and shifted copies")
    m.add_argument("--shift", type=_floats, default=[0.0, 0.5, 1.0, 2.0, 4.0])
    m.add_argument("--n", type=int, default=500)
    m.add_argument("--dim", type=int, default=1)
    m.add_argument("--seed", type=int, default=7)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mmd_demo)

    r = sub.add_parser("robustness", help="F1 under Gaussian pixel corruption")
    data_args(r)
    r.add_argument("--ratio", type=_floats, default=[0.1, 0.2, 0.3])
    r.add_argument("--sigma", type=float, required=True)
    r.add_argument("--seeds", "--seed", dest="seeds", type=_ints, default=[0, 1, 2])
    r.set_defaults(func=cmd_robustness)

    d = sub.add_parser("dump-features", help="write stage 2/3/4 features as CSV")
    d.add_argument("--model", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, nd.DomainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, PGMError, CheckpointError, InsufficientLabelsError,
            OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
