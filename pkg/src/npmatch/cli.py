"""Command-line entry point: ``npmatch {train,eval,divergence,bench,sweep}``."""

import argparse
import configparser
import itertools
import json
import os
import sys

import numpy as np

from . import config as config_io
from . import metrics
from .checkpoint import load_checkpoint
from .data import dataset_from_config, load_dataset
from .divergence import DiagonalGaussian, js_skew, js_skew_dual, kl_diag, mc_estimate
from .trainer import train


def _fmt(x):
    return format(float(x), ".12g")


def _gaussian(text):
    """``MEAN,VAR`` with colon-separated vectors, e.g. ``0:1,1:2``."""
    try:
        mean, var = text.split(",")
        m = np.array([float(v) for v in mean.split(":")])
        s = np.array([float(v) for v in var.split(":")])
        return DiagonalGaussian(m, s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected MEAN,VAR (vectors joined by ':'): {exc}")


# ------------------------------------------------------------- commands


def cmd_train(args):
    cfg = config_io.load(args.config)
    os.makedirs(args.out, exist_ok=True)
    ds = dataset_from_config(cfg)
    state, log = None, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if config_io.serialize(ckpt.config) != config_io.serialize(cfg):
            raise ValueError("checkpoint was written with a different config")
        state = ckpt.state()
    log_path = os.path.join(args.out, "metrics.jsonl")
    ckpt_path = os.path.join(args.out, "checkpoint.npmc")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)
    result = train(cfg, ds, state=state, log_path=log_path, checkpoint_path=ckpt_path, log=log)
    summary = {"steps": result.state.step, "log": log_path, "checkpoint": ckpt_path}
    if result.log:
        summary["final_accuracy"] = result.log[-1]["accuracy"]
    print(json.dumps(summary))
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    ds = load_dataset(args.data, n=cfg.n_samples, noise=cfg.noise, n_classes=cfg.n_classes,
                      seed=cfg.data_seed, stats=ckpt.stats)
    mask = ds.y >= 0
    if not mask.any():
        raise ValueError("evaluation data has no labels")
    model = ckpt.ema_model()
    if ds.x.shape[1:] != model.cfg.input_shape:
        raise ValueError(f"data shape {ds.x.shape[1:]} does not match model {model.cfg.input_shape}")
    x, y = ds.x[mask], ds.y[mask]
    preds = model.predict_inputs(x, T=args.T, seed=args.seed)
    out = {
        "n": int(len(y)),
        "accuracy": 1.0 - metrics.error_rate(preds, y),
        "uce": metrics.expected_uce(preds, y, args.bins).uce,
        "ece": metrics.expected_ece(preds, y, args.bins).ece,
        "mean_uncertainty": float(preds.uncertainty.mean()),
        "classwise": metrics.classwise_uncertainty(preds, y),
    }
    if args.csv:
        print(metrics.rows_to_csv(out["classwise"]), end="")
    else:
        print(json.dumps(out, indent=2))
    return 0


def cmd_divergence(args):
    p, q, a = args.p, args.q, args.alpha
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    print(f"js_skew {_fmt(js_skew(p, q, a))}")
    print(f"js_skew_dual {_fmt(js_skew_dual(p, q, a))}")
    print(f"kl {_fmt(kl_diag(p, q))}")
    if args.mc:
        for kind in ("js_skew", "js_skew_dual"):
            est, se = mc_estimate(kind, p, q, a, n_samples=args.mc, seed=args.seed)
            print(f"mc_{kind} {_fmt(est)} +/- {_fmt(se)}")
    return 0


def cmd_bench(args):
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.ema_model()
    baseline = metrics.DropoutBaseline(model.cfg, p=0.3, seed=args.seed)
    for k in baseline.params:
        if k.startswith("bb."):
            baseline.params[k] = model.params[k]
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, *model.cfg.input_shape))
    table = metrics.timing_benchmark(model, baseline, x, range(1, args.t_max + 1),
                                     repeats=args.repeats, seed=args.seed)
    print(metrics.rows_to_csv(metrics.timing_rows(table)), end="")
    return 0


def _read_grid(path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("grid"):
        raise ValueError("grid file needs a [grid] section")
    grid = {}
    for key, raw in parser.items("grid"):
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ValueError(f"grid key {key!r} has no values")
        grid[key] = values
    return grid


def cmd_sweep(args):
    base = config_io.load(args.config)
    grid = _read_grid(args.grid)
    os.makedirs(args.out, exist_ok=True)
    keys = list(grid)
    summary = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = config_io.override(base, dict(zip(keys, values)))
        name = "_".join(f"{k}={v}" for k, v in zip(keys, values))
        log_path = os.path.join(args.out, f"{name}.jsonl")
        if os.path.exists(log_path):
            os.remove(log_path)
        result = train(cfg, dataset_from_config(cfg), log_path=log_path)
        row = dict(zip(keys, values))
        row["log"] = log_path
        if result.log:
            row["accuracy"] = result.log[-1]["accuracy"]
            row["uce"] = result.log[-1]["uce"]
        summary.append(row)
        print(json.dumps(row), flush=True)
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="npmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's EMA model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="two-moons, blobs, FILE.csv or idx:IMG,LBL")
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true", help="print only the class-wise table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("divergence", help="closed-form divergences of two diagonal Gaussians")
    p.add_argument("--p", required=True, type=_gaussian, metavar="MEAN,VAR")
    p.add_argument("--q", required=True, type=_gaussian, metavar="MEAN,VAR")
    p.add_argument("--alpha", required=True, type=float)
    p.add_argument("--mc", type=int, default=0, metavar="N", help="also run an N-sample oracle")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("bench", help="uncertainty-estimation timing vs MC dropout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--t-max", type=int, default=10)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="train once per cell of a parameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="INI file with a [grid] section")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes exit 1
        print(f"npmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
