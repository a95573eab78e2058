"""Command-line interface: ``bruno <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import contextlib
import csv
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import FIELD_TYPES, ExperimentConfig, apply_overrides, load_config
from .data import load_idx, read_idx, rotate_augment, sample_sequence, synth_exchangeable
from .errors import BrunoError
from .flow import PreprocessConfig
from .images import emit_grid
from .model import sample_conditional
from .tasks import (
    FinetuneConfig,
    STABILITY_SETTINGS,
    accuracy_ci,
    anomaly_score,
    discriminative_finetune,
    few_shot_eval,
    latent_analysis,
    stability_run,
    write_latent_csv,
    write_stability_csvs,
    write_trace_csv,
)
from .train import Trainer


class UsageError(Exception):
    pass


def _override_pairs(extra):
    """Turn leftover ``--key value`` / ``--key=value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise UsageError(f"unknown option --{key}")
        out[key] = value
    return out


def experiment_config(args, extra=()):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = _override_pairs(list(extra))
    try:
        return apply_overrides(cfg, overrides)
    except ValueError as err:
        raise UsageError(str(err)) from None


def load_dataset(cfg):
    if cfg.data == "synthetic":
        return synth_exchangeable(
            cfg.synth_rho, cfg.synth_dims, cfg.synth_classes, cfg.synth_per_class, cfg.data_seed, cfg.synth_spacing
        )
    if cfg.data == "idx":
        if not cfg.images or not cfg.labels:
            raise UsageError("data = idx needs both images and labels")
        ds = load_idx(cfg.images, cfg.labels)
        return rotate_augment(ds) if cfg.rotate else ds
    raise UsageError(f"unknown data source {cfg.data!r}")


def _model_for(args, cfg, dataset):
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint).model
    return cfg.build_model(dataset)


# ---------------------------------------------------------------- commands

def cmd_train(args, extra):
    cfg = experiment_config(args, extra)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    dataset = load_dataset(cfg)
    tcfg = cfg.train_config()
    out = Path(args.out)
    if args.resume:
        ck = load_checkpoint(args.resume)
        trainer = Trainer(ck.model, dataset, tcfg, rng=ck.rng(), optimizer=ck.optimizer, iteration=ck.iteration)
    else:
        trainer = Trainer(cfg.build_model(dataset), dataset, tcfg)
    config_dict = {k: getattr(cfg, k) for k in FIELD_TYPES}

    def save():
        save_checkpoint(out, trainer.model, trainer.iteration, trainer.optimizer, trainer.rng, config_dict)

    def progress(it, loss):
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save()
        if args.log_every and it % args.log_every == 0:
            print(f"iter {it} loss {loss:.6f}", flush=True)

    try:
        trainer.run(callback=progress)
    finally:
        if args.trace:
            write_trace_csv(args.trace, trainer.trace)
    save()
    print(f"wrote {out} at iteration {trainer.iteration}")
    return 0


def cmd_sample(args, extra):
    cfg = experiment_config(args, extra)
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    rng = np.random.default_rng(args.seed or 0)
    x_obs = np.zeros((0, model.dim))
    if args.condition_class is not None:
        dataset = load_dataset(cfg)
        idx = sample_sequence(dataset, args.n_cond, rng, cls=args.condition_class)
        x_obs = model.prepare(dataset.items[idx], rng)
    rows, cols = args.rows, args.cols
    samples = sample_conditional(model, x_obs, rows * cols, rng)
    if args.out.endswith(".csv"):
        np.savetxt(args.out, samples, delimiter=",", fmt="%.17g")
    else:
        emit_grid(samples, rows, cols, args.out, model.flow.preprocess.num_levels)
    print(f"wrote {rows * cols} samples to {args.out}")
    return 0


def cmd_fewshot(args, extra):
    cfg = experiment_config(args, extra)
    dataset = load_dataset(cfg)
    model = _model_for(args, cfg, dataset)
    seed = args.seed or 0
    acc = few_shot_eval(model, dataset, args.n, args.k, args.episodes, seed)
    ci = accuracy_ci(acc, args.episodes)
    print(f"accuracy {acc!r} +- {ci:.4f} ({args.n}-shot {args.k}-way, {args.episodes} episodes, 95% CI)")
    return 0


def cmd_finetune(args, extra):
    cfg = experiment_config(args, extra)
    dataset = load_dataset(cfg)
    ck = load_checkpoint(args.checkpoint)
    fcfg = FinetuneConfig(
        iterations=args.iterations, episodes_per_step=args.episodes_per_step,
        learning_rate=args.learning_rate, seed=args.seed or 0,
    )
    model, trace = discriminative_finetune(ck.model, dataset, args.n, args.k, fcfg)
    save_checkpoint(args.out, model, ck.iteration, config=ck.config)
    if args.trace:
        write_trace_csv(args.trace, trace)
    print(f"wrote {args.out}; final episode loss {trace[-1] if trace.size else float('nan'):.6f}")
    return 0


def _read_stream(path, model):
    path = str(path)
    if path.endswith(".csv"):
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    items = read_idx(path)
    return model.prepare(items.reshape(items.shape[0], -1))


def cmd_anomaly(args, extra):
    ck = load_checkpoint(args.checkpoint)
    model = ck.model
    if args.stream:
        stream = _read_stream(args.stream, model)
    else:
        cfg = experiment_config(args, extra)
        dataset = load_dataset(cfg)
        rng = np.random.default_rng(args.seed or 0)
        idx = sample_sequence(dataset, args.length, rng, cls=args.stream_class)
        stream = model.prepare(dataset.items[idx], rng)
    trace = anomaly_score(model, stream, args.threshold)
    ranks = trace.ranks()
    handle = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
    with handle as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "log_score", "rank", "flagged"])
        for i, (s, r, f) in enumerate(zip(trace.scores, ranks, trace.flags)):
            w.writerow([i, repr(float(s)), int(r), int(f)])
    return 0


def cmd_analyze(args, extra):
    model = load_checkpoint(args.checkpoint).model
    table = latent_analysis(model)
    if args.out:
        write_latent_csv(table, args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["dim", "rho_over_v", "nu", "v"])
        for d, c, nu, v in table.rows():
            w.writerow([d, repr(float(c)), repr(float(nu)), repr(float(v))])
    for eps, count in zip(table.eps_grid, table.counts):
        print(f"# dims with rho/v > {eps:g}: {count}", file=sys.stderr)
    return 0


def cmd_stability(args, extra):
    cfg = experiment_config(args, extra)
    dataset = load_dataset(cfg)
    tcfg = cfg.train_config()
    kind = "logit" if np.issubdtype(dataset.items.dtype, np.integer) else "none"
    results = stability_run(
        dataset, args.setting, tcfg, depth=cfg.depth, hidden=cfg.hidden,
        preprocess=PreprocessConfig(alpha=cfg.alpha, kind=kind), seed=cfg.seed,
    )
    for mode, path in write_stability_csvs(results, args.out_dir, args.setting).items():
        status = "diverged" if results[mode][1] else "finite"
        print(f"{mode}: {path} ({status})")
    return 0


def cmd_selftest(args, extra):
    from .selftest import run_selftest

    return 0 if run_selftest(seed=args.seed or 0) else 1


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="bruno", description="Exchangeable neural sequence model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    common.add_argument("--config", help="key = value experiment file (further --key value pairs override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="generative training")
    p.add_argument("--out", default="bruno.ckpt", help="checkpoint path")
    p.add_argument("--trace", help="CSV loss trace path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="draw (conditional) samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help=".pgm/.ppm grid or .csv")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--condition-class", type=int, help="condition on items of this dataset class")
    p.add_argument("--n-cond", type=int, default=10, help="number of conditioning items")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fewshot", parents=[common], help="n-shot k-way evaluation")
    p.add_argument("--checkpoint", help="model to evaluate (default: a fresh model)")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--episodes", type=int, default=1000)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("finetune", parents=[common], help="discriminative episode fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--episodes-per-step", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--trace", help="CSV loss trace path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("anomaly", parents=[common], help="per-item anomaly scores for a stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stream", help="CSV of preprocessed rows or an IDX image file")
    p.add_argument("--stream-class", type=int, default=0, help="without --stream: class to draw from")
    p.add_argument("--length", type=int, default=20, help="without --stream: stream length")
    p.add_argument("--threshold", type=float, help="flag items scoring below this")
    p.add_argument("--out", help="CSV output (default stdout)")
    p.set_defaults(func=cmd_anomaly)

    p = sub.add_parser("analyze", parents=[common], help="per-dimension latent parameters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV output (default stdout)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("stability", parents=[common], help="Student-t vs Gaussian training traces")
    p.add_argument("--setting", choices=sorted(STABILITY_SETTINGS), default="default")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("selftest", parents=[common], help="oracle and gradient checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command not in ("train", "sample", "fewshot", "finetune", "anomaly", "stability"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be positive")
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args, extra)
    except UsageError as err:
        print(f"bruno {args.command}: {err}", file=sys.stderr)
        return 2
    except (BrunoError, OSError, ValueError, KeyError) as err:
        print(f"bruno {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
