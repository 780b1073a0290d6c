"""Command-line entry point.

Verbs: train, eval, sample, gradcheck, inspect. Exit codes: 0 on success,
1 on a runtime failure (message on stderr), 2 on usage errors (argparse).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, evaluate, figures, training
from .autodiff import run_mlp_grad_checks
from .channels import ChannelSpec
from .objectives import vimco_unbiasedness_check


def _add_override_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epsilon", default=None, help="override the channel noise level")
    p.add_argument("--method", choices=training.METHODS, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="information-loss weight")
    p.add_argument("--bits", type=int, default=None, help="code length")
    p.add_argument("--dataset", default=None)
    p.add_argument("--data-dir", default=None, help="dataset directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (1 = reference mode, the default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iabf",
                                     description="binary joint source-channel coding trainer")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    p_train.add_argument("--config", default=None, help="flat key=value config file")
    p_train.add_argument("--out", default="runs/latest", help="output directory")
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_override_flags(p_train)

    p_eval = sub.add_parser("eval", help="measure distortion across noise levels")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--epsilon", default="0.1,0.2,0.3,0.4",
                        help="comma-separated noise levels")
    p_eval.add_argument("--channel", choices=("bsc", "bec"), default=None,
                        help="override the channel family")
    p_eval.add_argument("--draws", type=int, default=10, help="channel draws per image")
    p_eval.add_argument("--mode", choices=("map", "sample"), default="map",
                        help="deterministic or sampled encoding")
    p_eval.add_argument("--out", default="runs/eval")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--data-dir", default=None)
    p_eval.add_argument("--grid", action="store_true",
                        help="also write reconstruction grids per noise level")

    p_sample = sub.add_parser("sample", help="run the sampling chain and write an image grid")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--steps", type=int, default=15)
    p_sample.add_argument("--index", type=int, default=0, help="test image to start from")
    p_sample.add_argument("--out", default="runs/samples")
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--data-dir", default=None)

    p_check = sub.add_parser("gradcheck", help="run gradient and estimator self-checks")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--instances", type=int, default=100,
                         help="random network instances to difference")
    p_check.add_argument("--draws", type=int, default=100_000,
                         help="draws for the estimator bias check")

    p_inspect = sub.add_parser("inspect", help="print checkpoint metadata")
    p_inspect.add_argument("--checkpoint", required=True)
    return parser


def _cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epsilon": args.epsilon, "method": args.method,
                 "lambda": args.lam, "bits": args.bits, "dataset": args.dataset,
                 "data_dir": args.data_dir, "threads": args.threads,
                 "epochs": args.epochs}
    if args.resume:
        result = training.resume(args.resume, overrides, args.out)
    else:
        config = training.TrainConfig()
        if args.config:
            with open(args.config, encoding="utf-8") as f:
                config = training.config_from_text(f.read())
        training.apply_overrides(config, overrides)
        config.validate()
        result = training.train(config, args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    if np.isfinite(result.best_val):
        print(f"best validation distortion: {result.best_val:.4f}")
    return 0


def _load_model(checkpoint_path: str, data_dir: str | None):
    ckpt = training.load_checkpoint(checkpoint_path)
    if data_dir:
        ckpt.config.data_dir = data_dir
    ds = data.load_dataset(ckpt.config.dataset, ckpt.config.data_dir)
    params = training.params_from_checkpoint(ckpt, ds.n)
    return ckpt, ds, params


def _cmd_eval(args) -> int:
    ckpt, ds, params = _load_model(args.checkpoint, args.data_dir)
    kind = args.channel or (ckpt.config.channel if ckpt.config.channel != "adversarial" else "bsc")
    epsilons = [float(e) for e in str(args.epsilon).split(",") if e != ""]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval_config.txt"), "w", encoding="utf-8") as f:
        f.write(f"checkpoint = {args.checkpoint}\nchannel = {kind}\n"
                f"epsilon = {','.join(str(e) for e in epsilons)}\n"
                f"draws = {args.draws}\nmode = {args.mode}\nseed = {args.seed}\n")
    reports = []
    for eps in epsilons:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((args.seed, int(eps * 1e6)))))
        reports.append(evaluate.distortion(ds.test, params, ChannelSpec(kind, eps),
                                           draws=args.draws, rng=rng, mode=args.mode,
                                           dataset=ds.name, method=ckpt.config.method,
                                           seed=args.seed))
        if args.grid:
            rng_grid = np.random.Generator(np.random.Philox(np.random.SeedSequence((args.seed, 7, int(eps * 1e6)))))
            sample = ds.test[:16]
            recon = evaluate.reconstruct(sample, params, ChannelSpec(kind, eps),
                                         rng=rng_grid, mode=args.mode)
            h, w, c = evaluate.image_shape(ds.n)
            stack = np.concatenate([sample, recon]).reshape(-1, h, w, c)
            ext = "pgm" if c == 1 else "ppm"
            evaluate.emit_image_grid(stack, 4, 8,
                                     os.path.join(args.out, f"recon_eps{eps:g}.{ext}"))
    csv_path = os.path.join(args.out, "distortion.csv")
    evaluate.write_reports_csv(reports, csv_path)
    figures.save_distortion_figure(reports, os.path.join(args.out, "distortion.png"))
    print(evaluate.format_table(reports))
    print(f"wrote {csv_path} and distortion.png")
    return 0


def _cmd_sample(args) -> int:
    ckpt, ds, params = _load_model(args.checkpoint, args.data_dir)
    if not (0 <= args.index < ds.test.shape[0]):
        raise ValueError(f"--index must be in [0, {ds.test.shape[0]})")
    kind = ckpt.config.channel if ckpt.config.channel != "adversarial" else "bsc"
    channel = ChannelSpec(kind, ckpt.config.epsilon)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((args.seed, 11))))
    states = evaluate.markov_chain(params, channel, ds.test[args.index], args.steps, rng)
    os.makedirs(args.out, exist_ok=True)
    h, w, c = evaluate.image_shape(ds.n)
    cols = 8
    rows = (states.shape[0] + cols - 1) // cols
    ext = "pgm" if c == 1 else "ppm"
    grid_path = os.path.join(args.out, f"chain.{ext}")
    evaluate.emit_image_grid(states.reshape(-1, h, w, c), rows, cols, grid_path)
    figures.save_chain_figure(states, os.path.join(args.out, "chain.png"))
    print(f"wrote {grid_path} ({states.shape[0]} states)")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_mlp_grad_checks(instances=args.instances, seed=args.seed)
    worst = max(max((b.max_rel_error for b in r.blocks), default=0.0) for r in reports)
    ok = all(r.passed for r in reports)
    print(f"finite differences: {args.instances} random networks, "
          f"worst relative error {worst:.3e} -> {'ok' if ok else 'FAIL'}")
    passed, max_z, est, exact = vimco_unbiasedness_check(
        total_draws=args.draws, seed=args.seed, se_limit=4.0)
    print(f"estimator bias check: {args.draws} draws, max |z| {max_z:.2f} "
          f"-> {'ok' if passed else 'FAIL'}")
    print(f"  estimate {np.array2string(est, precision=4)}  "
          f"exact {np.array2string(exact, precision=4)}")
    return 0 if (ok and passed) else 1


def _cmd_inspect(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    print(f"checkpoint version: {ckpt.version}")
    print(f"epoch: {ckpt.epoch}")
    best = ckpt.best_val
    print(f"best validation distortion: {best:.6f}" if np.isfinite(best)
          else "best validation distortion: none recorded")
    print("config:")
    for line in ckpt.config_text.strip().splitlines():
        print(f"  {line}")
    print("arrays:")
    for name, arr in ckpt.arrays.items():
        print(f"  {name:14s} {arr.shape}")
    return 0


_HANDLERS = {"train": _cmd_train, "eval": _cmd_eval, "sample": _cmd_sample,
             "gradcheck": _cmd_gradcheck, "inspect": _cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.verb](args)
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
