"""Command-line front end.

Subcommands: gram (assemble and serialize a Gram matrix), pf-norm (transfer
norms between two serialized Grams), bound (evaluate the generalization
bound from a JSON input file), train (one arm of an experiment with a
per-epoch log and a checkpoint), experiment (all arms, CSV/JSON metrics).

Experiment settings come from a JSON config file; individual flags override
individual keys, and --seed is always explicit for runs so no result ever
depends on an implicit default.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import algebra, bounds, harness, kernels, pfnorm, training
from . import model as model_mod
from .algebra import dump_json


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _emit(text, out):
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    else:
        print(text)


def cmd_gram(args):
    obj = _read_json(args.config)
    kern = kernels.kernel_from_json(obj["kernel"])
    points = np.asarray(obj["points"], dtype=float)
    g = kernels.gram(kern, points,
                     force_dense=bool(obj.get("force_dense", False)))
    _emit(dump_json(kernels.gram_to_json(g)), args.out)
    return 0


def cmd_pf_norm(args):
    g1 = kernels.gram_from_json(_read_json(args.g1))
    gl = kernels.gram_from_json(_read_json(args.gl))
    report = pfnorm.pf_report(g1, gl, eta=args.eta, lambda1=args.lambda1)
    _emit(dump_json(report.to_json()), args.out)
    return 0


def cmd_bound(args):
    report = bounds.deep_bound(bounds.inputs_from_json(_read_json(args.config)))
    _emit(dump_json(report.to_json()), args.out)
    return 0


_OVERRIDE_KEYS = ("n", "d", "epochs", "test_set_size", "eval_every", "lr",
                  "optimizer", "kernel_c", "kernel_c2", "eta", "lambda2",
                  "stop_loss", "head_hidden", "mnist_images", "mnist_labels")


def _build_config(args, out_dir):
    obj = _read_json(args.config) if args.config else {}
    which = getattr(args, "which", None)
    if which:
        obj["which"] = which
    if "which" not in obj:
        raise ValueError("no experiment named: pass the positional name "
                         "or a config file with a 'which' key")
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS
                 if getattr(args, k, None) is not None}
    if args.lambda1_values is not None:
        overrides["lambda1_values"] = [
            float(v) for v in args.lambda1_values.split(",")]
    overrides["seed"] = args.seed
    if out_dir:
        overrides["output_dir"] = str(out_dir)
    return harness.config_from_json(obj, **overrides)


def cmd_train(args):
    """One arm, full per-epoch log in the training CSV format, checkpoint."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _build_config(args, None)
    data, source = harness.dataset_for(cfg)
    arm = args.arm or harness.experiment_arms(cfg)[0]
    loss_cfg = harness.arm_loss_config(cfg, arm)
    mdl, head = harness.build_model(cfg, arm, data)
    state = training.init_optimizer(cfg.optimizer, cfg.lr, mdl)
    head_state = None
    if head is not None:
        head_state = training.init_optimizer(cfg.optimizer, cfg.lr,
                                             head.params)
    lines = [training.LOG_HEADER]
    epoch, stopped, aborted = 0, False, None
    try:
        while True:
            t0 = time.perf_counter()
            grads, parts = training.grad_and_value(
                mdl, None, data.train_y, loss_cfg, head=head)
            wall_ms = (time.perf_counter() - t0) * 1e3
            lines.append(training.format_log_line(epoch, parts,
                                                  grads.norm(), wall_ms))
            if cfg.stop_loss is not None and parts["loss"] <= cfg.stop_loss:
                stopped = True
                break
            if epoch >= cfg.epochs:
                break
            training.optimizer_step(state, mdl, grads)
            if head is not None:
                head.set_params(training.update_arrays(
                    head_state, head.params, grads.head))
            epoch += 1
    except training.NonFinite as err:
        aborted = str(err)
    (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    model_mod.save_checkpoint(mdl, out / "checkpoint.json")
    if head is not None:
        np.savez(out / "head.npz", w1=head.w1, b1=head.b1,
                 w2=head.w2, b2=head.b2)
    summary = {"which": cfg.which, "arm": arm, "seed": cfg.seed,
               "epochs_run": epoch, "stopped_early": stopped}
    if source:
        summary["data_source"] = source
    if aborted is None:
        summary["final"] = {k: float(v) for k, v in parts.items()}
    else:
        summary["aborted"] = aborted
    (out / "train_summary.json").write_text(dump_json(summary) + "\n")
    print(dump_json(summary))
    return 0 if aborted is None else 1


def cmd_experiment(args):
    cfg = _build_config(args, args.out)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        _, summary = harness.run_many(cfg, seeds)
        print(dump_json(summary))
        return 0
    results = harness.run_experiment(cfg)
    print(dump_json({arm: log.summary for arm, log in results.items()}))
    if any("aborted" in log.summary for log in results.values()):
        return 1
    return 0


def _add_run_options(sub, which_required):
    sub.add_argument("which", nargs=None if which_required else "?",
                     choices=harness.EXPERIMENTS,
                     help="experiment name (optional when the config "
                          "file carries a 'which' key)"
                     if not which_required else "experiment name")
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--seed", type=int, required=True,
                     help="run seed (mandatory; controls data, init, subset)")
    sub.add_argument("--out", required=True, help="output directory")
    for key in _OVERRIDE_KEYS:
        flag = "--" + key.replace("_", "-")
        if key in ("optimizer", "mnist_images", "mnist_labels"):
            sub.add_argument(flag, help=argparse.SUPPRESS)
        elif key in ("n", "d", "epochs", "test_set_size", "eval_every",
                     "head_hidden"):
            sub.add_argument(flag, type=int, help=argparse.SUPPRESS)
        else:
            sub.add_argument(flag, type=float, help=argparse.SUPPRESS)
    sub.add_argument("--lambda1-values",
                     help="comma-separated regularizer weights, one arm each")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rkhm",
        description="Deep kernel models valued in structured matrix "
                    "algebras: Gram tools, transfer norms, generalization "
                    "bounds, and the reference experiments.")
    subs = parser.add_subparsers(dest="command", required=True)

    gram = subs.add_parser(
        "gram", help="assemble a Gram matrix from a kernel + points JSON")
    gram.add_argument("--config", required=True,
                      help='JSON with "kernel", "points", optional '
                           '"force_dense"')
    gram.add_argument("--out", help="write here instead of stdout")
    gram.set_defaults(func=cmd_gram)

    pf = subs.add_parser(
        "pf-norm", help="transfer norms between two serialized Grams")
    pf.add_argument("--g1", required=True, help="first-layer Gram JSON file")
    pf.add_argument("--gl", required=True, help="last-layer Gram JSON file")
    pf.add_argument("--eta", type=float, default=pfnorm.RIDGE_DEFAULT)
    pf.add_argument("--lambda1", type=float, default=1.0)
    pf.add_argument("--out", help="write here instead of stdout")
    pf.set_defaults(func=cmd_pf_norm)

    bnd = subs.add_parser(
        "bound", help="evaluate the generalization bound from inputs JSON")
    bnd.add_argument("--config", required=True,
                     help="JSON with D, B, E, delta, n, trace_sum, empirical")
    bnd.add_argument("--out", help="write here instead of stdout")
    bnd.set_defaults(func=cmd_bound)

    train = subs.add_parser(
        "train", help="train one arm; per-epoch log plus checkpoint")
    _add_run_options(train, which_required=False)
    train.add_argument("--arm", help="arm name (default: the first arm)")
    train.set_defaults(func=cmd_train)

    exp = subs.add_parser(
        "experiment", help="run all arms of one experiment at one seed")
    _add_run_options(exp, which_required=True)
    exp.add_argument("--seeds",
                     help="comma-separated seeds; runs each and writes a "
                          "cross-seed summary")
    exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (algebra.ShapeMismatch, algebra.NotSymmetric, kernels.KernelError,
            pfnorm.SingularGram, bounds.InvalidInput, harness.BadMagic,
            harness.DimMismatch, harness.TruncatedFile, training.NonFinite,
            model_mod.CheckpointError, FileNotFoundError, KeyError,
            json.JSONDecodeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
