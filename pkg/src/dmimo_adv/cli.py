"""Command-line entry point: ``dmimo <subcommand> ...``.

Exit codes: 0 on success, 1 on a usage error, 2 when the run itself fails.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bench import (
    Axis,
    Evaluator,
    ExperimentSpec,
    Scenario,
    export,
    load_report,
    merge_reports,
    prepare,
    sweep,
)
from .core import evaluate
from .errors import DmimoError
from .mmf import SolverConfig, solve_mmf
from .nn import TrainConfig, init_mlp, save_model, train
from .scenario import NetworkConfig, draw_beta, export_dataset_csv, gen_dataset, load_dataset, save_dataset

log = logging.getLogger("dmimo_adv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def _network(args):
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
    if getattr(args, "seed", None) is not None:
        config["master_seed"] = args.seed
    return NetworkConfig.from_dict(config)


def cmd_gen_data(args):
    config = _network(args)
    dataset = gen_dataset(config, args.num_samples, train_fraction=args.train_fraction)
    if args.format == "csv":
        with open(args.out, "w", newline="") as fh:
            export_dataset_csv(dataset, fh)
    else:
        save_dataset(dataset, args.out)
    log.info("wrote %d samples to %s", len(dataset), args.out)


def cmd_solve(args):
    config = _network(args)
    if args.beta:
        beta = np.loadtxt(args.beta, delimiter=",", ndmin=2)
        if beta.shape != config.shape:
            raise UsageError(f"beta file has shape {beta.shape}, config expects {config.shape}")
    else:
        beta = draw_beta(config, args.index)
    sol = solve_mmf(beta, config.total_power, config.noise_power, SolverConfig(bisection_tol=args.tol))
    metrics = evaluate(beta, sol.eta, config.total_power, config.noise_power, config.bandwidth)
    out = {
        "beta": beta.tolist(),
        "eta": sol.eta.tolist(),
        "sinr": metrics.sinr.tolist(),
        "se": metrics.se.tolist(),
        "min_se": float(metrics.min_se),
        "ee": float(metrics.ee),
        "bisection_iterations": int(sol.iterations),
    }
    print(json.dumps(out, indent=1, sort_keys=True))


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    m, k = dataset.config.shape
    model = init_mlp(m * k, args.hidden, m * k, seed=args.seed)
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, patience=args.patience, seed=args.seed
    )
    model, history = train(model, dataset, cfg, log=log.info)
    save_model(model, args.out)
    log.info("best epoch %d, validation loss %.4e", history["best_epoch"], history["best_val_loss"])


def _load_spec(args):
    spec = ExperimentSpec.load(args.spec)
    if args.out_dir:
        spec.output_dir = args.out_dir
    if args.instances:
        spec.num_instances = args.instances
    return spec


def cmd_attack(args):
    spec = _load_spec(args)
    if not spec.scenarios:
        raise UsageError("the spec lists no scenarios")
    prepare(spec, log=log.info)
    report = Evaluator(spec).run(log=log.info)
    for path in export(report, spec.output_dir, args.format, stem=args.stem):
        log.info("wrote %s", path)


def cmd_sweep(args):
    spec = _load_spec(args)
    axis = Axis.EPSILON if args.axis == "epsilon" else Axis.MALICIOUS_FRACTION
    base = [
        Scenario(attack=a, epsilon=args.epsilon, threat=args.threat, fraction=args.fraction, crafter=args.crafter)
        for a in args.attacks.split(",")
    ]
    prepare(spec, log=log.info)
    report = sweep(Evaluator(spec), base, axis, args.values, log=log.info)
    for path in export(report, spec.output_dir, args.format, stem=args.stem):
        log.info("wrote %s", path)


def cmd_report(args):
    report = merge_reports([load_report(p) for p in args.inputs])
    if args.format == "table":
        text = report.summary_table()
    elif args.format == "csv":
        text = report.to_csv()
    elif args.format == "cdf":
        text = report.cdf_csv()
    else:
        text = report.to_json()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def build_parser():
    p = _Parser(prog="dmimo", description="Adversarial robustness workbench for learned D-MIMO power allocation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a labeled dataset")
    g.add_argument("--config", help="network config JSON (defaults otherwise)")
    g.add_argument("--num-samples", type=int, default=20000)
    g.add_argument("--train-fraction", type=float, default=0.975)
    g.add_argument("--seed", type=int, help="master seed (overrides the config)")
    g.add_argument("--format", choices=("bin", "csv"), default="bin")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("solve", help="solve the max-min-fair allocation for one channel")
    s.add_argument("--config")
    s.add_argument("--beta", help="CSV file with the M x K linear channel gains")
    s.add_argument("--index", type=int, default=0, help="draw sample INDEX instead of reading --beta")
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-4, help="bisection tolerance")
    s.set_defaults(func=cmd_solve)

    t = sub.add_parser("train", help="train an allocator on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--hidden", type=_ints, default=[512, 256, 128], help="comma-separated hidden widths")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, text in (
        ("attack", cmd_attack, "run the scenarios of an experiment spec"),
        ("sweep", cmd_sweep, "sweep epsilon or the malicious fraction"),
    ):
        a = sub.add_parser(name, help=text)
        a.add_argument("--spec", required=True, help="experiment spec JSON")
        a.add_argument("--out-dir", help="override the spec's output directory")
        a.add_argument("--instances", type=int, help="override the evaluation instance count")
        a.add_argument("--format", nargs="+", choices=("json", "csv"), default=["json", "csv"])
        a.add_argument("--stem", default=name)
        a.set_defaults(func=func)
        if name == "sweep":
            a.add_argument("--axis", choices=("epsilon", "fraction"), required=True)
            a.add_argument("--values", type=_floats, required=True, help="ascending, comma-separated")
            a.add_argument("--attacks", default="GAUSSIAN,M_UAP")
            a.add_argument("--threat", choices=("FULL", "MALICIOUS_RUS", "MALICIOUS_UES"), default="FULL")
            a.add_argument("--fraction", type=float, default=1.0)
            a.add_argument("--epsilon", type=float, default=8.0)
            a.add_argument("--crafter", choices=("original", "surrogate"), default="surrogate")

    r = sub.add_parser("report", help="combine report files and print or convert them")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--format", choices=("table", "csv", "cdf", "json"), default="table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dmimo: error: {exc}", file=sys.stderr)
        return 1
    except (DmimoError, OSError, ValueError, KeyError) as exc:
        print(f"dmimo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
