"""Command-line entry point.

Subcommands:

* ``run``       -- execute one experiment and write all artifacts
* ``compare``   -- tabulate finished runs against each other
* ``gradcheck`` -- finite-difference validation of every gradient path
* ``selftest``  -- fast oracle agreement checks for the numerical core
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--profile", default=None, choices=["desk", "paper"],
                        help="hyperparameter bundle when no config is given")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedrecon",
        description="Federated unrolled MR reconstruction simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)
    p_run.add_argument("--out", type=Path, required=True, help="output directory")
    p_run.add_argument(
        "--strategy",
        default=None,
        choices=["MODFED", "FEDAVG", "FEDPROX", "SINGLESET"],
        help="federation strategy override",
    )
    p_run.add_argument(
        "--no-figures", action="store_true", help="skip figure rendering"
    )

    p_cmp = sub.add_parser("compare", help="compare finished runs")
    p_cmp.add_argument("runs", nargs="+", type=Path, help="run directories")
    p_cmp.add_argument("--out", type=Path, default=None, help="summary CSV path")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(p_grad)

    p_self = sub.add_parser("selftest", help="oracle agreement checks")
    _add_common(p_self)
    return parser


def _load_config(args):
    from .experiment import ExperimentConfig, profile_defaults

    if args.config is not None:
        config = ExperimentConfig.from_yaml(args.config)
    else:
        config = ExperimentConfig.from_dict(profile_defaults(args.profile or "desk"))
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "strategy", None) is not None:
        overrides["strategy"] = args.strategy
    if overrides:
        values = config.to_dict()
        values.update(overrides)
        config = ExperimentConfig.from_dict(values)
    return config


def cmd_run(args):
    from .experiment import run_experiment

    config = _load_config(args)
    print(f"strategy={config.strategy} clients={config.clients} "
          f"rounds={config.rounds} seed={config.seed}")
    result = run_experiment(config, args.out, render_figures=not args.no_figures)
    last = result.federation.reports[-1]
    print(f"finished {config.rounds} rounds in {result.wall_seconds:.1f}s "
          f"(cpu {result.cpu_seconds:.1f}s)")
    for row in result.final_rows:
        print(
            f"  client {row['client']}: psnr {row['psnr']:.2f} dB "
            f"(zero-filled {row['zf_psnr']:.2f}), ssim {row['ssim']:.4f}"
        )
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_compare(args):
    from .experiment import CompareError, compare_runs, format_comparison

    try:
        summary = compare_runs(args.runs, out_path=args.out)
    except CompareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_comparison(summary))
    if args.out:
        print(f"summary written to {args.out}")
    return 0


def _report(results):
    failed = [name for name, err, bound in results if not err < bound]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_gradcheck(args):
    from .checks import gradient_suite

    print("finite-difference gradient checks:")
    return _report(gradient_suite(verbose=True))


def cmd_selftest(args):
    from .checks import oracle_suite

    print("oracle agreement checks:")
    return _report(oracle_suite(verbose=True))


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {
        "run": cmd_run,
        "compare": cmd_compare,
        "gradcheck": cmd_gradcheck,
        "selftest": cmd_selftest,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
