"""Command-line entry point: one subcommand per experiment tag."""

from __future__ import annotations

import argparse
import json
import os
import sys


def build_parser():
    from .experiments import EXPERIMENTS

    parser = argparse.ArgumentParser(prog="actorgrasp", description="Run actor/critic grasping experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")
    for tag in EXPERIMENTS:
        p = sub.add_parser(tag, help=f"run the {tag} experiment")
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="run a single master seed instead of the configured list")
        p.add_argument("--out", help="output directory (overrides the config and $ACTORGRASP_OUT)")
        p.add_argument("--threads", type=int, default=1, help="independent seeds run in parallel")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        if tag == "on-policy":
            p.add_argument("--resume", action="store_true", help="continue from checkpoints in the output dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    # one BLAS thread per worker; parallelism comes from independent seeds
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    from . import experiments as ex

    try:
        if args.config:
            config = ex.load_config(args.config)
            if config.experiment != args.experiment:
                raise ex.ConfigError(f"experiment: config is for {config.experiment!r}, "
                                     f"not {args.experiment!r}")
        else:
            config = ex.default_config(args.experiment)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ex.ConfigError("--seed: expected an unsigned 64-bit integer")
            config.seeds = [args.seed]
    except (ex.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(json.dumps(ex.config_to_dict(config), indent=2, sort_keys=True))
        return 0
    try:
        run_dir, summary = ex.run_experiment(config, args.out, args.threads,
                                             resume=getattr(args, "resume", False))
    except Exception as exc:  # report with context, non-zero exit
        print(f"error: {args.experiment} experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    print(f"results written to {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
