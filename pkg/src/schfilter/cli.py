"""Command line entry point.

    schfilter run --config exp1.yaml --mode tempered --out runs/exp1
    schfilter run --experiment 2 --mode bootstrap --out runs/exp2_bs
    schfilter plot --in runs/exp1
"""

import argparse
import logging
import sys

from .experiment import RunConfig, load_config, run_experiment
from .plotting import plot_run


def _parser():
    p = argparse.ArgumentParser(prog="schfilter")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a filtering experiment")
    run.add_argument("--config", help="flat YAML key-value file")
    run.add_argument("--experiment", type=int, choices=(1, 2), default=None,
                     help="start from the preset for experiment 1 or 2")
    run.add_argument("--mode", choices=("bootstrap", "tempered", "nudged"))
    run.add_argument("--out", required=True)
    run.add_argument("--steps", type=int, help="override n_assim_steps")
    run.add_argument("--batches", type=int, help="override n_batches")
    run.add_argument("--no-plots", action="store_true")
    run.add_argument("-v", "--verbose", action="store_true")

    plot = sub.add_parser("plot", help="draw figures for a finished run")
    plot.add_argument("--in", dest="run_dir", required=True)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "plot":
        for path in plot_run(args.run_dir):
            print(path)
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = dict(mode=args.mode, n_assim_steps=args.steps, n_batches=args.batches)
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        preset = RunConfig.experiment2 if args.experiment == 2 else RunConfig.experiment1
        cfg = load_config_from_preset(preset, overrides)
    out = run_experiment(cfg, args.out, progress=args.verbose)
    if not args.no_plots:
        plot_run(out)
    print(out)
    return 0


def load_config_from_preset(preset, overrides):
    import os

    from .experiment import SEED_ENV

    changes = {k: v for k, v in overrides.items() if v is not None}
    if SEED_ENV in os.environ:
        changes["seed"] = int(os.environ[SEED_ENV])
    cfg = preset(**changes)
    if "n_assim_steps" in changes:
        cfg = cfg.replace(snapshot_steps=[s for s in cfg.snapshot_steps
                                          if s <= cfg.n_assim_steps] or [cfg.n_assim_steps])
    return cfg


if __name__ == "__main__":
    sys.exit(main())
