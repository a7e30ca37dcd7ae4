"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
The output directory is taken from ``--out``, then the config's
``output_dir``, then ``$SCORECOMP_OUT_DIR``, then ``runs/<subcommand>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from ..errors import ConfigError, ScoreCompError
from .config import load_config
from .experiments import run_experiment

ENV_OUT = "SCORECOMP_OUT_DIR"
SUBCOMMANDS = {
    "compose-run": "compose-run",
    "similarity-probe": "similarity-probe",
    "sweep": "ablation-sweep",
    "dynamic-select": "dynamic-select",
}
HELP = {
    "compose-run": "sample with gated composition and the naive baseline; report moment errors",
    "similarity-probe": "adapter-vs-base similarity tables (in/out of distribution, unconditional)",
    "sweep": "ablation grid over patch size, tokenization, temperature rule, re-centering",
    "dynamic-select": "all adapters loaded; top-k gating vs naive, merge and the static subset",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scorecomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--seed", type=int, help="base seed; replaces the sampler seeds s, s+1, ...")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _with_seed(cfg, seed):
    n = len(cfg.sampler.seeds)
    sampler = dataclasses.replace(cfg.sampler, seeds=tuple(seed + i for i in range(n)))
    return cfg.replace(seed=seed, sampler=sampler)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kind = SUBCOMMANDS[args.command]
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config kind is {cfg.kind!r}, but subcommand {args.command!r} "
                              f"expects {kind!r}", args.config)
        if args.seed is not None:
            cfg = _with_seed(cfg, args.seed)
    except ConfigError as exc:
        print(f"scorecomp: config error: {exc}", file=sys.stderr)
        return 1
    out = args.out or cfg.output_dir or os.environ.get(ENV_OUT) or os.path.join("runs", args.command)
    try:
        manifest = run_experiment(cfg, out, jobs=args.jobs)
    except ScoreCompError as exc:
        print(f"scorecomp: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"scorecomp: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"{args.command}: wrote {len(manifest['files'])} files to {out}")
    _print_summary(manifest["metrics"])
    return 0


def _print_summary(metrics):
    summary = metrics.get("summary")
    if summary:
        for name, vals in summary.items():
            print(f"  {name:<18} mean_error={vals['mean_error']:.4f}"
                  + (f" cov_error={vals['cov_error']:.4f}" if "cov_error" in vals else ""))
    for name, vals in metrics.get("adapters", {}).items():
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        print(f"  {name:<18} in={fmt(vals['in_distribution'])} "
              f"out={fmt(vals['out_of_distribution'])} uncond={fmt(vals['unconditional'])}")


if __name__ == "__main__":
    sys.exit(main())
