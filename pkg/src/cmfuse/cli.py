"""Command-line entry point: ``cmfuse {synth,train,compare,ablate,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import write_cohort
from .harness import (
    ExperimentConfig,
    SyntheticData,
    default_comparison,
    run_ablation,
    run_experiment,
    summarize_folds_csv,
)

log = logging.getLogger("cmfuse")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmfuse", description="Multimodal survival fusion experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    synth = sub.add_parser("synth", help="generate a synthetic cohort on disk")
    synth.add_argument("--config", help="YAML config whose 'synthetic' section is used")
    synth.add_argument("--seed", type=int, help="generator seed (overrides the config)")
    synth.add_argument("--out", required=True, help="output directory")

    for name, text in (("train", "cross-validate the single configured model"),
                       ("compare", "cross-validate several designs on shared folds"),
                       ("ablate", "run the sharing x activation grid")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        p.add_argument("--out", required=True, help="report directory")

    report = sub.add_parser("report", help="recompute summary.csv from folds.csv")
    report.add_argument("--out", required=True, help="report directory holding folds.csv")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _print_summary(summaries) -> None:
    for s in summaries:
        print(f"{s.model.name}\t{s.mean_cindex:.4f} +/- {s.std_cindex:.4f}")


def _run(args) -> None:
    if args.command == "synth":
        syn = SyntheticData()
        if args.config:
            cfg = ExperimentConfig.load(args.config)
            syn = cfg.synthetic or syn
        if args.seed is not None:
            syn = replace(syn, seed=args.seed)
        path = write_cohort(syn.generate(), args.out, seed=syn.seed)
        print(path)
    elif args.command == "train":
        cfg = _load(args)
        _print_summary(run_experiment(cfg, [cfg.model], args.out))
    elif args.command == "compare":
        cfg = _load(args)
        _print_summary(run_experiment(cfg, cfg.models or default_comparison(cfg.model), args.out))
    elif args.command == "ablate":
        cfg = _load(args)
        _print_summary(run_ablation(cfg, args.out))
    elif args.command == "report":
        for row in summarize_folds_csv(args.out):
            print("\t".join(str(v) for v in row))


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except Exception as exc:
        first = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cmfuse: error: {first}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
