"""Command-line entry point: ``plncf <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .driver import OUT_ENV, STAGES, ExperimentConfig, output_root, run_all, run_stage
from .errors import PLNCFError


def _int_list(text: str) -> list:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="TOML experiment config (defaults reproduce the full matrix)")
    p.add_argument("--out", help=f"output root (overrides ${OUT_ENV} and the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-run stages")
    p.add_argument("--models", nargs="+", help="restrict to these architectures, e.g. MF NeuMF-PL")
    p.add_argument("--protocols", nargs="+", choices=["loo", "ratio"], help="restrict to these split protocols")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", nargs="+", type=int, help="restrict to these seeds")
    seeds.add_argument("--seed-list", type=_int_list, dest="seed_list", help="comma-separated seeds, e.g. 42,52")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plncf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"plncf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    helps = dict(
        generate="build the synthetic survey dataset",
        train="train every (model, protocol, seed) run; completed runs are skipped",
        evaluate="rank held-out positives against 99 sampled negatives",
        cluster="silhouette grids and fixed-k separability per run",
        visualize="t-SNE overlay figures",
        report="tables, Spearman correlations and figures",
    )
    for stage in STAGES:
        sp = sub.add_parser(stage, parents=[common], help=helps[stage])
        if stage == "generate":
            sp.add_argument("--n", type=int, help="number of users")
            sp.add_argument("--reps", type=int, help="memberships per user")
            sp.add_argument("--k", type=int, help="neighbourhood size for group profiles")
            sp.add_argument("--data-seed", type=int, dest="data_seed")
    sub.add_parser("run", parents=[common], help="all stages from generate through report")
    vp = sub.add_parser("verify", help="run the oracle and property test suite")
    vp.add_argument("--tests", type=Path, help="tests directory (default: the repository's tests/)")
    vp.add_argument("pytest_args", nargs=argparse.REMAINDER, help="extra arguments passed to pytest")
    return parser


def config_from_args(args) -> ExperimentConfig:
    config = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.models:
        overrides["models"] = tuple(args.models)
    if args.protocols:
        overrides["protocols"] = tuple(args.protocols)
    seeds = args.seeds or args.seed_list
    if seeds:
        overrides["seeds"] = tuple(seeds)
    for name in ("n", "reps", "k", "data_seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(config, **overrides) if overrides else config


def _verify(args) -> int:
    tests = args.tests or Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"tests directory not found: {tests}", file=sys.stderr)
        return 2
    extra = [a for a in args.pytest_args if a != "--"]
    return subprocess.call([sys.executable, "-m", "pytest", str(tests), *extra])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return _verify(args)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        config = config_from_args(args)
        root = output_root(config, args.out)
        if args.command == "run":
            result = run_all(config, root, args.jobs)
        else:
            result = run_stage(args.command, config, root, args.jobs)
    except (PLNCFError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet and args.command in ("report", "run"):
        for name, path in sorted(result.items()):
            print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
