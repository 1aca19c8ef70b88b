"""Command line entry point: ``penbsde {validate,converge,simulate,diagnose}``.

Settings come from ``--config`` (YAML or JSON), then individual flags on
top. The worker count falls back to ``$PENBSDE_WORKERS`` only when
``--workers`` is not given.

Exit codes: 0 success, 1 validation failure, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import harness
from .harness import ConfigError


def _add_common(p, suppress):
    d = {"default": argparse.SUPPRESS} if suppress else {"default": None}
    p.add_argument("--config", help="YAML or JSON experiment file", **d)
    p.add_argument("--problem", help="built-in problem name", **d)
    p.add_argument("--seed", type=int, **d)
    p.add_argument("--paths", type=int, **d)
    p.add_argument("--steps", type=int, **d)
    p.add_argument("--out", help="output directory", **d)
    p.add_argument("--format", choices=("csv", "json"), **d)
    p.add_argument("--workers", help="integer or 'auto'", **d)


def build_parser():
    parser = argparse.ArgumentParser(prog="penbsde", description=__doc__.splitlines()[0])
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("validate", "geometry properties, assumption checks and exact-solution comparisons"),
        ("converge", "penalization convergence study over n_schedule"),
        ("simulate", "dump coupled sample paths as CSV"),
        ("diagnose", "coupling distances and conditional-variation criterion"),
    ):
        sp = sub.add_parser(name, help=text)
        _add_common(sp, suppress=True)
        if name == "simulate":
            sp.add_argument("--max-paths", type=int, default=100)
    return parser


def _workers(text):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"workers must be an integer or 'auto', got {text!r}", "workers") from None


def overrides_from(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over = {}
    if args.problem is not None:
        over["problem"] = args.problem
    if args.seed is not None:
        over["seed"] = args.seed
    if args.paths is not None:
        over["paths"] = args.paths
    if args.steps is not None:
        over.setdefault("grid", {})["steps"] = args.steps
    if args.out is not None:
        over["output"] = args.out
    if args.format is not None:
        over["format"] = args.format
    if args.workers is not None:
        over["workers"] = _workers(args.workers)
    elif environ.get(harness.WORKERS_ENV):
        over["env_workers"] = _workers(environ[harness.WORKERS_ENV])
    return over


def resolve_config(args, environ=None) -> harness.ExperimentConfig:
    over = overrides_from(args, environ)
    env_workers = over.pop("env_workers", None)
    raw = harness.read_config_file(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: top level must be a mapping")
    merged = harness._merge(raw, over)
    if env_workers is not None:
        merged["workers"] = env_workers
    return harness.config_from_dict(merged)


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    for k in ("config", "problem", "seed", "paths", "steps", "out", "format", "workers"):
        if not hasattr(args, k):
            setattr(args, k, None)
    try:
        cfg = resolve_config(args, environ)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "validate":
            out = harness.run_validation(cfg)
            for c in out.failures:
                print(f"FAIL {c['group']}: {c['name']} (worst {c['worst']:.3g})", file=sys.stderr)
            return out.status
        if args.command == "converge":
            harness.run_convergence(cfg)
        elif args.command == "simulate":
            for p in harness.run_simulate(cfg, args.max_paths):
                print(p)
        else:
            harness.run_diagnose(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0
