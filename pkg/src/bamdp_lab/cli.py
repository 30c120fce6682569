"""Command-line entry point: one subcommand per phase plus run, plot-data and selfcheck.

Exit status: 0 on success, 1 when an assertion tier or phase fails, 2 on a
configuration error or missing input artifact.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import PHASES, ExperimentConfig, load_config
from .errors import ConfigurationError, LabError, MissingArtifactError
from .harness import PLOT_KINDS, emit_plot_data, run_experiment, run_phase, selfcheck

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment TOML file")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", type=Path, help="run directory (overrides the config)")
    p.add_argument("--budget", choices=("quick", "full"), default="quick")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bamdp-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for phase in PHASES:
        _common(sub.add_parser(phase, help=f"run the {phase} phase against a run directory"))
    _common(sub.add_parser("run", help="all phases in order, then the manifest"))
    plot = sub.add_parser("plot-data", help="write a plot-ready CSV from a run directory")
    _common(plot)
    plot.add_argument("--kind", choices=PLOT_KINDS, required=True)
    check = sub.add_parser("selfcheck", help="cross-module property suites")
    _common(check)
    check.add_argument("--fault", choices=("asymmetric_cost",), help="plant a known defect")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """--config, else the config stored in --out, else the defaults; then flag overrides."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.out is not None and (args.out / "config.toml").exists() and args.command != "gen":
        cfg = load_config(args.out / "config.toml")
    else:
        cfg = ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["root_seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            report = selfcheck(args.budget, args.fault)
            for line in report.lines():
                print(line)
            return EXIT_OK if report.passed else EXIT_ASSERT
        if args.command == "plot-data":
            out = args.out or Path(resolve_config(args).out)
            print(emit_plot_data(out, args.kind))
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "run":
            manifest = run_experiment(cfg)
            print(f"status={manifest.status} config_hash={manifest.config_hash} out={cfg.out}")
            for name, ok in manifest.tiers.items():
                print(f"{'PASS' if ok is not False else 'FAIL'} {name}")
            if manifest.error:
                print(f"failed phase {manifest.failed_phase}: {manifest.error}", file=sys.stderr)
            return EXIT_OK if manifest.passed else EXIT_ASSERT
        result = run_phase(cfg, args.command)
        for name, ok in result["tiers"].items():
            print(f"{'PASS' if ok is not False else 'FAIL'} {name}")
        for key, value in result["notes"].items():
            print(f"{key}: {value}")
        return EXIT_ASSERT if any(v is False for v in result["tiers"].values()) else EXIT_OK
    except (ConfigurationError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
