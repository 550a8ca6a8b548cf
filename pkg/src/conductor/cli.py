"""Command line entry point: ``conductor <subcommand> --config <path>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .workbench import STAGES, ConfigError, StageError, Workbench, default_config_text, load_config, run_pipeline

log = logging.getLogger("conductor")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conductor", description="Neuron conductance workbench for a toy cross-encoder.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run-pipeline",):
        sp = sub.add_parser(name, help="run every stage in order" if name == "run-pipeline" else f"run the {name} stage")
        sp.add_argument("--config", required=True, type=Path, help="TOML config file")
        sp.add_argument("--out", type=Path, default=None,
                        help="artifact directory (default: $CONDUCTOR_OUT or ./conductor-out)")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for attribution")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    ex = sub.add_parser("example-config", help="print a documented default config")
    ex.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_out(arg: Path | None) -> Path:
    if arg is not None:
        return arg
    return Path(os.environ.get("CONDUCTOR_OUT") or "conductor-out")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "example-config":
        sys.stdout.write(default_config_text())
        return 0
    if args.workers < 1:
        print("conductor: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError, TypeError, ValueError) as e:
        print(f"conductor: bad config: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = resolve_out(args.out)
    try:
        if args.command == "run-pipeline":
            manifest = run_pipeline(cfg, out, args.workers, args.config)
        else:
            wb = Workbench(cfg, out, args.workers)
            wb.run_stage(args.command, args.config)
            manifest = out / "manifest.json"
    except StageError as e:
        print(f"conductor: {e}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
