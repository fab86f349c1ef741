"""Command-line entry point: ``obsstudy {estimate,gof,simulate,power,compare}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .parallel import THREADS_ENV, default_threads
from .runner import COMMANDS, ConfigError, RunConfig, RunError, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obsstudy", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        s = sub.add_parser(cmd)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", help="output directory (overrides config output_dir)")
        s.add_argument("--threads", type=int,
                       help=f"worker processes (default ${THREADS_ENV} or 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind: str, module: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "module": module, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw["seed"] = args.seed
        raw["threads"] = args.threads if args.threads is not None else default_threads()
        cfg = RunConfig.from_mapping(raw)
        run(cfg, args.command, args.out)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        return _fail("config", "cli_runner", str(exc), 2)
    except RunError as exc:
        return _fail("run", exc.module, exc.detail, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
