"""
`dtnlab <command> --config <path> [--set key=value ...] [--out <dir>]`
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .commands import COMMANDS
from .runtime import Runtime


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtnlab",
        description="Multi-task CTR/CVR experiments with diversified feature interactions.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="what to run")
    parser.add_argument("--config", required=True, help="experiment config (TOML, or a resolved JSON echo)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config value, e.g. --set training.seed=7 (repeatable)",
    )
    parser.add_argument("--out", default=None, help="output directory (default: $DTNLAB_OUTPUT_ROOT/<run name>)")
    parser.add_argument("--log-level", default=None, help="overrides $DTNLAB_LOG_LEVEL")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    runtime = Runtime(log_level=args.log_level)
    command = COMMANDS[args.command](args.config, args.overrides, args.out, runtime)
    return Runtime.run_app(command)


if __name__ == "__main__":
    sys.exit(main())
