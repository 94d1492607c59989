"""
Continual LoRA command line
Batch tool for continual adapter personalization experiments
"""

import argparse
import sys
from typing import List, Optional

import structlog

from continual_lora import __version__
from continual_lora.commands import inspect, merge, metrics, run, sweep
from continual_lora.commands.common import EXIT_FAILURE, EXIT_USAGE
from continual_lora.core.config import get_settings
from continual_lora.core.exceptions import ConfigError, ContinualLoraError
from continual_lora.core.logging import configure_logging

logger = structlog.get_logger()

COMMANDS = (run, merge, metrics, inspect, sweep)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigError instead of exiting"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="continual-lora", description="Continual LoRA merging strategies and metrics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default from CLORA_LOG_LEVEL)"
    )
    parser.add_argument("--log-json", action="store_true", default=None, help="Render logs as JSON lines")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    subparsers.required = True
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE

    args.log_level = (args.log_level or settings.log_level).upper()
    args.log_json = settings.log_json if args.log_json is None else args.log_json
    configure_logging(args.log_level, args.log_json)

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("Invalid configuration", command=args.command, error=str(e))
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except (ContinualLoraError, OSError) as e:
        logger.error("Command failed", command=args.command, error=str(e), error_type=type(e).__name__)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
