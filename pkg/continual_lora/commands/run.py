"""
`run`: the full continual personalization protocol
"""

import argparse

import structlog

from continual_lora.commands.common import (
    EXIT_FAILURE,
    EXIT_OK,
    add_experiment_arguments,
    experiment_config_from_args,
    jobs_from_args,
    print_config,
)
from continual_lora.services.experiment_runner import run_experiment

logger = structlog.get_logger()


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="Run strategies x orderings x seeds and write results")
    add_experiment_arguments(parser)
    parser.add_argument("--no-figures", action="store_true", help="Skip the HTML heatmap and curve figures")
    parser.set_defaults(handler=cmd_run)


def cmd_run(args: argparse.Namespace) -> int:
    config = experiment_config_from_args(args)
    if args.print_config:
        return print_config(config)

    result = run_experiment(
        config,
        out_dir=config.output_dir,
        jobs=jobs_from_args(args),
        progress=not args.quiet,
        figures=not args.no_figures,
        log_level=args.log_level,
        json_logs=args.log_json,
    )
    if result.failed:
        logger.error(
            "Some runs failed; partial results kept",
            failed=[list(r.key) for r in result.failed],
            manifest=str(config.output_dir / "manifest.json"),
        )
        return EXIT_FAILURE
    return EXIT_OK
