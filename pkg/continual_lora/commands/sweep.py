"""
`sweep`: repeat the protocol over several alignment values
"""

import argparse

from continual_lora.commands.common import (
    EXIT_FAILURE,
    EXIT_OK,
    add_experiment_arguments,
    csv_floats,
    experiment_config_from_args,
    jobs_from_args,
    print_config,
    print_json,
)
from continual_lora.core.exceptions import ConfigError
from continual_lora.services.experiment_runner import DEFAULT_ALIGNMENT_RHOS, run_alignment_sweep


def register(subparsers) -> None:
    parser = subparsers.add_parser("sweep", help="Forgetting gap of merge_orth vs merge_init across rho values")
    add_experiment_arguments(parser)
    parser.add_argument(
        "--rhos",
        type=csv_floats,
        default=list(DEFAULT_ALIGNMENT_RHOS),
        help="Comma-separated alignment values (default 0.0,0.5,0.9)",
    )
    parser.set_defaults(handler=cmd_sweep)


def cmd_sweep(args: argparse.Namespace) -> int:
    config = experiment_config_from_args(args)
    if args.print_config:
        return print_config(config)
    if not args.rhos or any(not 0.0 <= rho <= 1.0 for rho in args.rhos):
        raise ConfigError(f"--rhos must be non-empty values in [0, 1], got {args.rhos}")

    payload = run_alignment_sweep(
        config,
        rhos=args.rhos,
        out_dir=config.output_dir,
        jobs=jobs_from_args(args),
        progress=not args.quiet,
        log_level=args.log_level,
        json_logs=args.log_json,
    )
    gaps = {f"{point['rho']:g}": point["gap"] for point in payload["points"]}
    print_json({"gaps": gaps, "gap_non_decreasing": payload["gap_non_decreasing"]})
    return EXIT_FAILURE if payload["failed"] else EXIT_OK
