"""
Arguments and config resolution shared by the experiment commands
"""

import argparse
import json
import sys
from typing import Any, Dict, List

from continual_lora.core.config import dump_experiment_config, get_settings, resolve_experiment_config
from continual_lora.models.schemas import PRESETS, ExperimentConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def csv_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def csv_ints(value: str) -> List[int]:
    try:
        return [int(item) for item in csv_list(value)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from e


def csv_floats(value: str) -> List[float]:
    try:
        return [float(item) for item in csv_list(value)]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from e


def add_experiment_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="Flat JSON experiment config")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Task-family preset")
    parser.add_argument("--strategies", type=csv_list, default=None, help="Comma-separated strategy names")
    parser.add_argument("--orderings", type=csv_ints, default=None, help="Comma-separated task ordering seeds")
    parser.add_argument("--run-seeds", type=csv_ints, default=None, help="Comma-separated run seeds")
    parser.add_argument("--jobs", type=int, default=None, help="Worker processes (0 = one per processor)")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Master seed for W0 and the task set")
    parser.add_argument("--rho", type=float, default=None, help="Cross-task alignment in [0, 1]")
    parser.add_argument("--tasks", type=int, default=None, help="Number of tasks T")
    parser.add_argument("--print-config", action="store_true", help="Print the resolved config and exit")
    parser.add_argument("--quiet", action="store_true", help="Hide the progress bar")


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "strategies": args.strategies,
        "ordering_seeds": args.orderings,
        "run_seeds": args.run_seeds,
        "output_dir": args.out,
        "master_seed": args.seed,
        "rho": args.rho,
        "T": args.tasks,
    }


def experiment_config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    return resolve_experiment_config(
        config_path=args.config,
        overrides=overrides_from_args(args),
        preset=args.preset,
    )


def jobs_from_args(args: argparse.Namespace) -> int:
    return get_settings().default_jobs if args.jobs is None else args.jobs


def print_config(config: ExperimentConfig) -> int:
    sys.stdout.write(dump_experiment_config(config) + "\n")
    return EXIT_OK


def print_json(payload: Any, compact: bool = False) -> None:
    if compact:
        sys.stdout.write(json.dumps(payload, separators=(",", ":")) + "\n")
    else:
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")

