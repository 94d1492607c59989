"""
`metrics`: average score and forgetting of a saved score matrix
"""

import argparse

from continual_lora.commands.common import EXIT_OK, print_json
from continual_lora.core.exceptions import ConfigError
from continual_lora.services.export_service import export_service
from continual_lora.services.metrics import avg_forgetting, avg_score


def register(subparsers) -> None:
    parser = subparsers.add_parser("metrics", help="Compute average score and forgetting from a scores CSV")
    parser.add_argument("scores_csv", help="CSV with header task_j,after_k,score")
    parser.add_argument("--T", dest="T", type=int, default=None, help="Task count (default: largest index in the file)")
    parser.set_defaults(handler=cmd_metrics)


def cmd_metrics(args: argparse.Namespace) -> int:
    if args.T is not None and args.T < 1:
        raise ConfigError(f"--T must be >= 1, got {args.T}")
    sm = export_service.load_heatmap(args.scores_csv, T=args.T)
    # forgetting is undefined for a single task
    forgetting = avg_forgetting(sm) if sm.T >= 2 else None
    print_json({"avg_score": avg_score(sm), "avg_forgetting": forgetting}, compact=True)
    return EXIT_OK
