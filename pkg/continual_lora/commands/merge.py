"""
`merge`: apply saved adapters to a saved base model
"""

import argparse

import structlog

from continual_lora.commands.common import EXIT_OK, print_json
from continual_lora.core.exceptions import ConfigError
from continual_lora.models.schemas import StrategyKind
from continual_lora.services.adapter_io import DTYPES, load_adapters, load_weights, save_weights
from continual_lora.services.numkit import frobenius_norm
from continual_lora.services.strategies import merge_adapter_sets

logger = structlog.get_logger()


def register(subparsers) -> None:
    parser = subparsers.add_parser("merge", help="Merge adapter files into base weights")
    parser.add_argument("base", help="Base weights file with <layer>.weight tensors")
    parser.add_argument("adapters", nargs="*", help="Adapter files, applied in the given order")
    parser.add_argument(
        "--strategy",
        choices=[kind.value for kind in StrategyKind],
        default=StrategyKind.MERGE_INIT.value,
        help="magmax selects factors before one merge; the others sum deltas in order",
    )
    parser.add_argument("--out", required=True, help="Output weights file")
    parser.add_argument("--dtype", choices=sorted(DTYPES), default="F64", help="Stored precision of the output")
    parser.set_defaults(handler=cmd_merge)


def cmd_merge(args: argparse.Namespace) -> int:
    if not args.adapters:
        raise ConfigError("merge needs at least one adapter file")

    base = load_weights(args.base)
    adapter_sets = [load_adapters(path) for path in args.adapters]
    merged = merge_adapter_sets(base, adapter_sets, kind=args.strategy, labels=list(args.adapters))
    save_weights(args.out, merged, dtype=args.dtype)

    logger.info("Merged weights written", out=args.out, strategy=args.strategy, adapters=len(adapter_sets))
    print_json(
        {
            "out": args.out,
            "strategy": args.strategy,
            "adapters": len(adapter_sets),
            "layers": {name: {"shape": list(w.shape), "frobenius_norm": frobenius_norm(w)} for name, w in merged},
        }
    )
    return EXIT_OK
