"""
`inspect`: describe the tensors in an adapter or weights file
"""

import argparse
from typing import Any, Dict

import numpy as np

from continual_lora.commands.common import EXIT_OK, print_json
from continual_lora.services.adapter_io import (
    LORA_A_SUFFIX,
    LORA_B_SUFFIX,
    TensorFile,
    read_tensor_file,
    tensors_to_adapter_file,
)
from continual_lora.services.numkit import SVD_MAX_SMALL_DIM, frobenius_norm, numerical_rank


def register(subparsers) -> None:
    parser = subparsers.add_parser("inspect", help="Print tensor names, shapes, ranks and norms as JSON")
    parser.add_argument("path", help="Adapter or weights file")
    parser.set_defaults(handler=cmd_inspect)


def describe_tensor(tensor_file: TensorFile, name: str) -> Dict[str, Any]:
    tensor = tensor_file.tensors[name]
    entry: Dict[str, Any] = {"dtype": tensor_file.dtype_of(name), "shape": list(tensor.shape)}
    matrix = tensor.astype(np.float64)
    if matrix.ndim == 2 and np.all(np.isfinite(matrix)):
        entry["frobenius_norm"] = frobenius_norm(matrix) if matrix.size else 0.0
        entry["rank"] = numerical_rank(matrix) if min(matrix.shape) <= SVD_MAX_SMALL_DIM else None
    return entry


def describe_file(tensor_file: TensorFile) -> Dict[str, Any]:
    report: Dict[str, Any] = {
        "tensors": {name: describe_tensor(tensor_file, name) for name in sorted(tensor_file.tensors)},
        "metadata": dict(sorted(tensor_file.metadata.items())),
    }
    if any(name.endswith((LORA_A_SUFFIX, LORA_B_SUFFIX)) for name in tensor_file.tensors):
        adapters = tensors_to_adapter_file(tensor_file).adapters
        report["adapters"] = {
            name: {
                "rank": adapter.rank,
                "shape": list(adapter.shape),
                "scale": adapter.scale,
                "a_numerical_rank": report["tensors"][name + LORA_A_SUFFIX].get("rank"),
            }
            for name, adapter in adapters.items()
        }
    return report


def cmd_inspect(args: argparse.Namespace) -> int:
    print_json(describe_file(read_tensor_file(args.path)))
    return EXIT_OK
