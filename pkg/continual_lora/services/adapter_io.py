"""
Adapter and weights files in the safetensors container layout.

    [8 bytes little-endian u64 N][N bytes JSON header][raw little-endian payloads]

The header maps tensor names to {"dtype", "shape", "data_offsets"} with offsets
relative to the payload start, plus an optional "__metadata__" string map.
LoRA factors are stored as "<layer>.lora_A" / "<layer>.lora_B"; plain weights
as "<layer>.weight". Tensors with other names are carried through untouched.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
import structlog

from continual_lora.core.exceptions import (
    AdapterFormatError,
    HeaderError,
    OffsetOverlapError,
    TruncatedPayloadError,
    UnknownDtypeError,
)
from continual_lora.services.adapter import AdapterSet, BaseWeights, LoraAdapter

logger = structlog.get_logger()

DTYPES: Dict[str, np.dtype] = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
METADATA_KEY = "__metadata__"
MAX_HEADER_BYTES = 100_000_000
HEADER_ALIGN = 8
LORA_A_SUFFIX = ".lora_A"
LORA_B_SUFFIX = ".lora_B"
WEIGHT_SUFFIX = ".weight"


@dataclass
class TensorFile:
    """Raw file contents: tensors keep the dtype they were stored with"""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def dtype_of(self, name: str) -> str:
        return dtype_name(self.tensors[name].dtype)


@dataclass
class AdapterFile:
    adapters: AdapterSet = field(default_factory=dict)
    dtypes: Dict[str, str] = field(default_factory=dict)
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)


def dtype_name(dtype: np.dtype) -> str:
    for name, dt in DTYPES.items():
        if np.dtype(dtype) == dt or np.dtype(dtype).newbyteorder("<") == dt:
            return name
    raise UnknownDtypeError(f"Unsupported dtype {dtype}")


def encode_tensors(tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping[str, str]] = None) -> bytes:
    """Serialize tensors (sorted by name) into the container layout"""
    header: Dict[str, object] = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        if name == METADATA_KEY:
            raise HeaderError(f"Tensor name {METADATA_KEY} is reserved")
        arr = np.asarray(tensors[name])
        dt = DTYPES[dtype_name(arr.dtype)]
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes(order="C")
        header[name] = {
            "dtype": dtype_name(dt),
            "shape": [int(d) for d in arr.shape],
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    padding = (-len(header_bytes)) % HEADER_ALIGN
    header_bytes += b" " * padding
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(payloads)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _tensor_entry(name: str, entry) -> tuple:
    """Validate one header entry and return (begin, end, dtype, shape)"""
    if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= set(entry):
        raise HeaderError(f"Tensor {name!r}: entry needs dtype, shape and data_offsets", offset=8)
    dtype = entry["dtype"]
    if not isinstance(dtype, str) or dtype not in DTYPES:
        raise UnknownDtypeError(f"Tensor {name!r}: unknown dtype {dtype!r}", offset=8)
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(_is_int(d) and d >= 0 for d in shape):
        raise HeaderError(f"Tensor {name!r}: shape must be a list of non-negative integers", offset=8)
    offsets = entry["data_offsets"]
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(_is_int(o) and o >= 0 for o in offsets)
        or offsets[0] > offsets[1]
    ):
        raise HeaderError(f"Tensor {name!r}: data_offsets must be [begin, end] with begin <= end", offset=8)
    begin, end = offsets
    expected = math.prod(shape) * DTYPES[dtype].itemsize
    if end - begin != expected:
        raise HeaderError(
            f"Tensor {name!r}: {end - begin} payload bytes for shape {shape} {dtype} (expected {expected})",
            offset=8,
        )
    return begin, end, dtype, shape


def decode_tensors(data: bytes) -> TensorFile:
    """Parse container bytes; every malformation raises an AdapterFormatError subclass.

    Payloads must tile the data section exactly: sorted by offset they start at 0,
    follow each other without overlap or gap, and end at the last byte of the file.
    """
    if len(data) < 8:
        raise HeaderError(f"File is {len(data)} bytes, shorter than the 8-byte header length field", offset=0)
    (header_len,) = struct.unpack("<Q", data[:8])
    if header_len > MAX_HEADER_BYTES:
        raise HeaderError(f"Header length {header_len} exceeds limit {MAX_HEADER_BYTES}", offset=0)
    payload_start = 8 + header_len
    if payload_start > len(data):
        raise HeaderError(f"Header length {header_len} inconsistent with file size {len(data)}", offset=0)

    try:
        header = json.loads(data[8:payload_start].decode("utf-8"))
    except (ValueError, RecursionError) as e:
        raise HeaderError(f"Header is not valid JSON: {e}", offset=8) from e
    if not isinstance(header, dict):
        raise HeaderError("Header must be a JSON object", offset=8)

    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise HeaderError(f"{METADATA_KEY} must map strings to strings", offset=8)

    payload_len = len(data) - payload_start
    spans = []
    for name, entry in header.items():
        begin, end, dtype, shape = _tensor_entry(name, entry)
        if end > payload_len:
            raise TruncatedPayloadError(
                f"Tensor {name!r}: payload ends at {end} but only {payload_len} payload bytes present",
                offset=payload_start + min(begin, payload_len),
            )
        spans.append((begin, end, name, dtype, shape))

    spans.sort(key=lambda s: (s[0], s[1], s[2]))
    cursor, previous = 0, None
    for begin, end, name, _, _ in spans:
        if begin < cursor:
            raise OffsetOverlapError(f"Tensors {previous!r} and {name!r} overlap", offset=payload_start + begin)
        if begin > cursor:
            after = f"after {previous!r}" if previous is not None else "before the first tensor"
            raise OffsetOverlapError(
                f"Tensor {name!r}: {begin - cursor} unused payload bytes {after}", offset=payload_start + cursor
            )
        cursor, previous = end, name
    if cursor != payload_len:
        raise OffsetOverlapError(
            f"{payload_len - cursor} trailing payload bytes after the last tensor", offset=payload_start + cursor
        )

    tensors: Dict[str, np.ndarray] = {}
    for begin, end, name, dtype, shape in sorted(spans, key=lambda s: s[2]):
        arr = np.frombuffer(data, dtype=DTYPES[dtype], count=math.prod(shape), offset=payload_start + begin)
        tensors[name] = arr.reshape(shape).copy()
    return TensorFile(tensors=tensors, metadata=dict(metadata))


def write_tensor_file(path: Union[str, Path], tensor_file: TensorFile) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensors(tensor_file.tensors, tensor_file.metadata))
    except OSError as e:
        raise OSError(f"Cannot write {path}: {e}") from e


def read_tensor_file(path: Union[str, Path]) -> TensorFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"Cannot read {path}: {e}") from e
    return decode_tensors(data)


def _widen(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 2:
        raise AdapterFormatError(f"Tensor {name!r} must be 2-D, got shape {list(arr.shape)}")
    out = arr.astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise AdapterFormatError(f"Tensor {name!r} contains non-finite values")
    return out


def _parse_scale(raw: str, layer: str) -> float:
    try:
        value = float(raw)
    except ValueError as e:
        raise HeaderError(f"Layer {layer!r}: scale metadata {raw!r} is not a number") from e
    if not math.isfinite(value):
        raise HeaderError(f"Layer {layer!r}: scale metadata {raw!r} is not finite")
    return value


def adapter_metadata(adapters: Mapping[str, LoraAdapter]) -> Dict[str, str]:
    metadata = {"format": "lora"}
    ranks = {a.rank for a in adapters.values()}
    scales = {a.scale for a in adapters.values()}
    if len(ranks) == 1:
        metadata["rank"] = str(ranks.pop())
    if len(scales) == 1:
        metadata["scale"] = repr(scales.pop())
    for name, adapter in adapters.items():
        metadata[f"{name}.rank"] = str(adapter.rank)
        metadata[f"{name}.scale"] = repr(adapter.scale)
    return metadata


def adapter_file_to_tensors(adapter_file: AdapterFile, default_dtype: str = "F64") -> TensorFile:
    tensors: Dict[str, np.ndarray] = dict(adapter_file.extras)
    for layer, adapter in adapter_file.adapters.items():
        for suffix, matrix in ((LORA_A_SUFFIX, adapter.a), (LORA_B_SUFFIX, adapter.b)):
            name = layer + suffix
            dtype = adapter_file.dtypes.get(name, default_dtype)
            if dtype not in DTYPES:
                raise UnknownDtypeError(f"Cannot store {name!r} as {dtype!r}")
            tensors[name] = matrix.astype(DTYPES[dtype])
    metadata = dict(adapter_file.metadata)
    metadata.update(adapter_metadata(adapter_file.adapters))
    return TensorFile(tensors=tensors, metadata=metadata)


def tensors_to_adapter_file(tensor_file: TensorFile) -> AdapterFile:
    layers = sorted(
        {name[: -len(LORA_A_SUFFIX)] for name in tensor_file.tensors if name.endswith(LORA_A_SUFFIX)}
        | {name[: -len(LORA_B_SUFFIX)] for name in tensor_file.tensors if name.endswith(LORA_B_SUFFIX)}
    )
    adapters: AdapterSet = {}
    dtypes: Dict[str, str] = {}
    for layer in layers:
        a_name, b_name = layer + LORA_A_SUFFIX, layer + LORA_B_SUFFIX
        if a_name not in tensor_file.tensors or b_name not in tensor_file.tensors:
            raise AdapterFormatError(f"Layer {layer!r} needs both {a_name!r} and {b_name!r}")
        a = _widen(a_name, tensor_file.tensors[a_name])
        b = _widen(b_name, tensor_file.tensors[b_name])
        if a.shape[0] != b.shape[1] or a.shape[0] < 1:
            raise AdapterFormatError(
                f"Layer {layer!r}: {a_name} shape {list(a.shape)} incompatible with {b_name} shape {list(b.shape)}"
            )
        raw_scale = tensor_file.metadata.get(f"{layer}.scale", tensor_file.metadata.get("scale", "1.0"))
        adapters[layer] = LoraAdapter(a=a, b=b, scale=_parse_scale(raw_scale, layer), name=layer)
        dtypes[a_name] = tensor_file.dtype_of(a_name)
        dtypes[b_name] = tensor_file.dtype_of(b_name)

    lora_names = set(dtypes)
    extras = {name: t for name, t in tensor_file.tensors.items() if name not in lora_names}
    return AdapterFile(adapters=adapters, dtypes=dtypes, extras=extras, metadata=dict(tensor_file.metadata))


def save_adapter_file(path: Union[str, Path], adapter_file: AdapterFile, dtype: str = "F64") -> None:
    write_tensor_file(path, adapter_file_to_tensors(adapter_file, default_dtype=dtype))
    logger.debug("Adapter file written", path=str(path), layers=list(adapter_file.adapters))


def load_adapter_file(path: Union[str, Path]) -> AdapterFile:
    adapter_file = tensors_to_adapter_file(read_tensor_file(path))
    if not adapter_file.adapters:
        raise AdapterFormatError(f"{path}: no '<layer>{LORA_A_SUFFIX}' / '<layer>{LORA_B_SUFFIX}' tensors found")
    return adapter_file


def save_adapter(
    path: Union[str, Path],
    adapter: Union[LoraAdapter, Mapping[str, LoraAdapter]],
    dtype: str = "F64",
    metadata: Optional[Mapping[str, str]] = None,
) -> None:
    adapters = {adapter.name: adapter} if isinstance(adapter, LoraAdapter) else dict(adapter)
    save_adapter_file(path, AdapterFile(adapters=adapters, metadata=dict(metadata or {})), dtype=dtype)


def load_adapter(path: Union[str, Path]) -> LoraAdapter:
    """Load a single-layer adapter file"""
    adapters = load_adapter_file(path).adapters
    if len(adapters) != 1:
        raise AdapterFormatError(f"{path}: expected one adapter layer, found {sorted(adapters)}")
    return next(iter(adapters.values()))


def load_adapters(path: Union[str, Path]) -> AdapterSet:
    return load_adapter_file(path).adapters


def save_weights(path: Union[str, Path], weights: BaseWeights, dtype: str = "F64") -> None:
    if dtype not in DTYPES:
        raise UnknownDtypeError(f"Cannot store weights as {dtype!r}")
    tensors = {name + WEIGHT_SUFFIX: w.astype(DTYPES[dtype]) for name, w in weights}
    metadata = {"format": "weights", "layers": ",".join(weights.names)}
    write_tensor_file(path, TensorFile(tensors=tensors, metadata=metadata))


def load_weights(path: Union[str, Path]) -> BaseWeights:
    tensor_file = read_tensor_file(path)
    found = {
        name[: -len(WEIGHT_SUFFIX)]: tensor
        for name, tensor in tensor_file.tensors.items()
        if name.endswith(WEIGHT_SUFFIX)
    }
    if not found:
        raise AdapterFormatError(f"{path}: no '<layer>{WEIGHT_SUFFIX}' tensors found")
    order = [name for name in tensor_file.metadata.get("layers", "").split(",") if name in found]
    order += sorted(set(found) - set(order))
    return BaseWeights(tuple((name, _widen(name + WEIGHT_SUFFIX, found[name])) for name in order))
