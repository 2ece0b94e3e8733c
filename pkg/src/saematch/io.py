"""SAEM tensor container, permutation JSON files and CSV reports.

SAEM layout (all integers little-endian)::

    b"SAEM" | u32 version = 1 | u64 header_len | header JSON (UTF-8) | payload

The header is ``{"tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
"meta": {...}}``; offsets are relative to the payload start and tensors are
row-major little-endian ``f32`` or ``f64``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assignment import Permutation
from .errors import (
    BadMagicError,
    DimensionError,
    MalformedHeaderError,
    MissingTensorError,
    OutOfBoundsError,
    OverlapError,
    SaeMatchError,
    ShapeError,
    UnsupportedVersionError,
)
from .matching import MatchResult
from .sae_model import ActivationBatch, SaeParams

MAGIC = b"SAEM"
VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
SAE_TENSORS = ("w_enc", "b_enc", "w_dec", "b_dec", "theta")


# -- container ---------------------------------------------------------------------

def encode_container(tensors: dict, meta: dict, dtype: str = "f64") -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    np_dtype = DTYPES[dtype]
    entries, chunks, offset = {}, [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes(order="C")
        entries[name] = {"dtype": dtype, "shape": list(np.shape(arr)),
                         "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def _int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedHeaderError(f"{what} must be an integer, got {value!r}")
    return value


def decode_container(blob: bytes) -> tuple[dict, dict]:
    """Parse SAEM bytes into ``(tensors, meta)``; tensors come back as float64 arrays."""
    if len(blob) < PREAMBLE.size:
        if not MAGIC.startswith(bytes(blob[:4])):
            raise BadMagicError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}")
        raise OutOfBoundsError(f"file is {len(blob)} bytes, shorter than the {PREAMBLE.size}-byte preamble")
    magic, version, header_len = PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported SAEM version {version}")
    payload_start = PREAMBLE.size + header_len
    if payload_start > len(blob):
        raise OutOfBoundsError(f"header length {header_len} runs past end of file")
    try:
        header = json.loads(blob[PREAMBLE.size:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), dict) \
            or not isinstance(header.get("meta"), dict):
        raise MalformedHeaderError("header must be an object with 'tensors' and 'meta' objects")
    payload_len = len(blob) - payload_start
    spans = []
    parsed = {}
    for name, desc in header["tensors"].items():
        if not isinstance(desc, dict):
            raise MalformedHeaderError(f"tensor {name!r} descriptor must be an object")
        try:
            dtype = DTYPES[desc["dtype"]]
            shape = desc["shape"]
            offset = _int(desc["offset"], f"{name}.offset")
            nbytes = _int(desc["nbytes"], f"{name}.nbytes")
        except KeyError as exc:
            raise MalformedHeaderError(f"tensor {name!r}: missing or unknown field {exc}") from None
        if not isinstance(shape, list) or any(_int(s, f"{name}.shape") < 0 for s in shape):
            raise MalformedHeaderError(f"tensor {name!r} shape must be a list of non-negative ints")
        if offset < 0 or nbytes < 0:
            raise OutOfBoundsError(f"tensor {name!r} has negative offset or size")
        if nbytes != math.prod(shape) * dtype.itemsize:
            raise ShapeError(f"tensor {name!r}: nbytes {nbytes} != prod({shape}) * {dtype.itemsize}")
        if offset + nbytes > payload_len:
            raise OutOfBoundsError(
                f"tensor {name!r} spans [{offset}, {offset + nbytes}) but payload has {payload_len} bytes")
        spans.append((offset, offset + nbytes, name))
        parsed[name] = (dtype, shape, offset, nbytes)
    reach, owner = 0, None
    for start, end, name in sorted(s for s in spans if s[1] > s[0]):
        if start < reach:
            raise OverlapError(f"tensors {owner!r} and {name!r} overlap")
        if end > reach:
            reach, owner = end, name
    tensors = {}
    for name, (dtype, shape, offset, nbytes) in parsed.items():
        start = payload_start + offset
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors, header["meta"]


def tensor_dtypes(path) -> dict[str, str]:
    """Declared storage dtype of each tensor in a SAEM file."""
    blob = Path(path).read_bytes()
    _, _, header_len = PREAMBLE.unpack_from(blob)
    header = json.loads(blob[PREAMBLE.size:PREAMBLE.size + header_len])
    return {name: d["dtype"] for name, d in header["tensors"].items()}


# -- SAE / activations -----------------------------------------------------------------

def write_sae(sae: SaeParams, path, dtype: str = "f64", extra_meta: dict | None = None) -> None:
    meta = {"kind": "sae", "layer_id": sae.layer_id, "folded": sae.folded}
    if extra_meta:
        meta.update({k: v for k, v in extra_meta.items() if k not in meta})
    tensors = {name: getattr(sae, name) for name in SAE_TENSORS}
    Path(path).write_bytes(encode_container(tensors, meta, dtype))


def _meta_field(meta: dict, key: str, kind, default=None):
    if key not in meta:
        if default is not None:
            return default
        raise MalformedHeaderError(f"meta is missing {key!r}")
    value = meta[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise MalformedHeaderError(f"meta.{key} must be an integer")
    if kind is bool and not isinstance(value, bool):
        raise MalformedHeaderError(f"meta.{key} must be a boolean")
    if kind is str and not isinstance(value, str):
        raise MalformedHeaderError(f"meta.{key} must be a string")
    return value


def sae_from_bytes(blob: bytes) -> SaeParams:
    tensors, meta = decode_container(blob)
    if _meta_field(meta, "kind", str) != "sae":
        raise MalformedHeaderError(f"expected kind 'sae', got {meta['kind']!r}")
    missing = [n for n in SAE_TENSORS if n not in tensors]
    if missing:
        raise MissingTensorError(f"SAE file lacks tensors {missing}")
    layer_id = _meta_field(meta, "layer_id", int)
    folded = _meta_field(meta, "folded", bool)
    w_enc = tensors["w_enc"]
    if w_enc.ndim != 2:
        raise ShapeError(f"w_enc must be 2-D, got shape {list(w_enc.shape)}")
    n_feat, d = w_enc.shape
    expected = {"b_enc": (n_feat,), "w_dec": (d, n_feat), "b_dec": (d,), "theta": (n_feat,)}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(f"{name} has shape {list(tensors[name].shape)}, expected {list(shape)}")
    try:
        return SaeParams(*(tensors[n] for n in SAE_TENSORS), layer_id=layer_id, folded=folded)
    except DimensionError as exc:  # pragma: no cover - shapes checked above
        raise ShapeError(str(exc)) from None


def read_sae(path) -> SaeParams:
    return sae_from_bytes(Path(path).read_bytes())


def write_activations(batch: ActivationBatch, path, dtype: str = "f64") -> None:
    meta = {"kind": "activations", "layer_id": batch.layer_id, "folded": False,
            "activation_kind": batch.kind}
    Path(path).write_bytes(encode_container({"data": batch.data}, meta, dtype))


def activations_from_bytes(blob: bytes) -> ActivationBatch:
    tensors, meta = decode_container(blob)
    if _meta_field(meta, "kind", str) != "activations":
        raise MalformedHeaderError(f"expected kind 'activations', got {meta['kind']!r}")
    if "data" not in tensors:
        raise MissingTensorError("activation file lacks tensor 'data'")
    data = tensors["data"]
    if data.ndim != 2:
        raise ShapeError(f"activation data must be 2-D, got shape {list(data.shape)}")
    kind = _meta_field(meta, "activation_kind", str, default="hidden")
    return ActivationBatch(data, kind, _meta_field(meta, "layer_id", int))


def read_activations(path) -> ActivationBatch:
    return activations_from_bytes(Path(path).read_bytes())


# -- permutations -----------------------------------------------------------------------

@dataclass(frozen=True)
class PermutationRecord:
    permutation: Permutation
    total_cost: float | None = None
    per_pair_mse: np.ndarray | None = None
    config_fingerprint: str = ""


def permutation_document(obj) -> dict:
    if isinstance(obj, MatchResult):
        p = obj.permutation
        total, per_pair, fp = obj.total_cost, [float(v) for v in obj.per_pair_mse], obj.config_fingerprint
    elif isinstance(obj, PermutationRecord):
        p = obj.permutation
        total = obj.total_cost
        per_pair = None if obj.per_pair_mse is None else [float(v) for v in obj.per_pair_mse]
        fp = obj.config_fingerprint
    else:
        p, total, per_pair, fp = obj, None, None, ""
    return {
        "from_layer": p.from_layer,
        "to_layer": p.to_layer,
        "provenance": p.provenance,
        "map": [int(i) for i in p.map],
        "total_cost": None if total is None else float(total),
        "per_pair_mse": per_pair,
        "config_fingerprint": fp,
    }


def write_permutation(obj, path) -> None:
    """Write a Permutation, MatchResult or PermutationRecord as JSON."""
    doc = permutation_document(obj)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def permutation_from_document(doc) -> PermutationRecord:
    if not isinstance(doc, dict):
        raise MalformedHeaderError("permutation file must hold a JSON object")
    try:
        m = doc["map"]
        p = Permutation(m, doc["from_layer"], doc["to_layer"], doc.get("provenance", "exact"))
    except KeyError as exc:
        raise MalformedHeaderError(f"permutation file lacks {exc}") from None
    except (TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"invalid permutation: {exc}") from None
    per_pair = doc.get("per_pair_mse")
    if per_pair is not None:
        per_pair = np.asarray(per_pair, dtype=np.float64)
        if per_pair.shape != (len(p),):
            raise ShapeError(f"per_pair_mse has {per_pair.size} entries, map has {len(p)}")
    total = doc.get("total_cost")
    return PermutationRecord(p, None if total is None else float(total), per_pair,
                             doc.get("config_fingerprint", ""))


def read_permutation(path) -> PermutationRecord:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: not valid JSON: {exc}") from None
    try:
        return permutation_from_document(doc)
    except SaeMatchError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def match_result_from_record(rec: PermutationRecord, weight_set="encoder_decoder_bias",
                             folded: bool = True) -> MatchResult:
    from .assignment import WeightSet

    if rec.per_pair_mse is None:
        raise MissingTensorError("permutation file carries no per-pair costs")
    total = rec.total_cost if rec.total_cost is not None else float(np.sum(rec.per_pair_mse))
    return MatchResult(rec.permutation, total, rec.per_pair_mse, WeightSet.parse(weight_set),
                       folded, rec.config_fingerprint)


# -- CSV reports ------------------------------------------------------------------------------

def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


def write_report_csv(rows, path, columns=None) -> None:
    """RFC 4180 CSV with a header row; reals written with 17 significant digits."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(c)) for c in columns])
