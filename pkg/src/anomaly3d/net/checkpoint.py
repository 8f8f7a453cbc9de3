"""Versioned binary container for model and template files.

Layout (all integers little-endian)::

    8 bytes   magic  b"A3DCKPT\\0"
    uint32    format version (currently 1)
    uint32    header length H in bytes
    H bytes   UTF-8 JSON header
    payload   concatenated little-endian float32 tensors

The header holds a ``kind`` string, free-form metadata and a ``tensors`` list
of ``{name, shape, offset, count}`` records, where ``offset`` and ``count``
are in float32 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from ..errors import FormatError
from ..io import atomic_write_bytes
from .model import ModelConfig, ModelParams

MAGIC = b"A3DCKPT\0"
VERSION = 1


def pack(kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    records, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t, dtype="<f4")
        records.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"kind": kind, "meta": dict(meta), "tensors": records},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def unpack(data: bytes) -> Tuple[str, Dict, Dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError("not a checkpoint container (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container header: {exc}") from None
    payload = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    tensors = {}
    for rec in header["tensors"]:
        end = rec["offset"] + rec["count"]
        if end > payload.size:
            raise FormatError(f"tensor {rec['name']} runs past the payload")
        tensors[rec["name"]] = payload[rec["offset"]:end].astype(np.float32).reshape(rec["shape"])
    return header["kind"], header["meta"], tensors


def write_container(path, kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, pack(kind, meta, tensors))


def read_container(path, expect_kind: str = None):
    with open(path, "rb") as f:
        kind, meta, tensors = unpack(f.read())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind!r} container, found {kind!r}")
    return kind, meta, tensors


def save_model(path, params: ModelParams, optimizer: Mapping[str, np.ndarray] = None,
               meta: Mapping = None) -> None:
    """Parameters, optional optimizer moments (``adam.m.*``/``adam.v.*``) and step."""
    tensors = dict(params.tensors)
    for name, t in (optimizer or {}).items():
        tensors[name] = t
    info = {"config": params.config.to_dict(), "step": int(params.step), **(meta or {})}
    write_container(path, "model", info, tensors)


def load_model(path) -> Tuple[ModelParams, Dict[str, np.ndarray], Dict]:
    _, meta, tensors = read_container(path, "model")
    cfg = ModelConfig(**meta["config"])
    from .model import param_shapes
    names = list(param_shapes(cfg))
    missing = [n for n in names if n not in tensors]
    if missing:
        raise FormatError(f"checkpoint lacks tensors {missing[:3]}")
    params = ModelParams(cfg, {n: tensors[n] for n in names}, int(meta["step"]))
    opt = {n: t for n, t in tensors.items() if n.startswith("adam.")}
    return params, opt, meta
