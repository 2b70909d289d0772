"""Versioned container: JSON header followed by raw little-endian arrays.

Layout: b"PRVM", uint32 version, uint32 header length, header JSON, array bytes.
The header records each array's name, dtype, shape and byte offset, plus a free
``meta`` mapping. Writing the same content twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .models import build_from_arch

MAGIC = b"PRVM"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1", "bool": "?"}


class CheckpointError(ValueError):
    pass


def write_container(path, meta: Mapping, arrays: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.asarray(a)
        dtype = a.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[_HEAD.size:_HEAD.size + hlen])
    body = memoryview(data)[_HEAD.size + hlen:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["meta"], arrays


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(sd)


def save_model(module: nn.Module, path) -> None:
    p = next(module.parameters(), None)
    meta = {"kind": "model", "arch": module.arch, "dtype": str(p.dtype).removeprefix("torch.") if p is not None else "float32"}
    write_container(path, meta, state_arrays(module))


def load_model(path) -> nn.Module:
    meta, arrays = read_container(path)
    if meta.get("kind") != "model":
        raise CheckpointError("not a model checkpoint")
    module = build_from_arch(meta["arch"])
    if meta.get("dtype") == "float64":
        module.double()
    load_state_arrays(module, arrays)
    return module
