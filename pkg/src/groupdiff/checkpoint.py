"""Checkpoint files: "GDF1" magic, JSON manifest, raw little-endian data.

The manifest records the model config, free-form metadata (iteration
count, training mode, seed), and for every parameter its name, shape,
dtype, and byte offset into the data blob that follows. Loading restores
parameters bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import ValidationError
from .model import DenoiserModel, ModelConfig
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GDF1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: DenoiserModel, path, extra_meta: dict | None = None) -> None:
    meta = dict(model.meta)
    if extra_meta:
        meta.update(extra_meta)
    manifest = {"config": asdict(model.config), "meta": meta, "tensors": []}
    offset = 0
    blobs = []
    for name, tensor in model.params.items():
        dtype = str(tensor.data.dtype)
        if dtype not in _DTYPES:
            raise ValidationError(f"unsupported parameter dtype {dtype}")
        raw = np.ascontiguousarray(tensor.data, dtype=_DTYPES[dtype]).tobytes()
        manifest["tensors"].append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": dtype,
            "offset": offset,
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> DenoiserModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen))
        data = f.read()
    config = ModelConfig(**manifest["config"])
    params: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise ValidationError(f"unsupported parameter dtype {dtype}")
        np_dtype = np.dtype(_DTYPES[dtype])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        raw = data[start:start + count * np_dtype.itemsize]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        params[entry["name"]] = Tensor(arr.astype(dtype), requires_grad=True)
    return DenoiserModel(config, params=params, meta=manifest["meta"])
