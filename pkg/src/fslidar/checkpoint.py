"""Byte-stable checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, a JSON header
(sorted keys) describing every tensor, then the raw little-endian tensor
bytes in header order.  Adapter tensors live under the ``lora.`` namespace.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .lora import LoraAdapter, adapters
from .network import SegmentationModel

MAGIC = b"FSLCKPT1"
SCALE_KEY = "buffer.input_scale"


def to_bytes(model: SegmentationModel) -> bytes:
    tensors = [(SCALE_KEY, model.input_scale, True)]
    tensors += [(n, p.value, p.frozen) for n, p in model.parameters().items()]
    entries, chunks, offset = [], [], 0
    for name, arr, frozen in tensors:
        data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": np.dtype(arr.dtype).str.lstrip("<>|="),
                        "shape": list(arr.shape), "frozen": bool(frozen),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "config": {
            "in_channels": model.in_channels, "widths": list(model.widths),
            "n_base": model.n_base, "n_novel": model.n_novel, "seed": model.seed,
            "dtype": model.dtype.str.lstrip("<>|="), "projection": model.projection,
        },
        "tensors": entries,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(chunks)


def from_bytes(blob: bytes) -> SegmentationModel:
    if blob[:8] != MAGIC:
        raise MalformedFile("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    body = memoryview(blob)[16 + n:]
    cfg = header["config"]
    model = SegmentationModel(cfg["in_channels"], tuple(cfg["widths"]), cfg["n_base"], cfg["seed"],
                              np.dtype("<" + cfg["dtype"]), cfg["projection"])
    if cfg["n_novel"]:
        model.attach_novel_head(cfg["n_novel"], 0.0)

    arrays = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = (np.frombuffer(chunk, dtype="<" + e["dtype"]).reshape(e["shape"]).copy(),
                             e["frozen"])

    rng = np.random.default_rng(0)
    for name, (arr, frozen) in arrays.items():
        if name.startswith("lora.") and name.endswith(".A"):
            layer = name.split(".")[1]
            B = arrays[f"lora.{layer}.B"][0]
            conv = model.layers[layer]
            conv.adapter = LoraAdapter(layer, B.shape[0], arr.shape[1], arr.shape[0], rng, model.dtype)
    params = model.parameters()
    for name, (arr, frozen) in arrays.items():
        if name == SCALE_KEY:
            model.input_scale = arr
            continue
        if name not in params:
            raise MalformedFile(f"checkpoint tensor {name!r} has no matching parameter")
        p = params[name]
        if p.value.shape != arr.shape:
            raise MalformedFile(f"{name}: shape {arr.shape} vs model {p.value.shape}")
        p.value = arr
        p.grad = np.zeros_like(arr)
        p.frozen = frozen
    return model


def save_checkpoint(path, model: SegmentationModel) -> str:
    """Write the checkpoint and return its SHA-256."""
    blob = to_bytes(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> SegmentationModel:
    return from_bytes(Path(path).read_bytes())


def has_adapters(model: SegmentationModel) -> bool:
    return bool(adapters(model))
