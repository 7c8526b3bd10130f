"""Binary checkpoints: magic, JSON header, then little-endian tensor payloads.

Layout::

    b"ADAPTCKP" | uint32 LE header length | header (UTF-8 JSON) | payload

The header lists every tensor as ``{name, group, shape, dtype, offset,
nbytes}`` with offsets relative to the payload start.  ``group`` is ``param``,
``adam_m`` or ``adam_v``.  Float32 models store ``<f4``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .numerics import RandomSource
from .training import TrainConfig, TrainState, init_state

MAGIC = b"ADAPTCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _le(dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def save_checkpoint(state: TrainState, path: Path) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    groups = [("param", dict(state.model.named_parameters()))]
    groups.append(("adam_m", state.optimizer.m))
    groups.append(("adam_v", state.optimizer.v))
    for group, tensors in groups:
        for name, t in tensors.items():
            arr = t.data if group == "param" else t
            raw = np.ascontiguousarray(arr, dtype=_le(arr.dtype)).tobytes()
            entries.append({"name": name, "group": group, "shape": list(arr.shape),
                            "dtype": _le(arr.dtype), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": state.cfg.to_dict(),
        "epoch": state.epoch,
        "optimizer_step": state.optimizer.t,
        "rng": {k: r.get_state() for k, r in state.rngs.items()},
        "history": state.history,
        "tensors": entries,
    }
    head = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    return path


def read_header(path: Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r} (expected {FORMAT_VERSION})")
    return header, data[12 + n :]


def load_checkpoint(path: Path) -> TrainState:
    header, payload = read_header(path)
    state = init_state(TrainConfig.from_dict(header["config"]))
    params = dict(state.model.named_parameters())
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        name = e["name"]
        if e["group"] == "param":
            if name not in params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            params[name].data = arr.astype(params[name].dtype)
        else:
            store = state.optimizer.m if e["group"] == "adam_m" else state.optimizer.v
            store[name] = arr.astype(store[name].dtype)
    state.epoch = header["epoch"]
    state.optimizer.t = header["optimizer_step"]
    state.rngs = {k: RandomSource.from_state(s) for k, s in header["rng"].items()}
    state.history = header["history"]
    return state
