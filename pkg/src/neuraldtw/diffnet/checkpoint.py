"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian u64 header length, UTF-8 JSON header,
then the raw little-endian f32 payloads in header order. The header holds
the format version, network specs, the array index (name, shape, offset),
optimizer scalars, the training config echo and the best-validation record.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import NetworkSpec, ParamStore
from .optim import AdamState

MAGIC = b"NDTWCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str  # "siamese" or "direct"
    specs: dict[str, NetworkSpec]
    params: ParamStore
    optimizer: AdamState | None = None
    config: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t}
        arrays += [(f"adam_m/{k}", v) for k, v in sorted(o.m.items())]
        arrays += [(f"adam_v/{k}", v) for k, v in sorted(o.v.items())]
    index, offset = [], 0
    for name, arr in arrays:
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes
    header = {
        "version": VERSION,
        "kind": ckpt.kind,
        "specs": {k: s.to_dict() for k, s in ckpt.specs.items()},
        "trainable": sorted(ckpt.params.trainable),
        "arrays": index,
        "optimizer": opt,
        "config": ckpt.config,
        "best": ckpt.best,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    if header["version"] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    body = memoryview(raw)[16 + hlen :]
    params, m, v = {}, {}, {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        arr = arr.astype(np.float32)
        section, name = e["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[section][name] = arr
    store = ParamStore(params, header["trainable"])
    opt = None
    if header["optimizer"] is not None:
        opt = AdamState(**header["optimizer"], m=m, v=v)
    specs = {k: NetworkSpec.from_dict(d) for k, d in header["specs"].items()}
    return Checkpoint(header["kind"], specs, store, opt, header["config"], header["best"], header.get("extra", {}))
