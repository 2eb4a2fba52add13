"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"STNOCKPT"
    u32       format version (1)
    u32       header length L
    L bytes   UTF-8 JSON header: {"config": {...}, "step": int, "extra": {...},
              "tensors": [names in file order]}
    repeated for every tensor:
        u16       name length, then the UTF-8 name
        u8        ndim, then ndim x u32 dims
        f32[...]  values, C order

Optimizer moments are stored as ordinary tensors under ``adam.m.<param>``
and ``adam.v.<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"STNOCKPT"
VERSION = 1


class CheckpointError(OSError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], header: dict) -> None:
    """Write atomically: a crash mid-write leaves the previous file intact."""
    head = dict(header, tensors=list(tensors))
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    tensors = {}
    try:
        for _ in header["tensors"]:
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            count = int(np.prod(shape))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated") from exc
    return header, tensors


def save_checkpoint(path, model, step: int = 0, optimizer=None, extra: Optional[dict] = None) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in optimizer.v.items():
            tensors[f"adam.v.{name}"] = arr
    header = {"config": model.config.to_dict(), "step": int(step),
              "optimizer_step": int(optimizer.step) if optimizer is not None else 0,
              "extra": extra or {}}
    save_tensors(path, tensors, header)


def load_checkpoint(path, optimizer=None):
    """Rebuild the model stored at ``path``; returns ``(model, header)``.

    When ``optimizer`` is given its moments and step counter are restored.
    """
    from .model import STNO, ModelConfig

    header, tensors = load_tensors(path)
    model = STNO(ModelConfig(**header["config"]))
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state_dict(params)
    if optimizer is not None:
        optimizer.m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
        optimizer.v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
        optimizer.step = header.get("optimizer_step", 0)
    return model, header
