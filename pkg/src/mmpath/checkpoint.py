"""Single-file checkpoints: ``MMP1`` magic, u64 header length, JSON header, f32 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MMP1"
FORMAT_VERSION = 1


def save_checkpoint(path, state: dict[str, torch.Tensor], header: dict) -> None:
    manifest, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.asarray(state[name].detach().cpu().numpy(), dtype="<f4", order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header, format_version=FORMAT_VERSION, parameters=manifest)
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not an MMP1 checkpoint")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = data[12 + n:]
    state = {}
    for p in header["parameters"]:
        count = int(np.prod(p["shape"])) if p["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=p["offset"]).reshape(tuple(p["shape"]))
        state[p["name"]] = torch.from_numpy(arr.astype(np.float32))
    return state, header
