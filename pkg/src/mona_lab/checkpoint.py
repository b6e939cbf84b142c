"""Checkpoint container: JSON header (parameter names -> shapes, config hash,
stage tag) followed by concatenated 64-bit little-endian float payloads."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MONACKPT1\n"


def save_checkpoint(path, model: torch.nn.Module, config_hash: str, stage: str) -> None:
    state = model.state_dict()
    header = {"config_hash": config_hash, "stage": stage, "params": []}
    payloads = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f8")
        header["params"].append({"name": name, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).tobytes())
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for p in payloads:
            f.write(p)


def load_checkpoint(path, model: torch.nn.Module = None) -> dict:
    """Read header and arrays; if `model` is given, load weights into it."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            arrays[meta["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape)
    if model is not None:
        state = model.state_dict()
        for name, arr in arrays.items():
            if name not in state:
                raise KeyError(f"checkpoint parameter {name!r} not in model")
            state[name] = torch.as_tensor(arr.copy()).to(state[name].dtype)
        model.load_state_dict(state)
    return {"config_hash": header["config_hash"], "stage": header["stage"],
            "arrays": arrays}
