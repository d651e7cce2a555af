"""Versioned checkpoint container.

Layout::

    TOPODEPTH-CKPT <version>\\n
    <JSON header: config, array table, payload size and sha256>\\n
    <payload: little-endian float64 arrays back to back>

Arrays are grouped in named sections (``cvae``, ``cvae_optim``,
``classifier``, ...) so one file format serves every network.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumMismatch, VersionMismatch

MAGIC = "TOPODEPTH-CKPT"
FORMAT_VERSION = 2


def save_checkpoint(path, sections: dict[str, dict[str, np.ndarray]], config: dict) -> None:
    table = []
    chunks = []
    offset = 0
    for section in sorted(sections):
        for name in sorted(sections[section]):
            arr = np.ascontiguousarray(np.asarray(sections[section][name], dtype="<f8"))
            table.append({"section": section, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
    payload = b"".join(chunks)
    header = {
        "config": config,
        "arrays": table,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n".encode("ascii"))
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    try:
        nl = raw.index(b"\n")
        magic, version = raw[:nl].decode("ascii").split()
        version = int(version)
    except ValueError:
        raise ChecksumMismatch(f"{path}: missing or corrupt checkpoint header") from None
    if magic != MAGIC:
        raise ChecksumMismatch(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION}); retrain or re-export the checkpoint"
        )
    try:
        nl2 = raw.index(b"\n", nl + 1)
        header = json.loads(raw[nl + 1:nl2])
    except ValueError:
        raise ChecksumMismatch(f"{path}: truncated checkpoint header") from None
    payload = raw[nl2 + 1:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch (file truncated or corrupted)")
    flat = np.frombuffer(payload, dtype="<f8")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
        sections.setdefault(entry["section"], {})[entry["name"]] = arr
    return sections, header["config"]


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in module.named_parameters()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = set(params) ^ set(arrays)
    if missing:
        raise ValueError(f"checkpoint parameters do not match model: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {arrays[name].shape}")
            p.copy_(torch.from_numpy(arrays[name]))


def optimizer_arrays(module: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in module.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        for key, value in state.items():
            out[f"{name}/{key}"] = torch.as_tensor(value).detach().to(torch.float64).numpy().copy()
    return out


def load_optimizer_arrays(module: torch.nn.Module, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]):
    for name, p in module.named_parameters():
        keys = [k for k in arrays if k.rsplit("/", 1)[0] == name]
        if not keys:
            continue
        state = {}
        for k in keys:
            key = k.rsplit("/", 1)[1]
            value = torch.from_numpy(arrays[k].copy())
            state[key] = value.to(torch.float32) if key == "step" else value.to(p.dtype)
        optimizer.state[p] = state
