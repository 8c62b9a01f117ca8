"""Checkpoint files: ``<name>.json`` header plus ``<name>.bin`` float32 blob.

The header records the stage, a digest of the model config, the parameter
manifest (name, shape, original dtype, offset) and a digest of the blob.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import ConsistencyError, LoadError, StateError


def _le_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()


def tensor_digest(tensors: Iterable[tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(_le_bytes(t))
    return h.hexdigest()


def state_digest(module: nn.Module, prefix: str | None = None, names: Iterable[str] | None = None) -> str:
    """Digest of a module's parameters, optionally restricted by name prefix or name set."""
    wanted = None if names is None else set(names)
    items = [
        (n, p) for n, p in module.named_parameters()
        if (prefix is None or n.startswith(prefix)) and (wanted is None or n in wanted)
    ]
    return tensor_digest(items)


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(module: nn.Module, path: str | Path, stage: str, config: dict, extra: dict | None = None) -> str:
    """Write the checkpoint pair and return the blob digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, t in module.state_dict().items():
        raw = _le_bytes(t)
        manifest.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    header = {
        "stage": stage,
        "config": config,
        "config_digest": config_digest(config),
        "parameters": manifest,
        "blob_bytes": len(blob),
        "blob_sha256": digest,
        "extra": extra or {},
    }
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return digest


def read_header(path: str | Path) -> dict:
    path = Path(path).with_suffix(".json")
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    try:
        return json.loads(path.read_text())
    except ValueError as exc:
        raise LoadError(str(path), f"bad header: {exc}") from exc


def load_checkpoint(module: nn.Module, path: str | Path) -> dict:
    """Load weights into ``module`` in place; returns the header."""
    header = read_header(path)
    blob = Path(path).with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise ConsistencyError(f"checkpoint blob {path} does not match its header digest")
    state = {}
    for entry in header["parameters"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, entry["dtype"]))
    module.load_state_dict(state)
    return header
