"""Checkpoint container: named float32 tensors plus JSON metadata.

Backed by safetensors.  The metadata dict is stored as one JSON string under
the ``cdamd`` key so the header serialises in a fixed order.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import CheckpointError, FormatError

META_KEY = "cdamd"


def save_checkpoint(path, tensors: dict, metadata: dict, force: bool = False):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force=True (--force) to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = {k: v.detach().to(torch.float32).contiguous().clone() for k, v in tensors.items()}
    tmp = path.with_name(path.name + ".tmp")
    save_file(flat, os.fspath(tmp), metadata={META_KEY: json.dumps(metadata, sort_keys=True)})
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(tensors, metadata)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with safe_open(os.fspath(path), framework="pt") as f:
            meta = json.loads((f.metadata() or {}).get(META_KEY, "{}"))
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except (OSError, ValueError, RuntimeError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    return tensors, meta


def state_to_tensors(module: torch.nn.Module) -> dict:
    return {k: v for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, tensors: dict):
    own = module.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    module.load_state_dict({k: tensors[k].to(own[k].dtype) for k in own})
    return module
