"""Checkpoint files: safetensors payload plus one JSON metadata entry.

All tensors (model weights, optimizer moments, RNG state) go into the
safetensors body; everything else is a JSON document stored under a
single metadata key so the header bytes are stable across rewrites.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .errors import ConfigError

FORMAT_VERSION = 1
META_KEY = "latentvsr"


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, tensors: dict, meta: dict) -> Path:
    meta = {"format_version": FORMAT_VERSION, **meta}
    body = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    data = st_save(body, metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    return atomic_write_bytes(path, data)


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    tensors = st_load(data)
    # the header is an 8-byte length followed by JSON
    n = int.from_bytes(data[:8], "little")
    header = json.loads(data[8 : 8 + n])
    raw = header.get("__metadata__", {}).get(META_KEY)
    if raw is None:
        raise ConfigError(f"{path} is not a latentvsr checkpoint (no metadata)")
    meta = json.loads(raw)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path} has checkpoint format {version}; this build reads format {FORMAT_VERSION}")
    return tensors, meta


def prefixed(state: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in state.items()}


def strip_prefix(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Split an optimizer state_dict into tensors and a JSON-able remainder."""
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                tensors[f"optim.{idx}.{k}"] = v
            else:
                scalars[f"{idx}.{k}"] = v
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict, info: dict) -> None:
    state: dict = {}
    for key, v in strip_prefix(tensors, "optim.").items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = v.clone()
    for key, v in info.get("scalars", {}).items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = v
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})
