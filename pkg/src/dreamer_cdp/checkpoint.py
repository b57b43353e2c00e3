"""Parameter checkpoints as a zip archive of raw little-endian float32 tensors.

Layout::

    manifest.json           {"format": "dreamer-cdp/1", "tensors": {name: {"shape": [...], "dtype": "<f4"}}}
    tensors/<name>.bin      row-major raw bytes, one file per tensor
    config.txt              optional flat key-value config snapshot

Names are hierarchical with ``/`` separators, e.g. ``worldmodel/seq/cell/weight_ih``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "dreamer-cdp/1"


class CheckpointError(ValueError):
    pass


def flatten_modules(modules: dict[str, torch.nn.Module]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            key = f"{prefix}/{name.replace('.', '/')}"
            out[key] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def save(path: str | Path, modules: dict[str, torch.nn.Module], config_text: str | None = None) -> None:
    tensors = flatten_modules(modules)
    manifest = {
        "format": FORMAT,
        "tensors": {k: {"shape": list(v.shape), "dtype": "<f4"} for k, v in tensors.items()},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for k, v in tensors.items():
            zf.writestr(f"tensors/{k}.bin", np.ascontiguousarray(v).tobytes())
        if config_text is not None:
            zf.writestr("config.txt", config_text)


def read(path: str | Path) -> tuple[dict[str, np.ndarray], str | None]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise CheckpointError(f"{path}: not a checkpoint archive") from None
    with zf:
        if "manifest.json" not in zf.namelist():
            raise CheckpointError(f"{path}: no manifest.json")
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
        tensors = {}
        for k, meta in manifest["tensors"].items():
            raw = zf.read(f"tensors/{k}.bin")
            arr = np.frombuffer(raw, dtype="<f4")
            shape = tuple(meta["shape"])
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {k}: {arr.size} values do not fit shape {shape}")
            tensors[k] = arr.reshape(shape)
        config = zf.read("config.txt").decode() if "config.txt" in zf.namelist() else None
    return tensors, config


def load_into(tensors: dict[str, np.ndarray], modules: dict[str, torch.nn.Module]) -> None:
    """Copy tensors into modules, failing on the first missing or mismatching tensor."""
    for prefix, module in modules.items():
        state = module.state_dict()
        new = {}
        for name, ref in state.items():
            key = f"{prefix}/{name.replace('.', '/')}"
            if key not in tensors:
                raise CheckpointError(f"missing tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs model {tuple(ref.shape)}"
                )
            new[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        module.load_state_dict(new)
