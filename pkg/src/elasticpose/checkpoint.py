"""Portable checkpoint container: one zip holding named weight arrays as raw
little-endian float32 buffers plus a JSON manifest (shapes, metadata). The
layout is documented in FORMATS.md and intentionally avoids pickle so files
are bit-exact across platforms."""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def state_dict_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Float32 numpy views of a module's parameters and buffers."""
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        out[name] = arr
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": {name: list(a.shape) for name, a in arrays.items()},
        "metadata": metadata or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in sorted(arrays.items()):
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            zf.writestr(f"arrays/{name}.bin", data)
    return checkpoint_hash(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['format_version']}")
        arrays = {}
        for name, shape in manifest["arrays"].items():
            buf = zf.read(f"arrays/{name}.bin")
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return arrays, manifest["metadata"]


def load_into_module(module: torch.nn.Module, arrays: dict[str, np.ndarray]):
    state = module.state_dict()
    missing = [k for k in state if k not in arrays]
    extra = [k for k in arrays if k not in state]
    if missing or extra:
        raise ValueError(f"state mismatch: missing {missing[:5]}, extra {extra[:5]}")
    for name, tensor in state.items():
        src = torch.from_numpy(arrays[name]).to(tensor.dtype).reshape(tensor.shape)
        tensor.copy_(src)
    return module


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f"sha256:{digest}"
