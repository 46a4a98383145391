"""Checkpoint container: an uncompressed .npz archive plus a JSON metadata member.

Layout (format version 1)::

    __meta__.json        {"format", "format_version", "params_version",
                          "model_config", "seed", "arrays": {name: {"shape", "dtype"}},
                          "extra": {...}}
    <param name>.npy     one array per named parameter, float64, C order

Zip entries carry a fixed timestamp so identical parameters give identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import InputError
from .lm_core import DTYPE, ModelConfig, TransformerLM

FORMAT = "abductive-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(params: TransformerLM, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: p.detach().cpu().numpy() for name, p in params.state_dict().items()}
    meta = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "params_version": params.version,
        "model_config": params.config.to_dict(),
        "seed": params.seed,
        "arrays": {k: {"shape": list(a.shape), "dtype": str(a.dtype)} for k, a in arrays.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("__meta__.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(name + ".npy"), buf.getvalue())
    return path


def read_metadata(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("__meta__.json"))
    if meta.get("format") != FORMAT:
        raise InputError(f"{path}: not an {FORMAT} file")
    if meta.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[TransformerLM, dict]:
    """Returns (params, extra metadata)."""
    meta = read_metadata(path)
    params = TransformerLM(ModelConfig(**meta["model_config"]), meta["seed"])
    params.version = meta["params_version"]
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name, info in meta["arrays"].items():
            arr = np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
            if list(arr.shape) != info["shape"] or str(arr.dtype) != info["dtype"]:
                raise InputError(f"{path}: array {name} does not match its metadata")
            state[name] = torch.from_numpy(arr.copy()).to(DTYPE)
    params.load_state_dict(state)
    return params, meta["extra"]
