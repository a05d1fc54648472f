"""Single-file model archives.

A checkpoint is a zip file holding ``config.json`` (format, version, model
configuration, training metadata) and one ``weights/<name>.npy`` member per
tensor. Member timestamps are fixed so identical models produce identical
bytes, which keeps the file hash usable as a provenance key.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .implicit_head import ImplicitModel, ModelConfig

FORMAT = "vstain.checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, model: ImplicitModel, metadata: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": str(model.dtype).replace("torch.", ""),
        "model": model.cfg.to_dict(),
        "metadata": metadata or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "config.json", json.dumps(config, indent=2, sort_keys=True).encode())
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
            _member(zf, f"weights/{name}.npy", buf.getvalue())
    return path


def read_config(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            config = json.loads(zf.read("config.json"))
    except (zipfile.BadZipFile, KeyError, FileNotFoundError) as exc:
        raise CheckpointError(f"not a readable checkpoint: {path} ({exc})") from None
    if "version" not in config:
        raise CheckpointError("checkpoint config is missing field 'version'")
    if config.get("format") != FORMAT:
        raise CheckpointError(f"field 'format' is {config.get('format')!r}, expected {FORMAT!r}")
    if config["version"] != VERSION:
        raise CheckpointError(f"field 'version' is {config['version']!r}; this build reads version {VERSION}")
    if "model" not in config:
        raise CheckpointError("checkpoint config is missing field 'model'")
    return config


def load_checkpoint(path) -> tuple[ImplicitModel, dict]:
    """Rebuild the model from its stored configuration and weights."""
    config = read_config(path)
    try:
        model_cfg = ModelConfig.from_dict(config["model"])
        model = ImplicitModel(model_cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"field 'model' is invalid: {exc}") from None
    dtype = getattr(torch, config.get("dtype", "float32"))
    model.to(dtype)
    expected = model.state_dict()
    state = {}
    with zipfile.ZipFile(path) as zf:
        stored = {n[len("weights/") : -len(".npy")] for n in zf.namelist() if n.startswith("weights/")}
        missing = sorted(set(expected) - stored)
        extra = sorted(stored - set(expected))
        if missing:
            raise CheckpointError(f"weight '{missing[0]}' required by field 'model' is missing from the checkpoint")
        if extra:
            raise CheckpointError(f"weight '{extra[0]}' does not match field 'model'")
        for name, ref in expected.items():
            arr = np.load(io.BytesIO(zf.read(f"weights/{name}.npy")), allow_pickle=False)
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"weight '{name}' has shape {tuple(arr.shape)} but field 'model' implies {tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(state)
    model.eval()
    return model, config


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
