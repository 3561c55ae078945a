"""Versioned weight checkpoint container.

One ``.npz`` file holding flat named arrays plus a JSON manifest with the
format version, a config digest, and the encoder role.  Round-tripping is
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


def config_digest(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Atomically write the container (temp file + rename)."""
    path = Path(path)
    meta = dict(meta, format_version=FORMAT_VERSION)
    manifest = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **{_MANIFEST_KEY: manifest}, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        if _MANIFEST_KEY not in z:
            raise ValueError(f"{path}: not a checkpoint container (no manifest)")
        meta = json.loads(bytes(z[_MANIFEST_KEY]).decode("utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported format version {meta.get('format_version')}"
            )
        arrays = {k: z[k] for k in z.files if k != _MANIFEST_KEY}
    return arrays, meta


def state_dict_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        prefix + name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def apply_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Load named arrays into a module; every state tensor must be present."""
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise KeyError(f"checkpoint is missing tensors: {missing}")
    new_state = {
        k: torch.from_numpy(np.array(arrays[prefix + k])).to(state[k].dtype)
        for k in state
    }
    module.load_state_dict(new_state)
