"""Checkpoints as ``.npz`` archives with ``transformer/`` and ``cnn/`` namespaces."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .modules import Module

NAMESPACES = ("transformer", "cnn")
FORMAT_VERSION = 1


def save_checkpoint(path, cnn: Module | dict, transformer: Module | dict | None = None, meta: dict | None = None) -> Path:
    """Write parameters bit-exactly; ``meta`` is stored as a JSON string."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for ns, mod in (("cnn", cnn), ("transformer", transformer)):
        if mod is None:
            continue
        state = mod.state_dict() if isinstance(mod, Module) else mod
        for name, value in state.items():
            arrays[f"{ns}/{name}"] = np.asarray(value)
    info = {"format_version": FORMAT_VERSION, **(meta or {})}
    arrays["__meta__"] = np.array(json.dumps(info, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Returns ``({namespace: state_dict}, meta)``."""
    out: dict[str, dict[str, np.ndarray]] = {}
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"])) if "__meta__" in npz.files else {}
        for key in npz.files:
            if key == "__meta__":
                continue
            ns, _, name = key.partition("/")
            if ns not in NAMESPACES or not name:
                raise ValueError(f"{path}: unexpected entry {key!r}")
            out.setdefault(ns, {})[name] = npz[key]
    if meta.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ValueError(f"{path}: checkpoint format {meta.get('format_version')} is not supported")
    return out, meta


def restore(module: Module, state: dict[str, np.ndarray]) -> Module:
    module.load_state_dict(state)
    return module
