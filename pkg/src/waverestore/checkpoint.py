"""Checkpoint serialization: weight blob plus a human-readable JSON sidecar.

The sidecar records the builder config, the seed, a content hash of all
parameters and buffers, and the production-scale reference schedule, so any
checkpoint can be audited without loading it into a model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import torch

from waverestore.reference import REFERENCE_SCHEDULE


def param_hash(module: torch.nn.Module) -> str:
    """Content hash over all parameters and buffers, order-stable by name."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def _config_dict(config) -> dict:
    if dataclasses.is_dataclass(config):
        return dataclasses.asdict(config)
    return dict(config)


def save_checkpoint(path, module: torch.nn.Module, kind: str, config, seed: int, extra: dict | None = None) -> str:
    """Write ``path`` (weights) and ``path + .json`` (sidecar); returns the hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path)
    content_hash = param_hash(module)
    sidecar = {
        "kind": kind,
        "config": _config_dict(config),
        "seed": seed,
        "param_hash": content_hash,
        "reference_schedule": REFERENCE_SCHEDULE,
    }
    if extra:
        sidecar.update(extra)
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return content_hash


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def load_sidecar(path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def load_checkpoint(path, module: torch.nn.Module, expected_kind: str | None = None) -> dict:
    """Load weights into ``module``; verifies sidecar kind and content hash."""
    path = Path(path)
    meta = load_sidecar(path)
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected {expected_kind!r}")
    state = torch.load(path, weights_only=True)
    module.load_state_dict(state)
    got = param_hash(module)
    if got != meta["param_hash"]:
        raise ValueError(f"{path}: parameter hash mismatch (file corrupt or config drift)")
    return meta
