"""Checkpoint and manifest serialization.

Checkpoints are pickled dicts of plain python values and numpy arrays, which
makes save -> load -> save byte-identical (pickle preserves dict order and
array bytes exactly). JSON output always sorts keys so re-runs reproduce files
byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import pickle
from pathlib import Path

import numpy as np

_PICKLE_PROTOCOL = 4


def save_checkpoint(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=_PICKLE_PROTOCOL)


def load_checkpoint(path: str | Path) -> dict:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return pickle.load(fh)


def checkpoint_bytes(payload: dict) -> bytes:
    return pickle.dumps(payload, protocol=_PICKLE_PROTOCOL)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def state_to_numpy(state_dict) -> dict[str, np.ndarray]:
    """Torch state dict -> plain numpy arrays (copies, detached)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}


def state_from_numpy(arrays: dict[str, np.ndarray]):
    import torch

    return {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
