"""Checkpoint files: parameter tensors keyed by module path plus a JSON header."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import torch

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    metadata: dict
    state_dict: dict[str, torch.Tensor]
    extra: dict


def save(path, model, metadata: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "metadata": json.dumps(metadata, sort_keys=True),
        "extra": json.dumps(extra or {}),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    return Checkpoint(json.loads(payload["metadata"]), payload["state_dict"], json.loads(payload["extra"]))


def latest(directory) -> Checkpoint | None:
    """The task-boundary checkpoint with the highest task index, if any."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    found = []
    for p in directory.glob("task-*.pt"):
        m = re.fullmatch(r"task-(\d+)\.pt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        return None
    return load(max(found)[1])
