"""Accuracy bookkeeping, forgetting, linear probes and embedding export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Example, SEP, midpoint_split


# ---------------------------------------------------------------------------
# Input tensors


def canonical_tokens(examples: Sequence[Example]) -> torch.Tensor:
    """Padded IsNext forms split at the midpoint (the inference-time input)."""
    rows = []
    for ex in examples:
        cut = midpoint_split(len(ex.tokens))
        rows.append(ex.tokens[:cut] + (SEP,) + ex.tokens[cut:])
    return pad(rows)


def pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max((len(r) for r in rows), default=0)
    out = torch.zeros(len(rows), width, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
    return out


@torch.no_grad()
def features(model, tokens: torch.Tensor, chunk: int = 1024):
    """``(r, g, s)`` for every row, computed in evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        parts = [model.features(tokens[i : i + chunk]) for i in range(0, len(tokens), chunk)]
    finally:
        model.train(was_training)
    return tuple(torch.cat([p[k] for p in parts]) for k in range(3))


# ---------------------------------------------------------------------------
# Accuracy


@torch.no_grad()
def predictions(model, tokens: torch.Tensor, class_mask: torch.Tensor | None = None):
    _, g, s = features(model, tokens)
    logits = model.class_logits(g, s)
    if class_mask is not None:
        logits = logits.masked_fill(~class_mask, float("-inf"))
    return logits.argmax(dim=-1)


def evaluate(model, test_set: Sequence[Example], tokens: torch.Tensor | None = None,
             label_block: tuple[int, int] | None = None) -> float:
    """Fraction of argmax-correct predictions.

    ``label_block=(offset, size)`` restricts the argmax to one task's classes.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    if tokens is None:
        tokens = canonical_tokens(test_set)
    mask = None
    if label_block is not None:
        mask = torch.zeros(model.config.n_classes, dtype=torch.bool)
        mask[label_block[0] : label_block[0] + label_block[1]] = True
    pred = predictions(model, tokens, mask)
    labels = torch.as_tensor([ex.label_y for ex in test_set])
    return float((pred == labels).double().mean())


@dataclass
class AccuracyMatrix:
    """``rows[l][j]``: accuracy on task ``j`` after training task ``l`` (0-based storage)."""

    rows: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        for row in self.rows:
            self._check(row)

    @staticmethod
    def _check(row):
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError(f"accuracies must lie in [0, 1]: {row}")

    def add_row(self, row: Sequence[float]):
        row = [float(a) for a in row]
        self._check(row)
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, idx):
        return self.rows[idx]

    def to_csv(self) -> str:
        width = max((len(r) for r in self.rows), default=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{j + 1}" for j in range(width)])
        for l, row in enumerate(self.rows):
            writer.writerow([l + 1] + [repr(a) for a in row] + [""] * (width - len(row)))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        reader = csv.reader(io.StringIO(text))
        next(reader)
        return cls([[float(v) for v in row[1:] if v != ""] for row in reader])


def _rows(matrix) -> list[list[float]]:
    return matrix.rows if isinstance(matrix, AccuracyMatrix) else [list(r) for r in matrix]


def average_accuracy(matrix, k: int | None = None) -> float:
    """Mean accuracy over the tasks evaluated after task ``k`` (1-based; default last)."""
    rows = _rows(matrix)
    k = len(rows) if k is None else k
    if not 1 <= k <= len(rows) or not rows[k - 1]:
        raise ValueError(f"row {k} is not populated")
    return float(np.mean(rows[k - 1]))


def forgetting(matrix, k: int | None = None) -> float:
    """Average drop from each earlier task's best past accuracy to its accuracy after task ``k``."""
    rows = _rows(matrix)
    k = len(rows) if k is None else k
    if k < 2:
        raise ValueError("forgetting needs k >= 2")
    if k > len(rows) or len(rows[k - 1]) < k - 1:
        raise ValueError(f"rows 1..{k} are not populated")
    drops = []
    for j in range(k - 1):
        best = max(rows[l][j] for l in range(j, k - 1))
        drops.append(best - rows[k - 1][j])
    return float(np.mean(drops))


# ---------------------------------------------------------------------------
# Probes and export


def probe_features(feats: np.ndarray, task_ids: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a linear softmax classifier predicting task id."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split

    task_ids = np.asarray(task_ids)
    if len(np.unique(task_ids)) < 2:
        raise ValueError("probing needs examples from at least two tasks")
    x_tr, x_te, y_tr, y_te = train_test_split(
        np.asarray(feats, dtype=np.float64), task_ids, test_size=0.2,
        random_state=seed, stratify=task_ids,
    )
    clf = LogisticRegression(max_iter=5000)
    clf.fit(x_tr, y_tr)
    return float((clf.predict(x_te) == y_te).mean())


def probe_disentanglement(model, examples: Sequence[Example], space: str, seed: int = 0) -> float:
    if space not in ("generic", "specific"):
        raise ValueError(f"unknown space {space!r}")
    _, g, s = features(model, canonical_tokens(examples))
    feats = (g if space == "generic" else s).numpy()
    return probe_features(feats, np.array([ex.task_id_z for ex in examples]), seed)


def export_embeddings(model, examples: Sequence[Example], path) -> Path:
    path = Path(path)
    width = model.config.feature_dim
    header = ["id", "task"] + [f"g_{i}" for i in range(width)] + [f"s_{i}" for i in range(width)]
    if examples:
        _, g, s = features(model, canonical_tokens(examples))
        g, s = g.tolist(), s.tolist()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, ex in enumerate(examples):
            writer.writerow([ex.uid, ex.task_id_z] + [repr(v) for v in g[i]] + [repr(v) for v in s[i]])
    return path
