"""Synthetic text-classification tasks for desk-scale runs.

Each task owns a private content vocabulary (``<task><j>``) containing a few
cue words per class. All tasks share a small set of structural tokens whose
position in the sequence is informative: "opener" tokens (``o<j>``) are more
likely near the start of a sequence and "closer" tokens (``c<j>``) near its
end. The structural tokens give next-sentence prediction something generic to
learn; the cue words carry the class signal.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .corpus import LabeledDataset, RawExample, SyntheticSource, TaskEntry


@dataclass(frozen=True)
class SyntheticConfig:
    n_tasks: int = 3
    num_classes: tuple[int, ...] = (2, 3, 4)
    per_class_train: int = 500
    per_class_val: int = 100
    per_class_test: int = 200
    content_vocab: int = 60
    cue_words: int = 6
    structural_vocab: int = 12
    min_len: int = 12
    max_len: int = 24
    structural_rate: float = 0.4
    cue_rate: float = 0.5
    confusion: float = 0.2

    def __post_init__(self):
        if len(self.num_classes) != self.n_tasks:
            raise ValueError("num_classes must list one class count per task")
        if max(self.num_classes) * self.cue_words > self.content_vocab:
            raise ValueError("content vocabulary too small for the cue words")
        if self.min_len < 2 or self.max_len < self.min_len:
            raise ValueError("invalid length range")

    @property
    def task_names(self) -> list[str]:
        return task_names(self.n_tasks)


def task_names(n: int) -> list[str]:
    if n > len(string.ascii_lowercase):
        raise ValueError("at most 26 synthetic tasks")
    return list(string.ascii_lowercase[:n])


_SPLIT_STREAM = {"pool": 0, "test": 1}


def generate_task(source: SyntheticSource) -> LabeledDataset:
    cfg = source.params or SyntheticConfig()
    rng = np.random.default_rng([source.seed, source.task_index, _SPLIT_STREAM[source.split]])
    # cue words are a property of the task, shared between splits
    cue_rng = np.random.default_rng([source.seed, source.task_index, 99])
    cues = cue_rng.permutation(cfg.content_vocab)[: source.num_classes * cfg.cue_words]
    cues = cues.reshape(source.num_classes, cfg.cue_words)

    examples = []
    for label in range(source.num_classes):
        for _ in range(source.per_class):
            text = _sentence(source.name, label, cues, cfg, rng)
            examples.append(RawExample(text, label, len(examples)))
    return LabeledDataset(source.name, source.num_classes, tuple(examples))


def _sentence(task, label, cues, cfg, rng) -> str:
    n_classes = cues.shape[0]
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    words = []
    for pos in range(length):
        if rng.random() < cfg.structural_rate:
            opener_p = 1.0 - pos / (length - 1)
            kind = "o" if rng.random() < opener_p else "c"
            words.append(f"{kind}{rng.integers(cfg.structural_vocab)}")
        elif rng.random() < cfg.cue_rate:
            cls = label
            if n_classes > 1 and rng.random() < cfg.confusion:
                cls = (label + 1 + rng.integers(n_classes - 1)) % n_classes
            words.append(f"{task}{cues[cls, rng.integers(cfg.cue_words)]}")
        else:
            words.append(f"{task}{rng.integers(cfg.content_vocab)}")
    return " ".join(words)


def synthetic_registry(cfg: SyntheticConfig, seed: int) -> list[TaskEntry]:
    entries = []
    for i, (name, k) in enumerate(zip(cfg.task_names, cfg.num_classes)):
        pool = SyntheticSource(name, i, k, cfg.per_class_train + cfg.per_class_val, seed, "pool", cfg)
        test = SyntheticSource(name, i, k, cfg.per_class_test, seed, "test", cfg)
        entries.append(TaskEntry(name, k, None, pool, test))
    return entries


def cyclic_orders(cfg: SyntheticConfig) -> list[str]:
    """The n cyclic shifts of the task list, as comma-separated order strings."""
    names = cfg.task_names
    return [",".join(names[i:] + names[:i]) for i in range(len(names))]
