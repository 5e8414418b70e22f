"""Turn a data section of an experiment into prepared tasks."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .corpus import TaskDescriptor, Vocabulary, benchmark_registry, prepare_tasks
from .synthetic import SyntheticConfig, synthetic_registry


@dataclass
class PreparedData:
    registry: dict[str, TaskDescriptor]
    num_classes: int
    vocab: Vocabulary

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def synthetic_config(options: dict | None) -> SyntheticConfig:
    options = dict(options or {})
    known = {f.name for f in fields(SyntheticConfig)}
    unknown = sorted(set(options) - known)
    if unknown:
        raise ValueError(f"unknown synthetic option(s): {unknown}")
    if "num_classes" in options:
        options["num_classes"] = tuple(options["num_classes"])
        options.setdefault("n_tasks", len(options["num_classes"]))
    return SyntheticConfig(**options)


def prepare_synthetic(cfg: SyntheticConfig, seed: int) -> PreparedData:
    registry, total, vocab = prepare_tasks(
        synthetic_registry(cfg, seed), cfg.per_class_train, cfg.per_class_val, seed
    )
    return PreparedData(registry, total, vocab)


def prepare_benchmark(root, seed: int, per_class_train: int = 2000, per_class_val: int = 2000,
                  max_vocab: int = 20_000) -> PreparedData:
    registry, total, vocab = prepare_tasks(
        benchmark_registry(root), per_class_train, per_class_val, seed, max_vocab
    )
    return PreparedData(registry, total, vocab)
