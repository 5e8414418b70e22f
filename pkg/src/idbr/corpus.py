"""Datasets, label spaces, NSP pairs and task sequences."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, OOV, SEP = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[OOV]", "[SEP]")
MAX_LEN = 256
DATA_ROOT_ENV = "IDBR_DATA_ROOT"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Raw data


@dataclass(frozen=True)
class RawExample:
    text: str
    label: int  # 0-based within its dataset
    index: int  # position in the source file / generator output


@dataclass(frozen=True)
class LabeledDataset:
    name: str
    num_classes: int
    examples: tuple[RawExample, ...]

    def __len__(self) -> int:
        return len(self.examples)

    def class_counts(self) -> dict[int, int]:
        counts = Counter(ex.label for ex in self.examples)
        return {c: counts.get(c, 0) for c in range(self.num_classes)}


@dataclass(frozen=True)
class CsvSource:
    """A ``label,text`` CSV file; labels are 1-based in the file."""

    name: str
    path: str | os.PathLike
    num_classes: int


@dataclass(frozen=True)
class SyntheticSource:
    """A named task from the synthetic generator (see :mod:`idbr.synthetic`)."""

    name: str
    task_index: int
    num_classes: int
    per_class: int
    seed: int
    split: str = "pool"
    params: "object | None" = None  # SyntheticConfig; None means defaults


def load_dataset(source: CsvSource | SyntheticSource) -> LabeledDataset:
    if isinstance(source, SyntheticSource):
        from .synthetic import generate_task

        return generate_task(source)
    return _load_csv(source)


def _load_csv(source: CsvSource) -> LabeledDataset:
    path = Path(source.path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    examples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: no examples")
        if [h.strip().lower() for h in header[:2]] != ["label", "text"]:
            raise DatasetError(f"{path}:1: expected header 'label,text', got {header!r}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) < 2:
                raise DatasetError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                label = int(row[0])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: label {row[0]!r} is not an integer") from None
            if not 1 <= label <= source.num_classes:
                raise DatasetError(
                    f"{path}:{lineno}: label {label} outside 1..{source.num_classes}"
                )
            # some corpora split title/body into extra columns
            text = " ".join(part for part in row[1:] if part)
            examples.append(RawExample(text=text, label=label - 1, index=len(examples)))
    if not examples:
        raise DatasetError(f"{path}: no examples")
    return LabeledDataset(source.name, source.num_classes, tuple(examples))


def subsample_split(
    dataset: LabeledDataset, per_class_train: int, per_class_val: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw class-balanced, disjoint train and validation subsets."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[RawExample]] = {c: [] for c in range(dataset.num_classes)}
    for ex in dataset.examples:
        by_class[ex.label].append(ex)
    need = per_class_train + per_class_val
    train, val = [], []
    for label in range(dataset.num_classes):
        members = by_class[label]
        if len(members) < need:
            raise DatasetError(
                f"{dataset.name}: class {label} has {len(members)} examples, need {need}"
            )
        order = rng.permutation(len(members))
        train.extend(members[i] for i in order[:per_class_train])
        val.extend(members[i] for i in order[per_class_train:need])
    train.sort(key=lambda ex: ex.index)
    val.sort(key=lambda ex: ex.index)
    return (
        LabeledDataset(dataset.name, dataset.num_classes, tuple(train)),
        LabeledDataset(dataset.name, dataset.num_classes, tuple(val)),
    )


# ---------------------------------------------------------------------------
# Label space


@dataclass(frozen=True)
class TaskInfo:
    name: str
    num_classes: int


def merge_label_space(
    tasks: Sequence[TaskInfo], merge_groups: Sequence[Sequence[str]] = ()
) -> tuple[dict[str, int], int]:
    """Assign a label offset to every task; merged tasks share one block.

    Returns ``(offsets, total_classes)``. Blocks are laid out in order of first
    appearance in ``tasks``.
    """
    sizes = {t.name: t.num_classes for t in tasks}
    group_of: dict[str, int] = {}
    for gi, group in enumerate(merge_groups):
        members = [name for name in group if name in sizes]
        if len({sizes[name] for name in members}) > 1:
            detail = ", ".join(f"{name}={sizes[name]}" for name in members)
            raise DatasetError(f"merge group has mismatched class counts: {detail}")
        for name in members:
            group_of[name] = gi

    offsets: dict[str, int] = {}
    group_offset: dict[int, int] = {}
    total = 0
    for t in tasks:
        gi = group_of.get(t.name)
        if gi is not None and gi in group_offset:
            offsets[t.name] = group_offset[gi]
            continue
        offsets[t.name] = total
        if gi is not None:
            group_offset[gi] = total
        total += t.num_classes
    return offsets, total


# ---------------------------------------------------------------------------
# Tokenization


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts, max_size: int = 20_000) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in tokenize(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: max(0, max_size - len(SPECIAL_TOKENS))]]
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_len: int = MAX_LEN) -> list[int]:
        return [self.index.get(tok, OOV) for tok in tokenize(text)[:max_len]]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# ---------------------------------------------------------------------------
# Examples and NSP pairs


def example_uid(task_name: str, index: int) -> int:
    digest = hashlib.blake2b(f"{task_name}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1  # fits in int64


@dataclass(frozen=True)
class Example:
    uid: int
    tokens: tuple[int, ...]
    text: str
    label_y: int
    task_id_z: int
    nsp_label_l: int = 0
    split_index: int | None = None  # position of SEP, None for raw inputs

    def __post_init__(self):
        if not self.tokens:
            raise DatasetError("example has no tokens")
        if self.nsp_label_l not in (0, 1):
            raise DatasetError(f"nsp label must be 0 or 1, got {self.nsp_label_l}")
        if self.split_index is not None:
            if not 0 < self.split_index < len(self.tokens):
                raise DatasetError(f"split index {self.split_index} not interior")
            if self.tokens[self.split_index] != SEP:
                raise DatasetError("split index does not point at SEP")


def make_nsp_pair(x: Example, split: int) -> tuple[Example, Example]:
    """Build the IsNext form ``x[:split] SEP x[split:]`` and its swapped NotNext form."""
    tokens = x.tokens
    if len(tokens) < 2:
        raise DatasetError("NSP pair needs at least two tokens")
    if not 0 < split < len(tokens):
        raise DatasetError(f"split {split} out of range for length {len(tokens)}")
    head, tail = tokens[:split], tokens[split:]
    is_next = replace(x, tokens=head + (SEP,) + tail, nsp_label_l=0, split_index=split)
    not_next = replace(x, tokens=tail + (SEP,) + head, nsp_label_l=1, split_index=len(tail))
    return is_next, not_next


def strip_sep(x: Example) -> tuple[int, ...]:
    """Token sequence of an NSP form with the separator removed."""
    if x.split_index is None:
        return x.tokens
    return x.tokens[: x.split_index] + x.tokens[x.split_index + 1 :]


def midpoint_split(n_tokens: int) -> int:
    return max(1, n_tokens // 2)


def draw_split(n_tokens: int, rng: np.random.Generator) -> int:
    return int(rng.integers(1, n_tokens))


# ---------------------------------------------------------------------------
# Tasks and sequences


@dataclass(frozen=True)
class TaskDescriptor:
    name: str
    num_classes: int
    label_offset: int
    train: tuple[Example, ...]
    val: tuple[Example, ...]
    test: tuple[Example, ...]

    def info(self) -> TaskInfo:
        return TaskInfo(self.name, self.num_classes)

    def with_task_id(self, z: int) -> "TaskDescriptor":
        def tag(examples):
            return tuple(replace(ex, task_id_z=z) for ex in examples)

        return replace(self, train=tag(self.train), val=tag(self.val), test=tag(self.test))


@dataclass(frozen=True)
class TaskSequence:
    order_id: str
    tasks: tuple[TaskDescriptor, ...]
    num_global_classes: int

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]


BENCHMARK_ORDERS: dict[int, tuple[str, ...]] = {
    1: ("ag", "yelp", "yahoo"),
    2: ("yelp", "yahoo", "ag"),
    3: ("yahoo", "ag", "yelp"),
    4: ("ag", "yelp", "amazon", "yahoo", "dbpedia"),
    5: ("yelp", "yahoo", "amazon", "dbpedia", "ag"),
    6: ("dbpedia", "yahoo", "ag", "amazon", "yelp"),
    7: ("yelp", "ag", "dbpedia", "amazon", "yahoo"),
}


def resolve_order(order_id: int | str) -> tuple[str, ...]:
    if isinstance(order_id, int) or str(order_id).isdigit():
        key = int(order_id)
        if key not in BENCHMARK_ORDERS:
            raise DatasetError(f"unknown order id {order_id!r}")
        return BENCHMARK_ORDERS[key]
    names = tuple(part.strip() for part in str(order_id).split(",") if part.strip())
    if not names:
        raise DatasetError(f"empty task order {order_id!r}")
    return names


def build_task_sequence(
    order_id: int | str, registry: Mapping[str, TaskDescriptor], num_global_classes: int | None = None
) -> TaskSequence:
    names = resolve_order(order_id)
    if len(set(names)) != len(names):
        raise DatasetError(f"task names repeat in order {order_id!r}")
    missing = [n for n in names if n not in registry]
    if missing:
        raise DatasetError(f"unknown task(s) {missing} in order {order_id!r}")
    tasks = tuple(registry[name].with_task_id(z) for z, name in enumerate(names))
    if num_global_classes is None:
        num_global_classes = max(t.label_offset + t.num_classes for t in registry.values())
    return TaskSequence(str(order_id), tasks, num_global_classes)


# ---------------------------------------------------------------------------
# Registry of data sources


@dataclass(frozen=True)
class TaskEntry:
    name: str
    num_classes: int
    merge_group: str | None = None
    train_source: CsvSource | SyntheticSource | None = None
    test_source: CsvSource | SyntheticSource | None = None


def benchmark_registry(root: str | os.PathLike | None = None) -> list[TaskEntry]:
    """The five classification corpora, read from ``<root>/<name>/{train,test}.csv``."""
    root = Path(root or os.environ.get(DATA_ROOT_ENV, "data"))
    spec = [("ag", 4, None), ("yelp", 5, "sentiment"), ("amazon", 5, "sentiment"),
            ("dbpedia", 14, None), ("yahoo", 10, None)]
    return [
        TaskEntry(
            name, k, group,
            CsvSource(name, root / name / "train.csv", k),
            CsvSource(name, root / name / "test.csv", k),
        )
        for name, k, group in spec
    ]


# Per-dataset statistics of the sampled setting (train = 2000/class).
BENCHMARK_TRAIN_SIZES = {"ag": 8000, "yelp": 10000, "amazon": 10000, "dbpedia": 28000, "yahoo": 20000}
BENCHMARK_TEST_SIZE = 7600


def _to_examples(
    data: LabeledDataset, encode: Callable[[str], list[int]], offset: int, split: str
) -> tuple[Example, ...]:
    out, dropped = [], 0
    for raw in data.examples:
        tokens = tuple(encode(raw.text))
        if len(tokens) < 2:
            dropped += 1
            continue
        uid = example_uid(f"{data.name}/{split}", raw.index)
        out.append(Example(uid, tokens, raw.text, raw.label + offset, 0))
    if dropped:
        logger.warning("%s/%s: dropped %d examples shorter than two tokens", data.name, split, dropped)
    return tuple(out)


def prepare_tasks(
    entries: Sequence[TaskEntry],
    per_class_train: int,
    per_class_val: int,
    seed: int,
    max_vocab: int = 20_000,
    max_len: int = MAX_LEN,
    encoder: Callable[[str], list[int]] | None = None,
) -> tuple[dict[str, TaskDescriptor], int, Vocabulary | None]:
    """Load, split and tokenize every registered task.

    The vocabulary is learned from the union of the training splits unless an
    external ``encoder`` (e.g. a pretrained tokenizer) is supplied.
    """
    offsets, total = merge_label_space(
        [TaskInfo(e.name, e.num_classes) for e in entries], _merge_groups(entries)
    )
    splits = {}
    for i, entry in enumerate(entries):
        pool = load_dataset(entry.train_source)
        test = load_dataset(entry.test_source)
        train, val = subsample_split(pool, per_class_train, per_class_val, seed + 7919 * i)
        splits[entry.name] = (train, val, test)

    vocab = None
    if encoder is None:
        vocab = Vocabulary.build(
            (ex.text for train, _, _ in splits.values() for ex in train.examples), max_vocab
        )
        encoder = lambda text: vocab.encode(text, max_len)  # noqa: E731

    registry = {}
    for entry in entries:
        train, val, test = splits[entry.name]
        off = offsets[entry.name]
        registry[entry.name] = TaskDescriptor(
            entry.name,
            entry.num_classes,
            off,
            _to_examples(train, encoder, off, "train"),
            _to_examples(val, encoder, off, "train"),
            _to_examples(test, encoder, off, "test"),
        )
    return registry, total, vocab


def _merge_groups(entries: Sequence[TaskEntry]) -> list[list[str]]:
    groups: dict[str, list[str]] = {}
    for e in entries:
        if e.merge_group:
            groups.setdefault(e.merge_group, []).append(e.name)
    return list(groups.values())
