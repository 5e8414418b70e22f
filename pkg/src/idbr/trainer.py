"""Sequential training over a task sequence, with replay and snapshot regularization."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .corpus import Example, TaskSequence, draw_split, make_nsp_pair, midpoint_split
from .evaluation import AccuracyMatrix, canonical_tokens, evaluate, features, pad
from .memory import ReplayBuffer, kmeans_select, random_select, sample_replay, store_size
from .model import DisentangledClassifier, ModelConfig, build_model, clone_frozen
from .objectives import (
    Batch,
    LossTerms,
    LossWeights,
    MissingSnapshotError,
    SnapshotStore,
    compute_snapshots,
    total_loss,
)

logger = logging.getLogger(__name__)

METHODS = ("finetune", "replay", "regularization", "idbr", "mtl")
ABLATION_FLAGS = ("no_nsp", "no_task", "reg_g_only", "reg_s_only", "random_selection")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "idbr"
    learning_rate: float = 1e-3
    task_head_learning_rate: float = 5e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    replay_frequency: int = 10  # beta
    store_ratio: float = 0.01  # gamma
    epochs_per_task: int = 3
    seed: int = 0
    weights: LossWeights = LossWeights()
    no_nsp: bool = False
    no_task: bool = False
    reg_g_only: bool = False
    reg_s_only: bool = False
    random_selection: bool = False
    squared_reg: bool = False
    replay_sampling: str = "stratified"
    nsp_split: str = "uniform"
    eval_mask: bool = False
    select_on_validation: bool = True
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 100
    embed_dim: int = 64
    hidden_dim: int = 128
    repr_dim: int = 128
    feature_dim: int = 128
    dtype: str = "float64"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.replay_frequency < 1:
            raise ValueError("replay_frequency (beta) must be >= 1")
        if not 0.0 <= self.store_ratio <= 1.0:
            raise ValueError("store_ratio (gamma) must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be positive")
        flags = [f for f in ABLATION_FLAGS if getattr(self, f)]
        if flags and self.method != "idbr":
            raise ValueError(f"ablation flags {flags} only apply to method 'idbr'")
        if self.reg_g_only and self.reg_s_only:
            raise ValueError("reg_g_only and reg_s_only are mutually exclusive")
        if self.nsp_split not in ("uniform", "midpoint"):
            raise ValueError(f"unknown nsp_split {self.nsp_split!r}")

    @classmethod
    def pretrained(cls, **overrides) -> "TrainConfig":
        """Optimizer settings used with a pretrained encoder."""
        return cls(**{"learning_rate": 3e-5, "task_head_learning_rate": 5e-4, **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown training option(s): {unknown}")
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    # -- derived switches -------------------------------------------------

    @property
    def uses_memory(self) -> bool:
        return self.method in ("replay", "regularization", "idbr")

    @property
    def uses_snapshots(self) -> bool:
        return self.method in ("regularization", "idbr")

    @property
    def selection(self) -> str:
        if self.method == "idbr" and not self.random_selection:
            return "kmeans"
        return "random"

    def loss_terms(self) -> LossTerms:
        if self.method == "idbr":
            return LossTerms(
                nsp=not self.no_nsp,
                task=not self.no_task,
                reg="separate",
                reg_g=not self.reg_s_only,
                reg_s=not self.reg_g_only,
                squared=self.squared_reg,
            )
        reg = "joint" if self.method == "regularization" else "none"
        return LossTerms(nsp=False, task=False, reg=reg, squared=self.squared_reg)

    def model_config(self, vocab_size: int, n_tasks: int, n_classes: int) -> ModelConfig:
        return ModelConfig(vocab_size, n_tasks, n_classes, self.embed_dim, self.hidden_dim,
                           self.repr_dim, self.feature_dim, self.seed, self.dtype)


# ---------------------------------------------------------------------------
# Tensorized training data


@dataclass
class EncodedSet:
    """NSP forms of a list of examples, padded into tensors for batching."""

    examples: list[Example]
    uids: np.ndarray
    is_next: torch.Tensor
    not_next: torch.Tensor
    lengths: np.ndarray
    labels: torch.Tensor
    task_ids: torch.Tensor

    def __len__(self) -> int:
        return len(self.examples)

    def batch(self, idx, with_swap: bool = True) -> Batch:
        idx = np.asarray(idx)
        width = int(self.lengths[idx].max())
        t = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            uids=self.uids[idx],
            is_next=self.is_next[t, :width],
            labels=self.labels[t],
            task_ids=self.task_ids[t],
            not_next=self.not_next[t, :width] if with_swap else None,
        )


def encode_set(examples: Sequence[Example], rng: np.random.Generator, mode: str = "uniform") -> EncodedSet:
    """Draw one split per example and build both NSP forms."""
    is_next, not_next = [], []
    for ex in examples:
        n = len(ex.tokens)
        split = draw_split(n, rng) if mode == "uniform" else midpoint_split(n)
        a, b = make_nsp_pair(ex, split)
        is_next.append(a.tokens)
        not_next.append(b.tokens)
    return EncodedSet(
        examples=list(examples),
        uids=np.array([ex.uid for ex in examples], dtype=np.int64),
        is_next=pad(is_next),
        not_next=pad(not_next),
        lengths=np.array([len(t) for t in is_next], dtype=np.int64),
        labels=torch.as_tensor([ex.label_y for ex in examples], dtype=torch.long),
        task_ids=torch.as_tensor([ex.task_id_z for ex in examples], dtype=torch.long),
    )


# ---------------------------------------------------------------------------
# Run state


@dataclass
class RunResult:
    method: str
    task_names: list[str]
    accuracy: AccuracyMatrix
    model: DisentangledClassifier
    buffer: ReplayBuffer
    logs: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)

    def replay_events(self, task: int) -> int:
        return len({r["step"] for r in self.logs if r["task"] == task and r["source"] == "memory"})

    def current_steps(self, task: int) -> int:
        return sum(1 for r in self.logs if r["task"] == task and r["source"] == "current")


def make_optimizer(model: DisentangledClassifier, config: TrainConfig) -> torch.optim.Optimizer:
    head = list(model.task_head.parameters())
    head_ids = {id(p) for p in head}
    rest = [p for p in model.parameters() if id(p) not in head_ids]
    return torch.optim.AdamW(
        [{"params": rest, "lr": config.learning_rate},
         {"params": head, "lr": config.task_head_learning_rate}],
        weight_decay=config.weight_decay,
    )


def _step(model, opt, batch, snapshots, config, t, source):
    loss, breakdown = total_loss(model, batch, snapshots, config.weights, t, source, config.loss_terms())
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return breakdown


def _val_score(model, tasks, config) -> float:
    accs = [evaluate(model, task.val, label_block=_block(task, config)) for task in tasks]
    return float(np.mean(accs))


def _block(task, config):
    return (task.label_offset, task.num_classes) if config.eval_mask else None


def train_task(
    model: DisentangledClassifier,
    t: int,
    train_set: EncodedSet,
    buffer: ReplayBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
    snapshots: SnapshotStore | None = None,
    memory_set: EncodedSet | None = None,
    val_tasks: Sequence = (),
    log: Callable[[dict], None] | None = None,
) -> tuple[DisentangledClassifier, list[dict]]:
    """Optimize on one task (1-based index ``t``); replay every ``beta`` current steps.

    Selection of exemplars into the buffer is done by the caller afterwards.
    """
    if len(train_set) == 0:
        raise ValueError(f"task {t}: empty training set")
    terms = config.loss_terms()
    regularized = t >= 2 and terms.reg != "none"
    if regularized:
        needed = [train_set.uids] + ([memory_set.uids] if memory_set is not None else [])
        if snapshots is None or any(int(u) not in snapshots for arr in needed for u in arr):
            raise MissingSnapshotError(f"task {t}: snapshots missing")
    replaying = t >= 2 and config.uses_memory and len(buffer) > 0
    if replaying and memory_set is None:
        raise ValueError("replay requires the encoded memory set")

    model.train()
    opt = make_optimizer(model, config)
    records: list[dict] = []
    emit = records.append if log is None else (lambda r: (records.append(r), log(r)))
    best_state, best_score = None, -np.inf
    step = 0
    bs = config.batch_size
    for epoch in range(config.epochs_per_task):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), bs):
            batch = train_set.batch(order[start : start + bs], with_swap=terms.nsp)
            bd = _step(model, opt, batch, snapshots, config, t, "current")
            step += 1
            emit({"task": t, "step": step, "epoch": epoch + 1, "source": "current", **bd.as_dict()})
            if replaying and step % config.replay_frequency == 0:
                for i, rows in enumerate(sample_replay(buffer, t, bs, rng, config.replay_sampling)):
                    mbatch = memory_set.batch(rows, with_swap=terms.nsp)
                    bd = _step(model, opt, mbatch, snapshots, config, t, "memory")
                    emit({"task": t, "step": step, "epoch": epoch + 1, "source": "memory",
                          "replay_batch": i, **bd.as_dict()})
        if config.select_on_validation and val_tasks and config.epochs_per_task > 1:
            score = _val_score(model, val_tasks, config)
            if score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, records


def select_exemplars(model, examples: Sequence[Example], config: TrainConfig,
                     rng: np.random.Generator) -> list[Example]:
    k = store_size(len(examples), config.store_ratio)
    if k == 0:
        return []
    if config.selection == "kmeans":
        r, _, _ = features(model, canonical_tokens(examples))
        picked = kmeans_select(r.numpy(), k, rng, ids=[ex.uid for ex in examples],
                               n_init=config.kmeans_restarts, max_iter=config.kmeans_max_iter).indices
    else:
        picked = random_select(len(examples), k, rng).indices
    return [examples[i] for i in picked]


def run_sequence(
    sequence: TaskSequence,
    config: TrainConfig,
    vocab_size: int,
    log: Callable[[dict], None] | None = None,
    checkpoint_dir: str | Path | None = None,
    metadata: dict | None = None,
) -> RunResult:
    """Train the tasks of ``sequence`` in order, filling one accuracy row per task.

    With ``checkpoint_dir`` a checkpoint is written at every task boundary, and
    an existing one is resumed from.
    """
    if len(sequence) == 0:
        raise ValueError("empty task sequence")
    if config.method == "mtl":
        return run_mtl(sequence, config, vocab_size, log)
    tasks = sequence.tasks
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model_config(vocab_size, len(tasks), sequence.num_global_classes))
    buffer = ReplayBuffer()
    acc = AccuracyMatrix()
    logs: list[dict] = []
    val_history: list[dict] = []
    start = 1

    state = ckpt.latest(checkpoint_dir) if checkpoint_dir else None
    if state is not None:
        model.load_state_dict(state.state_dict)
        lookup = {ex.uid: ex for task in tasks for ex in task.train}
        buffer = ReplayBuffer.from_records(state.extra["buffer"], lookup.__getitem__)
        acc = AccuracyMatrix(state.extra["accuracy"])
        logs = state.extra["logs"]
        val_history = state.extra["val_history"]
        rng.bit_generator.state = state.extra["rng"]
        start = state.extra["task"] + 1
        logger.info("resuming %s after task %d", config.method, start - 1)

    test_tokens = {task.name: canonical_tokens(task.test) for task in tasks}
    for t in range(start, len(tasks) + 1):
        task = tasks[t - 1]
        train_set = encode_set(task.train, rng, config.nsp_split)
        memory_set = encode_set(buffer.examples, rng, config.nsp_split) if len(buffer) else None
        snapshots = None
        if t >= 2 and config.uses_snapshots:
            frozen = clone_frozen(model)
            uids = train_set.uids
            tokens = train_set.is_next
            if memory_set is not None:
                uids = np.concatenate([uids, memory_set.uids])
                tokens = pad([*_rows(train_set), *_rows(memory_set)])
            snapshots = compute_snapshots(frozen, uids, tokens)

        model, task_logs = train_task(model, t, train_set, buffer, config, rng, snapshots,
                                      memory_set, tasks[:t], log)
        logs.extend(task_logs)
        if config.uses_memory:
            buffer.store(select_exemplars(model, task.train, config, rng), t - 1)
        row = [evaluate(model, tasks[j].test, test_tokens[tasks[j].name], _block(tasks[j], config))
               for j in range(t)]
        acc.add_row(row)
        val_history.append({"task": t, "val": _val_score(model, tasks[:t], config)})
        logger.info("%s task %d/%d (%s): avg acc %.4f, buffer %d", config.method, t, len(tasks),
                    task.name, float(np.mean(row)), len(buffer))
        if checkpoint_dir:
            ckpt.save(Path(checkpoint_dir) / f"task-{t}.pt", model, {
                **(metadata or {}),
                "config": config.to_dict(),
                "model": model.config.to_dict(),
                "tasks": sequence.names,
                "task": t,
            }, extra={
                "task": t,
                "buffer": buffer.to_records(),
                "accuracy": acc.rows,
                "logs": logs,
                "val_history": val_history,
                "rng": rng.bit_generator.state,
            })
    return RunResult(config.method, sequence.names, acc, model, buffer, logs, val_history)


def _rows(encoded: EncodedSet):
    return [row[:n].tolist() for row, n in zip(encoded.is_next, encoded.lengths)]


def run_mtl(sequence: TaskSequence, config: TrainConfig, vocab_size: int,
            log: Callable[[dict], None] | None = None) -> RunResult:
    """Joint training on the pooled data of every task; a single evaluation row."""
    tasks = sequence.tasks
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model_config(vocab_size, len(tasks), sequence.num_global_classes))
    pooled = [ex for task in tasks for ex in task.train]
    train_set = encode_set(pooled, rng, config.nsp_split)
    model, logs = train_task(model, 1, train_set, ReplayBuffer(), config, rng,
                             val_tasks=tasks, log=log)
    acc = AccuracyMatrix()
    acc.add_row([evaluate(model, task.test, label_block=_block(task, config)) for task in tasks])
    return RunResult("mtl", sequence.names, acc, model, ReplayBuffer(), logs)


def run_baseline(kind: str, sequence: TaskSequence, config: TrainConfig, vocab_size: int,
                 **kwargs) -> RunResult:
    if kind not in ("finetune", "replay", "regularization", "mtl"):
        raise ValueError(f"unknown baseline {kind!r}")
    return run_sequence(sequence, replace(config, method=kind), vocab_size, **kwargs)


def config_fingerprint(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
