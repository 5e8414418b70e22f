"""Loss terms: classification, next-sentence and task-id prediction, and the
snapshot regularizers on the generic and specific spaces."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .model import DisentangledClassifier


class MissingSnapshotError(KeyError):
    pass


@dataclass
class Batch:
    """A minibatch of IsNext forms with their (optional) NotNext twins.

    Row ``i`` of ``not_next`` is the swapped version of row ``i`` of ``is_next``.
    """

    uids: np.ndarray
    is_next: torch.Tensor
    labels: torch.Tensor
    task_ids: torch.Tensor
    not_next: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.uids)


@dataclass(frozen=True)
class LossWeights:
    lambda_g_mem: float = 2.5
    lambda_s_mem: float = 2.0
    lambda_g_cur: float = 0.25
    lambda_s_cur: float = 0.20

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def desk_scale(cls) -> "LossWeights":
        """Current-batch coefficients cut tenfold, for encoders trained from scratch.

        Without pretraining, the previous model's features of unseen-task inputs
        are close to random projections, and pinning them costs plasticity.
        """
        return cls(2.5, 2.0, 0.025, 0.02)

    def for_source(self, source: str) -> tuple[float, float]:
        if source == "memory":
            return self.lambda_g_mem, self.lambda_s_mem
        if source == "current":
            return self.lambda_g_cur, self.lambda_s_cur
        raise ValueError(f"unknown batch source {source!r}")


@dataclass(frozen=True)
class LossTerms:
    """Which terms enter the objective.

    ``reg`` is ``"separate"`` for one penalty per space, ``"joint"`` for a
    single penalty on the concatenated classifier input (weighted by the
    generic-space coefficient), or ``"none"``.
    """

    nsp: bool = True
    task: bool = True
    reg: str = "separate"
    reg_g: bool = True
    reg_s: bool = True
    squared: bool = False

    def __post_init__(self):
        if self.reg not in ("separate", "joint", "none"):
            raise ValueError(f"unknown regularization mode {self.reg!r}")


class SnapshotStore:
    """Frozen generic/specific targets keyed by example uid (read-only)."""

    def __init__(self, uids, g: torch.Tensor, s: torch.Tensor):
        uids = np.asarray(uids, dtype=np.int64)
        if len(uids) != len(g) or len(uids) != len(s):
            raise ValueError("uids and targets differ in length")
        self._row = {int(u): i for i, u in enumerate(uids)}
        if len(self._row) != len(uids):
            raise ValueError("duplicate uid in snapshot store")
        self._g = g.detach().clone()
        self._s = s.detach().clone()

    def __len__(self) -> int:
        return len(self._row)

    def __contains__(self, uid) -> bool:
        return int(uid) in self._row

    def lookup(self, uids) -> tuple[torch.Tensor, torch.Tensor]:
        try:
            rows = [self._row[int(u)] for u in uids]
        except KeyError as err:
            raise MissingSnapshotError(f"no snapshot for example {err.args[0]}") from None
        idx = torch.as_tensor(rows, dtype=torch.long)
        return self._g[idx], self._s[idx]

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self._g.clone(), self._s.clone()


@torch.no_grad()
def compute_snapshots(frozen_prev: DisentangledClassifier, uids, tokens: torch.Tensor,
                      chunk: int = 512) -> SnapshotStore:
    """Cache ``G(B(x))`` and ``S(B(x))`` of the previous-task model for every input row."""
    gs, ss = [], []
    for start in range(0, len(tokens), chunk):
        _, g, s = frozen_prev.features(tokens[start : start + chunk])
        gs.append(g)
        ss.append(s)
    width = frozen_prev.config.feature_dim
    g = torch.cat(gs) if gs else torch.zeros(0, width)
    s = torch.cat(ss) if ss else torch.zeros(0, width)
    return SnapshotStore(uids, g, s)


# ---------------------------------------------------------------------------
# Forward pass shared by all terms


@dataclass
class Forward:
    g: torch.Tensor  # IsNext rows
    s: torch.Tensor
    g_swap: torch.Tensor | None  # NotNext rows
    s_swap: torch.Tensor | None


def forward(model: DisentangledClassifier, batch: Batch, with_swap: bool = True) -> Forward:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if with_swap and batch.not_next is not None:
        _, g, s = model.features(torch.cat([batch.is_next, batch.not_next]))
        n = len(batch)
        return Forward(g[:n], s[:n], g[n:], s[n:])
    _, g, s = model.features(batch.is_next)
    return Forward(g, s, None, None)


def _cls_from(model, fw: Forward, labels):
    logits = model.class_logits(fw.g, fw.s)
    if fw.g_swap is None:
        return F.cross_entropy(logits, labels)
    swap_logits = model.class_logits(fw.g_swap, fw.s_swap)
    return F.cross_entropy(torch.cat([logits, swap_logits]), torch.cat([labels, labels]))


def _nsp_from(model, fw: Forward):
    if fw.g_swap is None:
        raise ValueError("next-sentence loss needs NotNext rows")
    zeros = torch.zeros(len(fw.g), dtype=torch.long)
    return (F.cross_entropy(model.nsp_head(fw.g), zeros)
            + F.cross_entropy(model.nsp_head(fw.g_swap), zeros + 1))


def _task_from(model, fw: Forward, task_ids):
    if fw.s_swap is None:
        return F.cross_entropy(model.task_head(fw.s), task_ids)
    logits = model.task_head(torch.cat([fw.s, fw.s_swap]))
    return F.cross_entropy(logits, torch.cat([task_ids, task_ids]))


def reg_distance(current: torch.Tensor, target: torch.Tensor, squared: bool = False):
    """Mean over rows of ``||target - current||_2`` (or its square)."""
    diff = target - current
    if squared:
        return diff.pow(2).sum(dim=-1).mean()
    return torch.linalg.vector_norm(diff, dim=-1).mean()


# ---------------------------------------------------------------------------
# Individual terms


def loss_cls(model, batch: Batch):
    return _cls_from(model, forward(model, batch), batch.labels)


def loss_nsp(model, batch: Batch):
    if batch.not_next is None:
        raise ValueError("next-sentence loss needs NotNext rows")
    return _nsp_from(model, forward(model, batch))


def loss_task(model, batch: Batch):
    return _task_from(model, forward(model, batch), batch.task_ids)


def loss_reg(model, batch: Batch, snapshots: SnapshotStore, space: str, squared: bool = False):
    g_t, s_t = snapshots.lookup(batch.uids)
    fw = forward(model, batch, with_swap=False)
    if space == "generic":
        return reg_distance(fw.g, g_t, squared)
    if space == "specific":
        return reg_distance(fw.s, s_t, squared)
    raise ValueError(f"unknown space {space!r}")


# ---------------------------------------------------------------------------
# Combined objective


@dataclass
class LossBreakdown:
    cls: float = 0.0
    nsp: float = 0.0
    task: float = 0.0
    reg_g: float = 0.0
    reg_s: float = 0.0
    reg_joint: float = 0.0
    lambda_g: float = 0.0
    lambda_s: float = 0.0
    lambda_joint: float = 0.0

    @property
    def total(self) -> float:
        return combine(self.cls, self.nsp, self.task, self.reg_g, self.reg_s,
                       self.lambda_g, self.lambda_s) + self.lambda_joint * self.reg_joint

    def as_dict(self) -> dict:
        """Flat record; loss values carry a ``loss_`` prefix so they never clash with log keys."""
        d = {}
        for f in fields(self):
            key = f.name if f.name.startswith("lambda") else f"loss_{f.name}"
            d[key] = getattr(self, f.name)
        d["loss_total"] = self.total
        return d


def combine(cls, nsp, task, reg_g, reg_s, lambda_g, lambda_s):
    return cls + nsp + task + lambda_g * reg_g + lambda_s * reg_s


def total_loss(
    model: DisentangledClassifier,
    batch: Batch,
    snapshots: SnapshotStore | None,
    weights: LossWeights,
    task_index: int,
    source: str,
    terms: LossTerms = LossTerms(),
) -> tuple[torch.Tensor, LossBreakdown]:
    """Objective for one batch; ``task_index`` is 1-based.

    Regularizers are skipped on the first task. The returned tensor equals
    ``breakdown.total`` up to float rounding.
    """
    lam_g, lam_s = weights.for_source(source)
    fw = forward(model, batch, with_swap=terms.nsp)
    parts = {"cls": _cls_from(model, fw, batch.labels)}
    bd = LossBreakdown()
    if terms.nsp:
        parts["nsp"] = _nsp_from(model, fw)
    if terms.task:
        parts["task"] = _task_from(model, fw, batch.task_ids)

    if task_index >= 2 and terms.reg != "none":
        if snapshots is None:
            raise MissingSnapshotError("regularization requested without snapshots")
        g_t, s_t = snapshots.lookup(batch.uids)
        if terms.reg == "joint":
            if lam_g > 0:
                parts["reg_joint"] = reg_distance(
                    torch.cat([fw.g, fw.s], -1), torch.cat([g_t, s_t], -1), terms.squared)
                bd.lambda_joint = lam_g
        else:
            if terms.reg_g and lam_g > 0:
                parts["reg_g"] = reg_distance(fw.g, g_t, terms.squared)
                bd.lambda_g = lam_g
            if terms.reg_s and lam_s > 0:
                parts["reg_s"] = reg_distance(fw.s, s_t, terms.squared)
                bd.lambda_s = lam_s

    total = parts["cls"]
    for name in ("nsp", "task"):
        if name in parts:
            total = total + parts[name]
    if "reg_g" in parts:
        total = total + bd.lambda_g * parts["reg_g"]
    if "reg_s" in parts:
        total = total + bd.lambda_s * parts["reg_s"]
    if "reg_joint" in parts:
        total = total + bd.lambda_joint * parts["reg_joint"]

    for name, value in parts.items():
        setattr(bd, name, float(value.detach()))
    return total, bd
