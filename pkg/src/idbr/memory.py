"""Episodic memory: exemplar selection and replay sampling."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Example

logger = logging.getLogger(__name__)


def store_size(n_examples: int, gamma: float) -> int:
    """``floor(gamma * n)``, robust to binary rounding (0.29 * 100 -> 29)."""
    return int(math.floor(gamma * n_examples + 1e-9))


# ---------------------------------------------------------------------------
# K-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list[float]  # within-cluster sum of squares after each update
    n_iter: int


def _sq_dists(x, c, x_sq=None):
    # ||x||^2 - 2 x.c + ||c||^2, clipped at 0 against cancellation
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", x, x)
    d = x_sq[:, None] - 2.0 * x @ c.T + np.einsum("ij,ij->i", c, c)[None, :]
    return np.maximum(d, 0.0)


def _exact_sq_dists(x, c, chunk=256):
    out = np.empty((len(x), len(c)))
    for start in range(0, len(c), chunk):
        diff = x[:, None, :] - c[None, start : start + chunk, :]
        out[:, start : start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _plusplus_seeds(x, k, rng, x_sq):
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen], x_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a seed
            pool = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(pool))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]], x_sq)[:, 0])
    return x[chosen].copy()


def _fill_empty(x, labels, centroids, k):
    counts = np.bincount(labels, minlength=k)
    for empty in np.flatnonzero(counts == 0):
        d = ((x - centroids[labels]) ** 2).sum(1)
        d[counts[labels] <= 1] = -1.0  # never empty another cluster
        far = int(np.argmax(d))
        counts[labels[far]] -= 1
        labels[far] = empty
        counts[empty] = 1
        centroids[empty] = x[far]
    return labels


def _update(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    return sums / counts[:, None]


def _wcss(x, labels, centroids):
    return float(((x - centroids[labels]) ** 2).sum())


def kmeans(features, k: int, rng: np.random.Generator, n_init: int = 10,
           max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Every returned cluster is non-empty: an emptied cluster takes over the
    point farthest from its own centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    x_sq = np.einsum("ij,ij->i", x, x)
    best = None
    for _ in range(n_init):
        centroids = _plusplus_seeds(x, k, rng, x_sq)
        labels = np.full(n, -1)
        history = []
        it = 0
        for it in range(1, max_iter + 1):
            new = np.argmin(_sq_dists(x, centroids, x_sq), axis=1)
            new = _fill_empty(x, new, centroids, k)
            if np.array_equal(new, labels):
                break
            labels = new
            centroids = _update(x, labels, k)
            history.append(_wcss(x, labels, centroids))
        result = KMeansResult(centroids, labels, history[-1], history, it)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


@dataclass
class Selection:
    indices: np.ndarray  # positions into the candidate list, one per cluster
    clustering: KMeansResult | None = None


# squared distances within this relative margin of the minimum count as tied;
# exact ties (e.g. the two members of a two-point cluster) otherwise resolve by
# summation-order rounding
TIE_TOL = 1e-10


def closest_to_centroids(features, labels, centroids, ids=None) -> np.ndarray:
    """For each cluster, the member nearest its centroid (ties: lowest id)."""
    x = np.asarray(features, dtype=np.float64)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    picks = []
    for j in range(len(centroids)):
        members = np.flatnonzero(labels == j)
        d = _exact_sq_dists(x[members], centroids[j : j + 1])[:, 0]
        tied = members[d <= d.min() + TIE_TOL * (1.0 + d.min())]
        picks.append(int(tied[np.argmin(ids[tied])]))
    return np.asarray(picks, dtype=np.int64)


def kmeans_select(features, k: int, seed: int | np.random.Generator, ids=None,
                  n_init: int = 10, max_iter: int = 100) -> Selection:
    """Cluster ``features`` into ``k`` groups and keep one exemplar per group."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if k == 0:
        logger.warning("kmeans_select called with k=0; nothing selected")
        return Selection(np.zeros(0, dtype=np.int64))
    if k > n:
        raise ValueError(f"cannot select {k} exemplars from {n} examples")
    if k == n:
        return Selection(np.arange(n, dtype=np.int64))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    result = kmeans(x, k, rng, n_init=n_init, max_iter=max_iter)
    # final membership from exact distances
    labels = np.argmin(_exact_sq_dists(x, result.centroids), axis=1)
    if len(np.unique(labels)) < k:
        labels = result.labels
    result.labels = labels
    return Selection(closest_to_centroids(x, labels, result.centroids, ids), result)


def random_select(n: int, k: int, seed: int | np.random.Generator) -> Selection:
    if k > n:
        raise ValueError(f"cannot select {k} exemplars from {n} examples")
    if k == 0:
        return Selection(np.zeros(0, dtype=np.int64))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Selection(np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64))


# ---------------------------------------------------------------------------
# Buffer


@dataclass
class ReplayBuffer:
    entries: list[tuple[Example, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def per_task_counts(self) -> dict[int, int]:
        return dict(sorted(Counter(task for _, task in self.entries).items()))

    @property
    def examples(self) -> list[Example]:
        return [ex for ex, _ in self.entries]

    def store(self, selected: Iterable[Example], task_id: int) -> "ReplayBuffer":
        selected = list(selected)
        seen = {ex.uid for ex, t in self.entries if t == task_id}
        for ex in selected:
            if ex.uid in seen:
                raise ValueError(f"example {ex.uid} already stored for task {task_id}")
            seen.add(ex.uid)
        self.entries.extend((ex, task_id) for ex in selected)
        return self

    def to_records(self) -> list[dict]:
        return [{"uid": ex.uid, "task": task} for ex, task in self.entries]

    @classmethod
    def from_records(cls, records: Sequence[dict], lookup: Callable[[int], Example]) -> "ReplayBuffer":
        return cls([(lookup(int(r["uid"])), int(r["task"])) for r in records])


def sample_replay(buffer: ReplayBuffer, t: int, batch_size: int,
                  rng: np.random.Generator, mode: str = "stratified") -> list[np.ndarray]:
    """Draw ``t - 1`` memory batches (positions into ``buffer.entries``).

    ``t`` is the 1-based index of the current task. In stratified mode batch
    ``i`` comes from the entries of previous task ``i``; a stratum smaller than
    the batch is sampled with replacement, an empty one falls back to the pool.
    """
    if t < 2:
        raise ValueError("replay starts at the second task")
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    if mode not in ("stratified", "pooled"):
        raise ValueError(f"unknown replay sampling mode {mode!r}")
    tasks = np.asarray([task for _, task in buffer.entries])
    if (tasks >= t - 1).any():
        raise ValueError("buffer holds examples of the current task")
    pool = np.arange(len(buffer))
    batches = []
    for prev in range(t - 1):
        stratum = np.flatnonzero(tasks == prev) if mode == "stratified" else pool
        if len(stratum) == 0:
            stratum = pool
        replace = len(stratum) < batch_size
        batches.append(rng.choice(stratum, size=batch_size, replace=replace))
    return batches
