import numpy as np
import pytest
import torch

from idbr.corpus import SEP
from idbr.model import ModelConfig, build_model
from idbr.objectives import Batch

TOY = ModelConfig(vocab_size=7, n_tasks=3, n_classes=4, embed_dim=2, hidden_dim=4,
                  repr_dim=4, feature_dim=3, seed=5)


def toy_batch(n=5, seed=0, n_tasks=3, n_classes=4, vocab=7):
    """Random NSP-form batch over the toy vocabulary (content ids 3..vocab-1)."""
    rng = np.random.default_rng(seed)
    is_next, not_next = [], []
    for _ in range(n):
        length = int(rng.integers(2, 6))
        x = list(rng.integers(3, vocab, size=length))
        cut = int(rng.integers(1, length))
        is_next.append(x[:cut] + [SEP] + x[cut:])
        not_next.append(x[cut:] + [SEP] + x[:cut])
    width = max(len(r) for r in is_next)

    def pad(rows):
        return torch.tensor([r + [0] * (width - len(r)) for r in rows])

    return Batch(
        uids=np.arange(100, 100 + n, dtype=np.int64),
        is_next=pad(is_next),
        not_next=pad(not_next),
        labels=torch.as_tensor(rng.integers(0, n_classes, size=n)),
        task_ids=torch.as_tensor(rng.integers(0, n_tasks, size=n)),
    )


@pytest.fixture
def toy_model():
    return build_model(TOY)


# acceptance verdicts, printed once at the end of the session
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
