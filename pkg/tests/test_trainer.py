import numpy as np
import pytest
import torch

from idbr.corpus import build_task_sequence
from idbr.data import prepare_synthetic
from idbr.memory import ReplayBuffer, store_size
from idbr.model import clone_frozen
from idbr.objectives import LossWeights, MissingSnapshotError, compute_snapshots
from idbr.synthetic import SyntheticConfig
from idbr.trainer import TrainConfig, encode_set, run_baseline, run_sequence, train_task

SMALL = SyntheticConfig(per_class_train=40, per_class_val=10, per_class_test=20)
ZERO = LossWeights(0.0, 0.0, 0.0, 0.0)


@pytest.fixture(scope="module")
def data():
    return prepare_synthetic(SMALL, seed=0)


@pytest.fixture(scope="module")
def sequence(data):
    return build_task_sequence("a,b,c", data.registry)


def cfg(**kw):
    base = dict(embed_dim=16, hidden_dim=32, repr_dim=32, feature_dim=16, epochs_per_task=1,
                store_ratio=0.1, kmeans_restarts=2, seed=0)
    return TrainConfig(**{**base, **kw})


def run(sequence, data, **kw):
    return run_sequence(sequence, cfg(**kw), data.vocab_size)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# -- config validation ---------------------------------------------------------


@pytest.mark.parametrize("kw", [
    {"method": "nope"},
    {"replay_frequency": 0},
    {"store_ratio": 1.5},
    {"method": "replay", "no_nsp": True},
    {"reg_g_only": True, "reg_s_only": True},
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_roundtrip():
    c = cfg(weights=LossWeights(1.0, 2.0, 3.0, 4.0), no_task=True)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rat": 1.0})


def test_defaults_match_reference_hyperparameters():
    c = TrainConfig()
    assert (c.replay_frequency, c.store_ratio) == (10, 0.01)
    assert c.weights == LossWeights(2.5, 2.0, 0.25, 0.20)
    assert (c.repr_dim, c.feature_dim) == (128, 128)
    p = TrainConfig.pretrained()
    assert (p.learning_rate, p.task_head_learning_rate) == (3e-5, 5e-4)


# -- replay schedule and buffer accounting ---------------------------------------


def test_no_replay_on_first_task(sequence, data):
    result = run(sequence, data, method="idbr")
    assert result.replay_events(1) == 0
    assert all(r["source"] == "current" for r in result.logs if r["task"] == 1)


def test_replay_every_beta_steps(data):
    task = data.registry["c"]  # 4 classes x 40 = 160 examples -> 20 steps at batch 8
    seq = build_task_sequence("a,b,c", data.registry)
    result = run(seq, data, method="replay")
    for t in (2, 3):
        steps = result.current_steps(t)
        assert result.replay_events(t) == steps // 10
        mem = [r for r in result.logs if r["task"] == t and r["source"] == "memory"]
        assert len(mem) == (t - 1) * (steps // 10)
        assert {r["step"] % 10 for r in mem} == ({0} if mem else set())
    assert result.current_steps(3) == int(np.ceil(len(task.train) / 8))


def test_hundred_steps_give_ten_events_of_two_batches(data):
    seq = build_task_sequence("a,b,c", data.registry)
    config = cfg(method="replay", epochs_per_task=5)  # task c: 20 steps per epoch
    result = run_sequence(seq, config, data.vocab_size)
    assert result.current_steps(3) == 100
    assert result.replay_events(3) == 10
    mem = [r for r in result.logs if r["task"] == 3 and r["source"] == "memory"]
    assert len(mem) == 20
    assert sorted({r["replay_batch"] for r in mem}) == [0, 1]


@pytest.mark.parametrize("method", ["replay", "regularization", "idbr"])
@pytest.mark.parametrize("gamma", [0.02, 0.1, 0.33])
def test_buffer_size_accounting(sequence, data, method, gamma):
    result = run(sequence, data, method=method, store_ratio=gamma)
    expected = [store_size(len(task.train), gamma) for task in sequence.tasks]
    assert len(result.buffer) == sum(expected)
    assert result.buffer.per_task_counts == {i: n for i, n in enumerate(expected) if n}
    # stored examples come from their own task's training set
    for ex, task in result.buffer.entries:
        assert ex.task_id_z == task
        assert ex in sequence.tasks[task].train


def test_finetune_keeps_no_memory(sequence, data):
    result = run(sequence, data, method="finetune")
    assert len(result.buffer) == 0
    assert all(r["source"] == "current" for r in result.logs)


# -- snapshots -----------------------------------------------------------------


def test_snapshots_required_for_regularized_tasks(sequence, data):
    config = cfg(method="idbr")
    rng = np.random.default_rng(0)
    from idbr.model import build_model
    model = build_model(config.model_config(data.vocab_size, 3, sequence.num_global_classes))
    train_set = encode_set(sequence.tasks[1].train, rng)
    with pytest.raises(MissingSnapshotError):
        train_task(model, 2, train_set, ReplayBuffer(), config, rng)


def test_snapshot_store_is_unchanged_by_training(sequence, data):
    config = cfg(method="idbr")
    rng = np.random.default_rng(0)
    from idbr.model import build_model
    model = build_model(config.model_config(data.vocab_size, 3, sequence.num_global_classes))
    train_set = encode_set(sequence.tasks[1].train, rng)
    store = compute_snapshots(clone_frozen(model), train_set.uids, train_set.is_next)
    g0, s0 = (x.clone() for x in store.tensors())
    assert len(store) == len(train_set)
    train_task(model, 2, train_set, ReplayBuffer(), config, rng, snapshots=store)
    g1, s1 = store.tensors()
    assert torch.equal(g0, g1) and torch.equal(s0, s1)
    # the stored targets equal a recomputation on a fresh frozen copy of the start state
    fresh = build_model(config.model_config(data.vocab_size, 3, sequence.num_global_classes))
    again = compute_snapshots(clone_frozen(fresh), train_set.uids, train_set.is_next)
    assert torch.equal(again.tensors()[0], g0) and torch.equal(again.tensors()[1], s0)


# -- degenerate configurations ---------------------------------------------------


def single_task(data):
    return build_task_sequence("a", data.registry)


def test_finetune_equals_replay_on_one_task(data):
    seq = single_task(data)
    a = run(seq, data, method="finetune")
    b = run(seq, data, method="replay")
    assert a.accuracy.rows == b.accuracy.rows
    assert params_equal(a.model, b.model)


def test_regularization_with_zero_weights_equals_replay(sequence, data):
    a = run(sequence, data, method="replay")
    b = run(sequence, data, method="regularization", weights=ZERO)
    assert a.accuracy.rows == b.accuracy.rows
    assert params_equal(a.model, b.model)


def test_idbr_without_its_parts_equals_finetune(sequence, data):
    a = run(sequence, data, method="finetune")
    b = run(sequence, data, method="idbr", weights=ZERO, no_nsp=True, no_task=True,
            store_ratio=0.0)
    assert a.accuracy.rows == b.accuracy.rows
    assert params_equal(a.model, b.model)


def test_baseline_helper(sequence, data):
    a = run_baseline("replay", sequence, cfg(method="idbr"), data.vocab_size)
    assert a.method == "replay"
    with pytest.raises(ValueError):
        run_baseline("idbr", sequence, cfg(), data.vocab_size)


# -- determinism and resume ------------------------------------------------------


@pytest.mark.parametrize("method", ["finetune", "idbr", "mtl"])
def test_same_seed_same_matrix(sequence, data, method):
    a = run(sequence, data, method=method)
    b = run(sequence, data, method=method)
    assert a.accuracy.rows == b.accuracy.rows
    assert params_equal(a.model, b.model)


def test_different_seed_differs(sequence, data):
    a = run(sequence, data, method="idbr")
    b = run(sequence, data, method="idbr", seed=1)
    assert not params_equal(a.model, b.model)


@pytest.mark.parametrize("keep", [1, 2])
def test_resume_matches_uninterrupted_run(sequence, data, tmp_path, keep):
    config = cfg(method="idbr")
    full = run_sequence(sequence, config, data.vocab_size, checkpoint_dir=tmp_path)
    # simulate a run interrupted after task `keep`
    for t in range(keep + 1, 4):
        (tmp_path / f"task-{t}.pt").unlink()
    resumed = run_sequence(sequence, config, data.vocab_size, checkpoint_dir=tmp_path)
    assert resumed.accuracy.rows == full.accuracy.rows
    assert params_equal(resumed.model, full.model)
    assert resumed.buffer.to_records() == full.buffer.to_records()
    assert resumed.logs == full.logs


# -- outcomes --------------------------------------------------------------------


def test_mtl_gives_one_row(sequence, data):
    result = run(sequence, data, method="mtl")
    assert len(result.accuracy) == 1 and len(result.accuracy[0]) == 3


def test_matrix_is_lower_triangular(sequence, data):
    result = run(sequence, data, method="replay")
    assert [len(r) for r in result.accuracy.rows] == [1, 2, 3]


def test_finetune_forgets_first_task(sequence, data):
    result = run(sequence, data, method="finetune", epochs_per_task=3)
    assert result.accuracy[2][0] < result.accuracy[0][0]


def test_empty_sequence_rejected(data):
    from idbr.corpus import TaskSequence
    with pytest.raises(ValueError, match="empty"):
        run_sequence(TaskSequence("x", (), 0), cfg(), data.vocab_size)
