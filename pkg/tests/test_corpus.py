import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idbr.corpus import (
    MAX_LEN,
    OOV,
    BENCHMARK_TRAIN_SIZES,
    SEP,
    CsvSource,
    DatasetError,
    Example,
    LabeledDataset,
    RawExample,
    SyntheticSource,
    TaskDescriptor,
    TaskInfo,
    Vocabulary,
    build_task_sequence,
    draw_split,
    load_dataset,
    make_nsp_pair,
    merge_label_space,
    resolve_order,
    strip_sep,
    subsample_split,
)
from idbr.synthetic import SyntheticConfig, synthetic_registry


def write_csv(path, rows, header=("label", "text")):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        writer.writerows(rows)
    return path


def toy_example(tokens, label=0, task=0, uid=1):
    return Example(uid, tuple(tokens), "", label, task)


# ---------------------------------------------------------------------------
# load_dataset


def test_load_csv_ag_news_test_shape(tmp_path):
    # same shape as the AG News test split: 7600 rows, 4 balanced classes
    rows = [(1 + i % 4, f"headline number {i}") for i in range(7600)]
    data = load_dataset(CsvSource("ag", write_csv(tmp_path / "test.csv", rows), 4))
    assert len(data) == 7600
    assert data.num_classes == 4
    assert data.class_counts() == {0: 1900, 1: 1900, 2: 1900, 3: 1900}
    assert [ex.index for ex in data.examples] == list(range(7600))


def test_labels_become_zero_based(tmp_path):
    data = load_dataset(CsvSource("t", write_csv(tmp_path / "a.csv", [(1, "x y"), (3, "z w")]), 3))
    assert [ex.label for ex in data.examples] == [0, 2]


def test_extra_text_columns_are_joined(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text('label,text\n2,"title","body text"\n')
    data = load_dataset(CsvSource("t", path, 2))
    assert data.examples[0].text == "title body text"


@pytest.mark.parametrize("content", ["", "label,text\n"])
def test_empty_file_has_no_examples(tmp_path, content):
    path = tmp_path / "empty.csv"
    path.write_text(content)
    with pytest.raises(DatasetError, match="no examples"):
        load_dataset(CsvSource("t", path, 2))


def test_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,text\n1,fine\nnotanumber,oops\n")
    with pytest.raises(DatasetError, match=r":3:"):
        load_dataset(CsvSource("t", path, 2))


def test_label_out_of_range(tmp_path):
    path = write_csv(tmp_path / "a.csv", [(1, "a b"), (5, "c d")])
    with pytest.raises(DatasetError, match="outside 1..4"):
        load_dataset(CsvSource("t", path, 4))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(CsvSource("t", tmp_path / "nope.csv", 2))


def test_synthetic_generator_counts():
    cfg = SyntheticConfig(n_tasks=3, num_classes=(2, 2, 2))
    total = 0
    per_label = {}
    for i, name in enumerate(cfg.task_names):
        data = load_dataset(SyntheticSource(name, i, 2, 100, seed=7, params=cfg))
        for ex in data.examples:
            total += 1
            per_label[(name, ex.label)] = per_label.get((name, ex.label), 0) + 1
    assert total == 600
    assert set(per_label.values()) == {100}


def test_synthetic_generator_is_deterministic():
    src = SyntheticSource("a", 0, 3, 20, seed=3)
    assert load_dataset(src) == load_dataset(src)
    other = load_dataset(SyntheticSource("a", 0, 3, 20, seed=4))
    assert other != load_dataset(src)


def test_synthetic_tasks_have_disjoint_content_vocab():
    cfg = SyntheticConfig()
    vocab = {}
    for entry in synthetic_registry(cfg, 0):
        words = {w for ex in load_dataset(entry.train_source).examples for w in ex.text.split()}
        vocab[entry.name] = {w for w in words if w[0] == entry.name}
        structural = words - vocab[entry.name]
        assert all(w[0] in "oc" and w[1:].isdigit() for w in structural)
    assert not vocab["a"] & vocab["b"] and not vocab["b"] & vocab["c"]


# ---------------------------------------------------------------------------
# subsample_split


def balanced(n_classes, per_class, name="d"):
    exs = [RawExample(f"t{i}", i % n_classes, i) for i in range(n_classes * per_class)]
    return LabeledDataset(name, n_classes, tuple(exs))


def test_subsample_ag_news_train_size():
    train, val = subsample_split(balanced(4, 4100, "ag"), 2000, 2000, seed=0)
    assert len(train) == BENCHMARK_TRAIN_SIZES["ag"] == 8000
    assert len(val) == 8000


def test_subsample_zero_train():
    train, val = subsample_split(balanced(2, 5), 0, 2, seed=0)
    assert len(train) == 0 and len(val) == 4


def test_subsample_toy_disjoint_and_balanced():
    data = balanced(2, 5)
    train, val = subsample_split(data, 3, 2, seed=11)
    train_ids = {ex.index for ex in train.examples}
    val_ids = {ex.index for ex in val.examples}
    assert train_ids.isdisjoint(val_ids)
    assert train.class_counts() == {0: 3, 1: 3}
    assert val.class_counts() == {0: 2, 1: 2}
    assert train_ids | val_ids == {ex.index for ex in data.examples}


def test_subsample_names_short_class():
    exs = tuple(RawExample("t", 0, i) for i in range(5)) + (RawExample("t", 1, 5),)
    with pytest.raises(DatasetError, match="class 1"):
        subsample_split(LabeledDataset("d", 2, exs), 2, 1, seed=0)


@settings(max_examples=40, deadline=None)
@given(
    n_classes=st.integers(1, 5),
    per_class=st.integers(2, 12),
    seed=st.integers(0, 2**31),
    data=st.data(),
)
def test_subsample_properties(n_classes, per_class, seed, data):
    k_train = data.draw(st.integers(0, per_class))
    k_val = data.draw(st.integers(0, per_class - k_train))
    dataset = balanced(n_classes, per_class)
    train, val = subsample_split(dataset, k_train, k_val, seed)
    assert set(train.class_counts().values()) <= {k_train}
    assert set(val.class_counts().values()) <= {k_val}
    assert {e.index for e in train.examples}.isdisjoint(e.index for e in val.examples)
    assert (train, val) == subsample_split(dataset, k_train, k_val, seed)


# ---------------------------------------------------------------------------
# merge_label_space


def test_benchmark_label_space_has_33_classes():
    tasks = [TaskInfo("ag", 4), TaskInfo("yelp", 5), TaskInfo("amazon", 5),
             TaskInfo("dbpedia", 14), TaskInfo("yahoo", 10)]
    offsets, total = merge_label_space(tasks, [["yelp", "amazon"]])
    assert total == 33
    assert offsets["yelp"] == offsets["amazon"]
    assert offsets == {"ag": 0, "yelp": 4, "amazon": 4, "dbpedia": 9, "yahoo": 23}


def test_single_task_identity():
    assert merge_label_space([TaskInfo("x", 6)]) == ({"x": 0}, 6)


def test_disjoint_tasks():
    assert merge_label_space([TaskInfo("p", 3), TaskInfo("q", 4)]) == ({"p": 0, "q": 3}, 7)


def test_merge_group_mismatch():
    with pytest.raises(DatasetError, match="mismatched"):
        merge_label_space([TaskInfo("p", 3), TaskInfo("q", 4)], [["p", "q"]])


@given(st.lists(st.integers(1, 20), min_size=1, max_size=8))
def test_unmerged_ranges_do_not_overlap(sizes):
    tasks = [TaskInfo(f"t{i}", k) for i, k in enumerate(sizes)]
    offsets, total = merge_label_space(tasks)
    assert total == sum(sizes)
    ranges = sorted((offsets[t.name], offsets[t.name] + t.num_classes) for t in tasks)
    assert all(a[1] <= b[0] for a, b in zip(ranges, ranges[1:]))


# ---------------------------------------------------------------------------
# NSP pairs


def test_nsp_pair_direct_construction():
    a, b, c, d = 10, 11, 12, 13
    is_next, not_next = make_nsp_pair(toy_example([a, b, c, d], label=3, task=1), 2)
    assert is_next.tokens == (a, b, SEP, c, d) and is_next.nsp_label_l == 0
    assert not_next.tokens == (c, d, SEP, a, b) and not_next.nsp_label_l == 1
    for form in (is_next, not_next):
        assert (form.label_y, form.task_id_z) == (3, 1)


def test_nsp_swap_twice_restores_order():
    x = toy_example([5, 6, 7, 8, 9])
    is_next, not_next = make_nsp_pair(x, 2)
    _, swapped_back = make_nsp_pair(toy_example(strip_sep(not_next)), not_next.split_index)
    assert swapped_back.tokens == is_next.tokens


def test_random_splits_cover_interior():
    rng = np.random.default_rng(0)
    seen = {draw_split(5, rng) for _ in range(1000)}
    assert seen == {1, 2, 3, 4}


@pytest.mark.parametrize("tokens,split", [([4], 1), ([4, 5, 6], 0), ([4, 5, 6], 3)])
def test_nsp_pair_rejects_bad_input(tokens, split):
    with pytest.raises(DatasetError):
        make_nsp_pair(toy_example(tokens), split)


@given(st.lists(st.integers(3, 50), min_size=2, max_size=30), st.data())
def test_nsp_pair_roundtrip(tokens, data):
    split = data.draw(st.integers(1, len(tokens) - 1))
    is_next, not_next = make_nsp_pair(toy_example(tokens), split)
    assert strip_sep(is_next) == tuple(tokens)
    # undo the swap on the NotNext form
    k = not_next.split_index
    body = not_next.tokens
    assert body[k + 1 :] + body[:k] == tuple(tokens)
    assert sorted(strip_sep(not_next)) == sorted(tokens)


def test_example_invariants():
    with pytest.raises(DatasetError):
        Example(1, (), "", 0, 0)
    with pytest.raises(DatasetError):
        Example(1, (4, 5), "", 0, 0, nsp_label_l=2)
    with pytest.raises(DatasetError):
        Example(1, (4, 5, 6), "", 0, 0, split_index=1)  # not a SEP


# ---------------------------------------------------------------------------
# Tokenization


def test_vocabulary_lowercases_and_maps_oov():
    vocab = Vocabulary.build(["The cat", "the dog the"], max_size=5)
    assert vocab.tokens[3] == "the"
    assert len(vocab) == 5
    ids = vocab.encode("THE Cat bird")
    assert ids[0] == vocab.index["the"] and ids[2] == OOV


def test_vocabulary_truncates_tail():
    vocab = Vocabulary.build(["w"])
    assert len(vocab.encode(" ".join(["w"] * 300))) == MAX_LEN


# ---------------------------------------------------------------------------
# Task sequences


def descriptor(name, k=2, offset=0):
    ex = (Example(hash(name) & 0xFFFF, (4, 5), "", offset, 0),)
    return TaskDescriptor(name, k, offset, ex, ex, ex)


BENCHMARK_NAMES = ("ag", "yelp", "amazon", "dbpedia", "yahoo")


def test_benchmark_order_one():
    reg = {n: descriptor(n) for n in BENCHMARK_NAMES}
    seq = build_task_sequence(1, reg)
    assert seq.names == ["ag", "yelp", "yahoo"]
    assert [t.train[0].task_id_z for t in seq.tasks] == [0, 1, 2]


def test_benchmark_order_four():
    reg = {n: descriptor(n) for n in BENCHMARK_NAMES}
    assert build_task_sequence(4, reg).names == ["ag", "yelp", "amazon", "yahoo", "dbpedia"]


def test_all_benchmark_orders_have_length_three_or_five():
    assert all(len(resolve_order(i)) in (3, 5) for i in range(1, 8))


def test_custom_order():
    reg = {"a": descriptor("a"), "b": descriptor("b", offset=2)}
    seq = build_task_sequence("a,b", reg)
    assert len(seq) == 2 and seq.num_global_classes == 4


def test_unknown_order_and_task():
    reg = {"a": descriptor("a")}
    with pytest.raises(DatasetError, match="unknown order"):
        build_task_sequence(9, reg)
    with pytest.raises(DatasetError, match="unknown task"):
        build_task_sequence("a,zz", reg)
    with pytest.raises(DatasetError, match="repeat"):
        build_task_sequence("a,a", reg)
