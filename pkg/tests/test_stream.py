import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwf.backbone import ModelConfig, build_model, predict
from rwf.numerics import RngStream
from rwf.stream import (
    Dataset,
    SinglePassError,
    StreamConfig,
    Task,
    TaskStream,
    dataset_bytes,
    iterate_single_pass,
    iterate_union_single_pass,
    load_dataset,
    load_partition,
    make_synthetic_stream,
    save_partition,
    serialize_stream,
    split_tasks,
    subsample_fraction,
    synthetic_dataset,
    write_dataset,
)
from rwf.training import OptState, train_step

GOLDEN = Path(__file__).parent / "golden"
SMALL = dict(T=3, classes_per_task=2, samples_per_class=10, L_in=4, input_dim=6)


def test_config_validation():
    with pytest.raises(ValueError):
        StreamConfig(few_shot_fraction=0.0)
    with pytest.raises(ValueError):
        StreamConfig(class_geometry="blobs")
    with pytest.raises(ValueError):
        StreamConfig.from_dict({"noise": 0.1})
    assert StreamConfig().num_classes == 20


def test_stream_shapes_and_disjointness():
    s = make_synthetic_stream(StreamConfig(**SMALL))
    assert s.T == 3 and s.num_classes == 6
    all_classes = sorted(c for t in s.tasks for c in t.classes)
    assert all_classes == list(range(6))
    for t in s.tasks:
        assert t.train_x.shape == (16, 4, 6) and t.test_x.shape == (4, 4, 6)
        assert set(np.unique(t.train_y)) == set(t.classes)
    assert s.total_train() == 48


def test_overlapping_tasks_rejected():
    x = np.zeros((1, 1, 2))
    t1 = Task([0, 1], x, np.array([0]), x, np.array([0]))
    t2 = Task([1, 2], x, np.array([1]), x, np.array([1]))
    with pytest.raises(ValueError):
        TaskStream([t1, t2], 3)


def test_indivisible_split_rejected():
    data = synthetic_dataset(5, 4, 2, 3, 0.1, RngStream(0))
    with pytest.raises(ValueError):
        split_tasks(data, 2, seed=0)


def test_noiseless_samples_are_identical_per_class():
    data = synthetic_dataset(3, 5, 4, 6, 0.0, RngStream(0))
    for c in range(3):
        xs = data.x[data.y == c]
        assert np.all(xs == xs[0])


def test_seeds_give_distinct_geometries():
    a = make_synthetic_stream(StreamConfig(**SMALL, seed=0))
    b = make_synthetic_stream(StreamConfig(**SMALL, seed=1))
    assert serialize_stream(a) != serialize_stream(b)
    assert serialize_stream(a) == serialize_stream(make_synthetic_stream(StreamConfig(**SMALL, seed=0)))


def test_class_subspaces_nearly_orthogonal():
    data = synthetic_dataset(4, 50, 8, 64, 0.0, RngStream(3))
    means = np.stack([data.x[data.y == c][0].ravel() for c in range(4)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    cos = means @ means.T
    assert np.max(np.abs(cos - np.eye(4))) < 0.35


def _probe_accuracy(noise, seed):
    sc = StreamConfig(noise_std=noise, seed=seed)
    stream = make_synthetic_stream(sc)
    cfg = ModelConfig(L=sc.L_in, input_dim=sc.input_dim, num_classes=sc.num_classes, k=0,
                      backbone_mode="frozen_random")
    model = build_model(cfg, RngStream(seed))
    opt = OptState.for_model(model, lr=1e-2)
    task = stream.tasks[0]
    for epoch in range(30):
        order = RngStream(seed).child(epoch).permutation(len(task.train_y))
        for s in range(0, len(order), 32):
            sel = order[s : s + 32]
            train_step(model, task.train_x[sel], task.train_y[sel], opt, task.classes)
    return np.mean(predict(model, task.test_x, task.classes) == task.test_y)


@pytest.mark.slow
@pytest.mark.parametrize("noise", [0.3, 0.8])
def test_linear_probe_on_frozen_random_features(noise):
    # 0.8 is the bundled default noise level; 0.3 the lower reference point
    assert _probe_accuracy(noise, seed=0) >= 0.8


# --- partition / subsampling ---------------------------------------------------


def test_partition_golden(tmp_path):
    gold = json.loads((GOLDEN / "partition.json").read_text())
    s = make_synthetic_stream(StreamConfig(seed=gold["seed"]))
    assert s.partition() == gold["tasks"]
    save_partition(tmp_path / "p.json", s)
    assert load_partition(tmp_path / "p.json") == gold["tasks"]


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_subsample_nested_and_ceil(seed):
    base = make_synthetic_stream(StreamConfig(**SMALL, seed=seed))
    prev = None
    for frac in (1.0, 0.7, 0.5, 0.2):
        sub = subsample_fraction(make_synthetic_stream(StreamConfig(**SMALL, seed=seed)), frac, seed)
        for t_sub, t_base in zip(sub.tasks, base.tasks):
            for c in t_sub.classes:
                assert np.sum(t_sub.train_y == c) == int(np.ceil(frac * 8))
            np.testing.assert_array_equal(t_sub.test_x, t_base.test_x)
        rows = {t.train_x[i].tobytes() for t in sub.tasks for i in range(len(t.train_y))}
        if prev is not None:
            assert rows <= prev
        prev = rows


def test_few_shot_config_applies_fraction():
    s = make_synthetic_stream(StreamConfig(**SMALL, few_shot_fraction=0.5))
    assert s.total_train() == 3 * 2 * 4


# --- single pass -------------------------------------------------------------------


def test_single_pass_serves_each_sample_once():
    s = make_synthetic_stream(StreamConfig(**SMALL))
    rows = []
    for t in range(s.T):
        for x, _ in iterate_single_pass(s, t, 5, seed=0):
            rows.extend(r.tobytes() for r in x)
    assert s.served == s.total_train() == len(rows) == len(set(rows))
    with pytest.raises(SinglePassError):
        iterate_single_pass(s, 0, 5, seed=0)


def test_union_pass_covers_everything_once():
    s = make_synthetic_stream(StreamConfig(**SMALL))
    ys = np.concatenate([y for _, y in iterate_union_single_pass(s, 7, seed=1)])
    assert len(ys) == s.total_train() and s.served == len(ys)
    assert all(t.consumed.all() for t in s.tasks)
    with pytest.raises(SinglePassError):
        iterate_union_single_pass(s, 7, seed=1)


def test_partial_iteration_blocks_union():
    s = make_synthetic_stream(StreamConfig(**SMALL))
    next(iterate_single_pass(s, 0, 4, seed=0))
    with pytest.raises(SinglePassError):
        iterate_union_single_pass(s, 4, seed=0)


def test_batch_order_depends_on_seed_only():
    a = make_synthetic_stream(StreamConfig(**SMALL))
    b = make_synthetic_stream(StreamConfig(**SMALL))
    ya = [y.tolist() for _, y in iterate_single_pass(a, 1, 3, seed=4)]
    yb = [y.tolist() for _, y in iterate_single_pass(b, 1, 3, seed=4)]
    assert ya == yb


# --- dataset file ---------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    data = synthetic_dataset(3, 4, 2, 5, 0.2, RngStream(0))
    write_dataset(tmp_path / "d.bin", data)
    back = load_dataset(tmp_path / "d.bin")
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.x, data.x.astype(np.float32))
    assert back.num_classes == 3
    assert dataset_bytes(back) == (tmp_path / "d.bin").read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    data = Dataset(np.zeros((0, 2, 3)), np.zeros(0, dtype=np.int64), 4)
    write_dataset(tmp_path / "e.bin", data)
    assert len(load_dataset(tmp_path / "e.bin")) == 0


@pytest.mark.parametrize("damage", ["magic", "truncate", "label", "short"])
def test_corrupt_dataset_fails_closed(tmp_path, damage):
    raw = bytearray(dataset_bytes(synthetic_dataset(3, 4, 2, 5, 0.2, RngStream(0))))
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "truncate":
        raw = raw[:-3]
    elif damage == "label":
        raw[24:28] = (99).to_bytes(4, "little")
    else:
        raw = raw[:10]
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "bad.bin")
