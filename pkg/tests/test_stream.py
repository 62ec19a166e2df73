import numpy as np
import pytest

from lrcp.errors import (
    ConfigError,
    GenerationError,
    LengthMismatchError,
    MalformedHeaderError,
    NonFiniteValueError,
)
from lrcp.stream import (
    SyntheticStreamConfig,
    generate_synthetic,
    load_feature_file,
    merge_tasks,
    read_fvec,
    rotation_matrix,
    split_domains,
    split_stream,
    stream_arrays,
    write_flbl,
    write_fvec,
)


def test_binary_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    write_fvec(tmp_path / "f.fvec", x)
    write_flbl(tmp_path / "l.flbl", [0, 1, 0])
    fx, fy = load_feature_file(tmp_path / "f.fvec", tmp_path / "l.flbl")
    assert np.array_equal(fx, x) and fy.tolist() == [0, 1, 0]
    fx, fy = load_feature_file(tmp_path / "f.fvec")
    assert fy is None


def test_csv_fallback(tmp_path):
    (tmp_path / "f.csv").write_text("dim=2\n1,2\n3,4\n5,6\n")
    (tmp_path / "l.csv").write_text("0\n1\n0\n")
    x, y = load_feature_file(tmp_path / "f.csv", tmp_path / "l.csv")
    assert x.shape == (3, 2) and y.tolist() == [0, 1, 0]


def test_feature_file_guards(tmp_path):
    write_fvec(tmp_path / "f.fvec", np.ones((3, 2)))
    write_flbl(tmp_path / "l.flbl", [0, 1])
    with pytest.raises(LengthMismatchError):
        load_feature_file(tmp_path / "f.fvec", tmp_path / "l.flbl")
    bad = np.ones((3, 2))
    bad[2, 1] = np.nan
    write_fvec(tmp_path / "n.fvec", bad)
    write_flbl(tmp_path / "l3.flbl", [0, 1, 0])
    with pytest.raises(NonFiniteValueError, match="row 2"):
        load_feature_file(tmp_path / "n.fvec", tmp_path / "l3.flbl")
    (tmp_path / "short.fvec").write_bytes(b"FVEC")
    with pytest.raises(MalformedHeaderError):
        read_fvec(tmp_path / "short.fvec")


def test_split_shapes_and_disjointness():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(100), 10)
    x = rng.normal(size=(1000, 3))
    tasks = split_stream(x, y, 20, 5, seed=1)
    assert len(tasks) == 20 and all(len(t.classes) == 5 for t in tasks)
    seen = [c for t in tasks for c in t.classes]
    assert len(set(seen)) == 100


def test_split_two_tasks_partition_and_determinism():
    y = np.repeat(np.arange(10), 6)
    x = np.arange(60.0)[:, None]
    a, b = split_stream(x, y, 2, 5, seed=3), split_stream(x, y, 2, 5, seed=3)
    assert set(a[0].classes) | set(a[1].classes) == set(range(10))
    assert not set(a[0].classes) & set(a[1].classes)
    assert all(np.array_equal(p.train_x, q.train_x) for p, q in zip(a, b))
    with pytest.raises(ConfigError):
        split_stream(x, y, 3, 5)


def test_split_domains_and_merge():
    y = np.tile(np.arange(3), 20)
    dom = np.repeat([0, 1], 30)
    tasks = split_domains(np.zeros((60, 2)), y, dom)
    assert [t.domain for t in tasks] == [0, 1]
    merged = merge_tasks(tasks)
    assert len(merged.train_y) + len(merged.test_y) == 60


def nearest_mean_accuracy(tasks):
    train_x = np.concatenate([t.train_x for t in tasks])
    train_y = np.concatenate([t.train_y for t in tasks])
    classes = np.unique(train_y)
    means = np.stack([train_x[train_y == c].mean(0) for c in classes])
    test_x = np.concatenate([t.test_x for t in tasks])
    test_y = np.concatenate([t.test_y for t in tasks])
    pred = classes[np.argmin(((test_x[:, None] - means[None]) ** 2).sum(-1), axis=1)]
    return float(np.mean(pred == test_y))


def test_synthetic_separable():
    tasks = generate_synthetic(SyntheticStreamConfig(cluster_separation=10.0, samples_per_class=100))
    assert nearest_mean_accuracy(tasks) == 1.0
    assert all(len(t.test_y) == 2 * 20 for t in tasks)


def test_synthetic_chance_level():
    cfg = SyntheticStreamConfig(n_tasks=1, classes_per_task=4, cluster_separation=0.01,
                                noise_sigma=10.0, samples_per_class=500)
    assert abs(nearest_mean_accuracy(generate_synthetic(cfg)) - 0.25) < 0.08


def test_synthetic_di_zero_rotation_is_identity():
    cfg = SyntheticStreamConfig(protocol="di", n_tasks=2, classes_per_task=3, di_angle_step=0.0,
                                samples_per_class=2000, seed=4)
    a, b = generate_synthetic(cfg)
    assert a.classes == b.classes
    assert np.array_equal(rotation_matrix(32, 0.0), np.eye(32))
    for c in a.classes:
        # means of 1600 unit-variance draws: differences stay well inside 0.2
        assert np.allclose(a.train_x[a.train_y == c].mean(0), b.train_x[b.train_y == c].mean(0), atol=0.2)


def test_synthetic_deterministic_and_flatten():
    cfg = SyntheticStreamConfig(n_tasks=2, samples_per_class=20)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert all(np.array_equal(p.train_x, q.train_x) for p, q in zip(a, b))
    x, y, task = stream_arrays(a)
    assert len(x) == len(y) == len(task) == 80


def test_synthetic_generation_failure():
    cfg = SyntheticStreamConfig(n_tasks=5, classes_per_task=2, input_dim=1,
                                cluster_separation=50.0, max_retries=3)
    with pytest.raises(GenerationError):
        generate_synthetic(cfg)


def test_synthetic_config_guards():
    with pytest.raises(ConfigError):
        SyntheticStreamConfig(protocol="xx")
    with pytest.raises(ConfigError):
        SyntheticStreamConfig(noise_sigma=0)
