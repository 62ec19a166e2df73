"""Task streams: feature-file ingestion, class/domain splitting, synthetic data."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    ConfigError,
    FeatureFileError,
    GenerationError,
    LengthMismatchError,
    MalformedHeaderError,
    NonFiniteValueError,
)


@dataclass
class TaskSpec:
    task_index: int
    classes: tuple
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    domain: Optional[int] = None
    train_ids: Optional[np.ndarray] = None
    test_ids: Optional[np.ndarray] = None


# binary feature tables -------------------------------------------------------
#   features: "FVEC" u16 version u32 rows u32 dim, then rows*dim float32
#   labels:   "FLBL" u16 version u32 rows, then rows uint32
#   little-endian

FORMAT_VERSION = 1
_FVEC = struct.Struct("<4sHII")
_FLBL = struct.Struct("<4sHI")


def write_fvec(path, features):
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise FeatureFileError("features must be a 2-D matrix")
    rows, dim = features.shape
    Path(path).write_bytes(_FVEC.pack(b"FVEC", FORMAT_VERSION, rows, dim) + features.tobytes())


def write_flbl(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and labels.min() < 0):
        raise FeatureFileError("labels must be a 1-D array of nonnegative ints")
    Path(path).write_bytes(
        _FLBL.pack(b"FLBL", FORMAT_VERSION, len(labels)) + labels.astype("<u4").tobytes()
    )


def read_fvec(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _FVEC.size:
        raise MalformedHeaderError(f"{path}: too short for an FVEC header")
    magic, version, rows, dim = _FVEC.unpack_from(blob)
    if magic != b"FVEC":
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported FVEC version {version}")
    expected = _FVEC.size + rows * dim * 4
    if len(blob) != expected:
        raise MalformedHeaderError(
            f"{path}: header says {rows}x{dim}, file has {len(blob)} bytes (expected {expected})"
        )
    return np.frombuffer(blob, dtype="<f4", offset=_FVEC.size).reshape(rows, dim).astype(np.float32)


def read_flbl(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _FLBL.size:
        raise MalformedHeaderError(f"{path}: too short for an FLBL header")
    magic, version, rows = _FLBL.unpack_from(blob)
    if magic != b"FLBL":
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported FLBL version {version}")
    if len(blob) != _FLBL.size + 4 * rows:
        raise MalformedHeaderError(f"{path}: header says {rows} labels, size disagrees")
    return np.frombuffer(blob, dtype="<u4", offset=_FLBL.size).astype(np.int64)


def read_csv_features(path) -> np.ndarray:
    """CSV fallback: first line ``dim=<d>``, then one comma-separated sample per line."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].startswith("dim="):
        raise MalformedHeaderError(f"{path}: expected a 'dim=<d>' header line")
    try:
        dim = int(lines[0][4:])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: bad header {lines[0]!r}") from exc
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        try:
            row = [float(v) for v in ln.split(",")]
        except ValueError as exc:
            raise MalformedHeaderError(f"{path}:{lineno}: unparsable value") from exc
        if len(row) != dim:
            raise LengthMismatchError(f"{path}:{lineno}: {len(row)} values, header says dim={dim}")
        rows.append(row)
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), dim)


def read_csv_labels(path) -> np.ndarray:
    out = []
    for lineno, ln in enumerate(Path(path).read_text().splitlines(), start=1):
        if ln.strip():
            try:
                out.append(int(ln))
            except ValueError as exc:
                raise MalformedHeaderError(f"{path}:{lineno}: not an integer label") from exc
    return np.asarray(out, dtype=np.int64)


def _is_binary(path, magic):
    with open(path, "rb") as fh:
        return fh.read(4) == magic


def load_feature_file(features_path, labels_path=None):
    """Read row-aligned (features, labels) from FVEC/FLBL or CSV files.

    Without ``labels_path`` the labels come back as ``None``.
    """
    try:
        if _is_binary(features_path, b"FVEC"):
            x = read_fvec(features_path)
        else:
            x = read_csv_features(features_path)
        y = None
        if labels_path is not None:
            y = read_flbl(labels_path) if _is_binary(labels_path, b"FLBL") else read_csv_labels(labels_path)
    except OSError as exc:
        raise FeatureFileError(str(exc)) from exc
    if y is not None and x.shape[0] != y.shape[0]:
        raise LengthMismatchError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=1))
    if len(bad):
        raise NonFiniteValueError(f"non-finite feature values in row {int(bad[0])}")
    return x, y


# splitting ----------------------------------------------------------------------

def _stratified(indices, labels, rng, test_fraction):
    train, test = [], []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        members = members[rng.permutation(len(members))]
        n_test = int(round(test_fraction * len(members)))
        if len(members) > 1:
            n_test = min(max(n_test, 1), len(members) - 1)
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_stream(features, labels, n_tasks, classes_per_task, seed=0, test_fraction=0.2):
    """Class-incremental split: a seeded permutation of classes cut into disjoint groups."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < n_tasks * classes_per_task:
        raise ConfigError(
            f"{len(classes)} classes cannot fill {n_tasks} tasks x {classes_per_task} classes"
        )
    rng = np.random.default_rng(seed)
    order = classes[rng.permutation(len(classes))][: n_tasks * classes_per_task]
    tasks = []
    for t in range(n_tasks):
        group = tuple(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task])
        idx = np.flatnonzero(np.isin(labels, group))
        tr, te = _stratified(idx, labels, rng, test_fraction)
        tasks.append(TaskSpec(t, group, features[tr], labels[tr], features[te], labels[te],
                              train_ids=tr, test_ids=te))
    check_stream(tasks, "ci")
    return tasks


def split_domains(features, labels, domains, seed=0, test_fraction=0.2):
    """Domain-incremental split: one task per distinct domain tag, in ascending order."""
    features, labels, domains = map(np.asarray, (features, labels, domains))
    rng = np.random.default_rng(seed)
    tasks = []
    for t, dom in enumerate(np.unique(domains)):
        idx = np.flatnonzero(domains == dom)
        tr, te = _stratified(idx, labels, rng, test_fraction)
        classes = tuple(int(c) for c in np.unique(labels[idx]))
        tasks.append(TaskSpec(t, classes, features[tr], labels[tr], features[te], labels[te],
                              domain=int(dom), train_ids=tr, test_ids=te))
    check_stream(tasks, "di")
    return tasks


def merge_tasks(tasks) -> TaskSpec:
    """All tasks as one, for the offline reference run."""
    classes = tuple(sorted({c for t in tasks for c in t.classes}))
    cat = np.concatenate
    return TaskSpec(0, classes, cat([t.train_x for t in tasks]), cat([t.train_y for t in tasks]),
                    cat([t.test_x for t in tasks]), cat([t.test_y for t in tasks]))


def check_stream(tasks, protocol):
    """Assert the protocol's class-set invariant and train/test disjointness."""
    seen = set()
    for t in tasks:
        classes = set(t.classes)
        if protocol == "ci":
            if classes & seen:
                raise ConfigError(f"task {t.task_index} repeats classes {sorted(classes & seen)}")
            seen |= classes
        elif classes != set(tasks[0].classes):
            raise ConfigError(f"task {t.task_index} changes the class set")
        if t.train_ids is not None and np.intersect1d(t.train_ids, t.test_ids).size:
            raise ConfigError(f"task {t.task_index} shares samples between train and test")


# synthetic streams ----------------------------------------------------------------

@dataclass
class SyntheticStreamConfig:
    n_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 250
    input_dim: int = 32
    cluster_separation: float = 8.0
    noise_sigma: float = 1.0
    protocol: str = "ci"  # "ci" or "di"
    di_transform: Optional[str] = "rotation"  # "rotation" or "mean_shift"
    di_angle_step: float = 30.0  # degrees added per domain
    di_shift_scale: float = 4.0
    test_fraction: float = 0.2
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.cluster_separation <= 0 or self.noise_sigma <= 0:
            raise ConfigError("cluster_separation and noise_sigma must be positive")
        if self.protocol not in ("ci", "di"):
            raise ConfigError(f"protocol must be 'ci' or 'di', got {self.protocol!r}")


def _draw_means(n, dim, separation, rng, max_retries):
    # pairwise distance of N(0, s^2 I) draws concentrates near s * sqrt(2 * dim)
    scale = separation / np.sqrt(dim)
    means = []
    for c in range(n):
        for _ in range(max_retries):
            cand = rng.normal(scale=scale, size=dim)
            if all(np.linalg.norm(cand - m) >= separation for m in means):
                means.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place class {c} at distance >= {separation} after {max_retries} tries"
            )
    return np.asarray(means)


def rotation_matrix(dim, degrees):
    """Rotate each coordinate pair (0,1), (2,3), ... by ``degrees``."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.eye(dim)
    for p in range(dim // 2):
        i, j = 2 * p, 2 * p + 1
        rot[i, i], rot[i, j], rot[j, i], rot[j, j] = c, -s, s, c
    return rot


def generate_synthetic(cfg: SyntheticStreamConfig):
    """Isotropic Gaussian classes. CI: fresh classes per task. DI: one class set,
    each domain applies its own transform to every sample."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.protocol == "ci":
        n_classes = cfg.n_tasks * cfg.classes_per_task
    else:
        n_classes = cfg.classes_per_task
    means = _draw_means(n_classes, cfg.input_dim, cfg.cluster_separation, rng, cfg.max_retries)

    xs, ys, doms = [], [], []
    for t in range(cfg.n_tasks):
        if cfg.protocol == "ci":
            task_classes = range(t * cfg.classes_per_task, (t + 1) * cfg.classes_per_task)
        else:
            task_classes = range(n_classes)
        for c in task_classes:
            x = means[c] + rng.normal(scale=cfg.noise_sigma,
                                      size=(cfg.samples_per_class, cfg.input_dim))
            xs.append(x)
            ys.append(np.full(cfg.samples_per_class, c))
            doms.append(np.full(cfg.samples_per_class, t))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    dom = np.concatenate(doms)

    if cfg.protocol == "di":
        shifts = rng.normal(scale=cfg.di_shift_scale, size=(cfg.n_tasks, cfg.input_dim))
        for t in range(cfg.n_tasks):
            rows = dom == t
            if cfg.di_transform == "rotation":
                x[rows] = x[rows] @ rotation_matrix(cfg.input_dim, t * cfg.di_angle_step).T
            elif cfg.di_transform == "mean_shift":
                x[rows] = x[rows] + (shifts[t] if t else 0.0)
            elif cfg.di_transform is not None:
                raise ConfigError(f"unknown DI transform {cfg.di_transform!r}")
        return split_domains(x.astype(np.float32), y, dom, cfg.seed, cfg.test_fraction)

    split_rng = np.random.default_rng([cfg.seed, 1])
    tasks = []
    for t in range(cfg.n_tasks):
        idx = np.flatnonzero(dom == t)
        tr, te = _stratified(idx, y, split_rng, cfg.test_fraction)
        classes = tuple(int(c) for c in np.unique(y[idx]))
        tasks.append(TaskSpec(t, classes, x[tr].astype(np.float32), y[tr],
                              x[te].astype(np.float32), y[te], train_ids=tr, test_ids=te))
    check_stream(tasks, "ci")
    return tasks


def stream_arrays(tasks):
    """Flatten a stream back into (features, labels, task ids) for writing to disk."""
    x = np.concatenate([np.concatenate([t.train_x, t.test_x]) for t in tasks])
    y = np.concatenate([np.concatenate([t.train_y, t.test_y]) for t in tasks])
    task = np.concatenate([np.full(len(t.train_y) + len(t.test_y), t.task_index) for t in tasks])
    return x, y, task
