"""Label-free replay buffer: prototype and sigma-band support selection,
storage, and a binary on-disk format.

Class labels never enter the replay path. The optional per-cluster
``eval_class`` lives in a separate side table that only evaluation reads;
:meth:`ReplayBuffer.replay_view` has no field through which it could leak.
"""

from __future__ import annotations

import hashlib
import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import kmeans, nearest_to_centroid
from .errors import (
    BufferChecksumError,
    BufferFormatError,
    BufferIOError,
    BufferVersionError,
    ContractError,
    DegenerateInputError,
)

SIGMA_MULTIPLES = (1, 2, 3)
SIGNS = (1, -1)


@dataclass
class DimensionSelection:
    selected: list
    variance: np.ndarray
    epsilon: float


def select_dimensions(cluster_latents, d_max=5, epsilon=0.3) -> DimensionSelection:
    """Greedy variance-ranked selection with a Pearson-correlation redundancy filter.

    Dimensions are visited by descending variance (lower index first on ties)
    and accepted while their absolute correlation with every accepted
    dimension is <= ``epsilon``. A zero-variance dimension has no defined
    correlation and is treated as uncorrelated.
    """
    x = np.asarray(cluster_latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError("dimension selection needs a cluster of at least 2 samples")
    if not 0 < epsilon <= 1:
        raise ContractError(f"epsilon must lie in (0, 1], got {epsilon}")
    variance = x.var(axis=0)
    order = sorted(range(x.shape[1]), key=lambda d: (-variance[d], d))
    centered = x - x.mean(axis=0)
    std = np.sqrt(variance)

    selected = []
    for d in order:
        if len(selected) >= d_max:
            break
        ok = True
        for s in selected:
            if std[d] == 0 or std[s] == 0:
                continue
            corr = np.mean(centered[:, d] * centered[:, s]) / (std[d] * std[s])
            if abs(corr) > epsilon:
                ok = False
                break
        if ok:
            selected.append(d)
    return DimensionSelection(selected, variance, epsilon)


@dataclass(frozen=True)
class Band:
    dim: int
    k: int
    sign: int  # +1 or -1


def select_support(cluster_points, member_indices, dims: DimensionSelection):
    """Pick the member nearest to each sigma-band target ``mu +/- k * sigma_d * e_d``.

    ``cluster_points`` holds the cluster's latents (rows aligned with
    ``member_indices``). Returns ``[(sample_index, Band), ...]`` with one entry
    per band slot; a member may fill several slots.
    """
    pts = np.asarray(cluster_points, dtype=np.float64)
    member_indices = np.asarray(member_indices)
    if pts.shape[0] == 0:
        raise DegenerateInputError("empty cluster")
    if not dims.selected:
        raise DegenerateInputError("no dimensions selected")
    mu = pts.mean(axis=0)
    sigma = pts.std(axis=0)
    out = []
    for d in dims.selected:
        for k in SIGMA_MULTIPLES:
            for sign in SIGNS:
                target = mu.copy()
                target[d] += sign * k * sigma[d]
                dist = np.sum((pts - target) ** 2, axis=1)
                out.append((int(member_indices[np.argmin(dist)]), Band(d, k, sign)))
    return out


@dataclass
class PrototypeRecord:
    cluster_uid: int
    input_features: np.ndarray
    latent_snapshot: np.ndarray
    task_index: int
    eval_class: Optional[int] = None


@dataclass
class SupportRecord:
    cluster_uid: int
    input_features: np.ndarray
    latent_snapshot: np.ndarray
    band: Band


@dataclass
class TaskEntries:
    """What one task contributes to the buffer, before global uids are assigned.

    Cluster ``j`` refers to local cluster id; ``rows`` are task-local sample
    indices deduplicated across band slots.
    """

    task_index: int
    rows: np.ndarray  # unique task sample indices to store
    row_cluster: np.ndarray  # local cluster of each stored row
    prototype_rows: list  # per local cluster: task sample index of the prototype
    supports: list  # (local cluster, task sample index, Band)
    eval_class: list  # per local cluster: majority label or None
    selections: list  # per local cluster: DimensionSelection or None

    def record_count(self, j) -> int:
        return 1 + sum(1 for c, _, _ in self.supports if c == j)


def _majority(labels):
    counts = Counter(int(v) for v in labels)
    top = max(counts.values())
    return min(c for c, n in counts.items() if n == top)


def build_task_entries(task_latents, k, d_max=5, epsilon=0.3, seed=0, labels=None,
                       task_index=0, kmeans_max_iter=300, kmeans_tol=1e-6,
                       kmeans_n_init=10) -> TaskEntries:
    """Cluster the end-of-task latents and choose what to keep.

    Per cluster: one prototype (member nearest the centroid) and one support
    sample per (selected dim, k, sign) slot, i.e. ``1 + 6 * |dims|`` records.
    ``labels`` only feeds the evaluation side table.
    """
    z = np.asarray(task_latents, dtype=np.float64)
    result = kmeans(z, k, seed=seed, max_iter=kmeans_max_iter, tol=kmeans_tol,
                    n_init=kmeans_n_init)
    prototype_rows, supports, eval_class, selections = [], [], [], []
    stored = {}
    for j in range(k):
        members = np.flatnonzero(result.assignments == j)
        proto = nearest_to_centroid(z, result, j)
        prototype_rows.append(proto)
        stored.setdefault(proto, j)
        if len(members) >= 2:
            dims = select_dimensions(z[members], d_max, epsilon)
            for idx, band in select_support(z[members], members, dims):
                supports.append((j, idx, band))
                stored.setdefault(idx, j)
        else:
            dims = None
        selections.append(dims)
        eval_class.append(None if labels is None else _majority(np.asarray(labels)[members]))
    rows = np.array(sorted(stored), dtype=np.int64)
    row_cluster = np.array([stored[r] for r in rows], dtype=np.int64)
    return TaskEntries(task_index, rows, row_cluster, prototype_rows, supports, eval_class,
                       selections)


@dataclass
class ReplayView:
    """Everything the training losses may read from the buffer. No labels."""

    features: np.ndarray  # (R, D) stored input features
    latents: np.ndarray  # (R, L) latent snapshots frozen at storage time
    row_cluster: np.ndarray  # (R,) cluster uid of each row
    cluster_uids: np.ndarray  # (C,)
    mu: np.ndarray  # (C, L) mean of each cluster's stored latents
    sigma: np.ndarray  # (C,) std of support-slot distances to the prototype latent
    prototype_latents: np.ndarray  # (C, L)
    task_index: np.ndarray  # (C,)

    def __len__(self):
        return self.features.shape[0]


@dataclass
class _Cluster:
    uid: int
    task_index: int
    proto_row: int


@dataclass
class _Support:
    uid: int
    row: int
    band: Band


@dataclass
class ReplayBuffer:
    feature_dim: int
    latent_dim: int
    dtype: np.dtype = np.dtype(np.float32)
    features: np.ndarray = None
    latents: np.ndarray = None
    row_cluster: np.ndarray = None
    clusters: list = field(default_factory=list)
    supports: list = field(default_factory=list)
    # evaluation-only side table: cluster uid -> class id
    eval_class: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if self.features is None:
            self.features = np.zeros((0, self.feature_dim), dtype=self.dtype)
            self.latents = np.zeros((0, self.latent_dim), dtype=self.dtype)
            self.row_cluster = np.zeros(0, dtype=np.int64)

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def n_records(self):
        """Slot count: one per prototype plus one per support band slot."""
        return len(self.clusters) + len(self.supports)

    def is_empty(self):
        return not self.clusters

    def record_count(self, uid) -> int:
        return 1 + sum(1 for s in self.supports if s.uid == uid)

    def add_task(self, entries: TaskEntries, task_features, task_latents):
        """Append one task's selections, assigning fresh global cluster uids."""
        task_features = np.asarray(task_features)
        task_latents = np.asarray(task_latents)
        if task_features.shape[0] != task_latents.shape[0]:
            raise ContractError("features and latents must be row-aligned")
        base_uid = self.clusters[-1].uid + 1 if self.clusters else 0
        base_row = self.features.shape[0]
        row_of = {int(r): base_row + i for i, r in enumerate(entries.rows)}

        self.features = np.concatenate(
            [self.features, task_features[entries.rows].astype(self.dtype)])
        self.latents = np.concatenate(
            [self.latents, task_latents[entries.rows].astype(self.dtype)])
        self.row_cluster = np.concatenate([self.row_cluster, base_uid + entries.row_cluster])
        uids = []
        for j, proto in enumerate(entries.prototype_rows):
            uid = base_uid + j
            uids.append(uid)
            self.clusters.append(_Cluster(uid, entries.task_index, row_of[int(proto)]))
            if entries.eval_class[j] is not None:
                self.eval_class[uid] = int(entries.eval_class[j])
        for j, idx, band in entries.supports:
            self.supports.append(_Support(base_uid + j, row_of[int(idx)], band))
        return uids

    def prototypes(self):
        return [
            PrototypeRecord(c.uid, self.features[c.proto_row], self.latents[c.proto_row],
                            c.task_index, self.eval_class.get(c.uid))
            for c in self.clusters
        ]

    def support_records(self):
        return [
            SupportRecord(s.uid, self.features[s.row], self.latents[s.row], s.band)
            for s in self.supports
        ]

    def replay_view(self, task_indices=None) -> ReplayView:
        """Label-free view; restrict to clusters from ``task_indices`` if given."""
        clusters = [c for c in self.clusters
                    if task_indices is None or c.task_index in task_indices]
        keep = {c.uid for c in clusters}
        row_mask = np.array([int(u) in keep for u in self.row_cluster], dtype=bool)
        lat64 = self.latents.astype(np.float64)
        mu = np.zeros((len(clusters), self.latent_dim))
        sigma = np.zeros(len(clusters))
        for i, c in enumerate(clusters):
            mu[i] = lat64[self.row_cluster == c.uid].mean(axis=0)
            rows = [s.row for s in self.supports if s.uid == c.uid]
            if rows:
                sigma[i] = np.linalg.norm(lat64[rows] - lat64[c.proto_row], axis=1).std()
        return ReplayView(
            features=self.features[row_mask],
            latents=self.latents[row_mask],
            row_cluster=self.row_cluster[row_mask].copy(),
            cluster_uids=np.array([c.uid for c in clusters], dtype=np.int64),
            mu=mu,
            sigma=sigma,
            prototype_latents=self.latents[[c.proto_row for c in clusters]]
            if clusters else np.zeros((0, self.latent_dim), dtype=self.dtype),
            task_index=np.array([c.task_index for c in clusters], dtype=np.int64),
        )

    def prototype_table(self):
        """Evaluation-side table: (uids, prototype features, prototype latents, eval classes)."""
        uids = np.array([c.uid for c in self.clusters], dtype=np.int64)
        rows = [c.proto_row for c in self.clusters]
        classes = np.array([self.eval_class.get(int(u), -1) for u in uids], dtype=np.int64)
        return uids, self.features[rows], self.latents[rows], classes

    def __eq__(self, other):
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.latent_dim == other.latent_dim
            and self.dtype == other.dtype
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.latents, other.latents)
            and np.array_equal(self.row_cluster, other.row_cluster)
            and self.clusters == other.clusters
            and self.supports == other.supports
            and self.eval_class == other.eval_class
        )

    def summary(self) -> dict:
        tasks = Counter(c.task_index for c in self.clusters)
        return {
            "clusters": self.n_clusters,
            "records": self.n_records,
            "stored_rows": int(self.features.shape[0]),
            "feature_dim": self.feature_dim,
            "latent_dim": self.latent_dim,
            "precision": self.dtype.name,
            "clusters_per_task": {int(t): n for t, n in sorted(tasks.items())},
            "records_per_cluster": {c.uid: self.record_count(c.uid) for c in self.clusters},
            "labelled_clusters": len(self.eval_class),
        }


# on-disk format ------------------------------------------------------------
#
#   "LRCP" | u16 version | u8 precision bytes (4 or 8)
#   u32 feature_dim | u32 latent_dim | u32 rows | u32 clusters | u32 supports | u32 eval
#   length-prefixed records (u32 byte length + body), in that order
#   u64 checksum: blake2b-64 of every preceding byte
#   all little-endian

MAGIC = b"LRCP"
VERSION = 1
_HEADER = struct.Struct("<4sHB6I")
_ROW_HEAD = struct.Struct("<q")
_CLUSTER = struct.Struct("<qII")
_SUPPORT = struct.Struct("<qIIBb")
_EVAL = struct.Struct("<qq")
_LEN = struct.Struct("<I")
_CHECK = struct.Struct("<Q")


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _record(out, body: bytes):
    out.write(_LEN.pack(len(body)))
    out.write(body)


def persist(buffer: ReplayBuffer, path):
    prec = buffer.dtype.itemsize
    if prec not in (4, 8):
        raise BufferFormatError(f"unsupported payload precision {buffer.dtype}")
    le = buffer.dtype.newbyteorder("<")
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, VERSION, prec, buffer.feature_dim, buffer.latent_dim,
                           buffer.features.shape[0], len(buffer.clusters),
                           len(buffer.supports), len(buffer.eval_class)))
    for i in range(buffer.features.shape[0]):
        _record(out, _ROW_HEAD.pack(int(buffer.row_cluster[i]))
                + buffer.features[i].astype(le).tobytes()
                + buffer.latents[i].astype(le).tobytes())
    for c in buffer.clusters:
        _record(out, _CLUSTER.pack(c.uid, c.task_index, c.proto_row))
    for s in buffer.supports:
        _record(out, _SUPPORT.pack(s.uid, s.row, s.band.dim, s.band.k, s.band.sign))
    for uid, cls in sorted(buffer.eval_class.items()):
        _record(out, _EVAL.pack(uid, cls))
    payload = out.getvalue()
    try:
        Path(path).write_bytes(payload + _CHECK.pack(_checksum(payload)))
    except OSError as exc:
        raise BufferIOError(f"cannot write buffer to {path}: {exc}") from exc


def load(path) -> ReplayBuffer:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise BufferIOError(f"cannot read buffer from {path}: {exc}") from exc
    if len(blob) < _HEADER.size + _CHECK.size:
        raise BufferChecksumError(f"{path}: file too short ({len(blob)} bytes)")
    payload, (stored,) = blob[:-_CHECK.size], _CHECK.unpack(blob[-_CHECK.size:])
    if _checksum(payload) != stored:
        raise BufferChecksumError(f"{path}: checksum mismatch")

    magic, version, prec, fdim, ldim, n_rows, n_clusters, n_supports, n_eval = \
        _HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise BufferFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BufferVersionError(f"{path}: format version {version}, expected {VERSION}")
    if prec not in (4, 8):
        raise BufferFormatError(f"{path}: bad precision tag {prec}")
    dtype = np.dtype("<f4" if prec == 4 else "<f8")

    pos = _HEADER.size

    def next_record(expected):
        nonlocal pos
        (length,) = _LEN.unpack_from(payload, pos)
        if length != expected:
            raise BufferFormatError(f"{path}: record length {length}, expected {expected}")
        body = payload[pos + _LEN.size: pos + _LEN.size + length]
        pos += _LEN.size + length
        return body

    try:
        row_len = _ROW_HEAD.size + (fdim + ldim) * prec
        features = np.zeros((n_rows, fdim), dtype=dtype)
        latents = np.zeros((n_rows, ldim), dtype=dtype)
        row_cluster = np.zeros(n_rows, dtype=np.int64)
        for i in range(n_rows):
            body = next_record(row_len)
            (row_cluster[i],) = _ROW_HEAD.unpack_from(body, 0)
            vec = np.frombuffer(body, dtype=dtype, offset=_ROW_HEAD.size)
            features[i], latents[i] = vec[:fdim], vec[fdim:]
        clusters = [_Cluster(*_CLUSTER.unpack(next_record(_CLUSTER.size)))
                    for _ in range(n_clusters)]
        supports = []
        for _ in range(n_supports):
            uid, row, dim, k, sign = _SUPPORT.unpack(next_record(_SUPPORT.size))
            supports.append(_Support(uid, row, Band(dim, k, sign)))
        eval_class = {}
        for _ in range(n_eval):
            uid, cls = _EVAL.unpack(next_record(_EVAL.size))
            eval_class[uid] = cls
    except struct.error as exc:
        raise BufferFormatError(f"{path}: truncated record section") from exc
    if pos != len(payload):
        raise BufferFormatError(f"{path}: {len(payload) - pos} trailing bytes")

    native = dtype.newbyteorder("=")
    return ReplayBuffer(fdim, ldim, native, features.astype(native), latents.astype(native),
                        row_cluster, clusters, supports, eval_class)
