"""Nearest-prototype classification, accuracy matrix, average accuracy and BWT."""

from __future__ import annotations

import math
from decimal import Decimal

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, IncompleteMatrixError, UndefinedMetricError, UninitializedModelError


def nearest_prototype(queries, prototype_latents, metric="cosine"):
    """Row index of the nearest prototype for every query.

    Prototypes are expected in ascending cluster-uid order, so taking the
    first maximum breaks ties toward the lowest uid.
    """
    protos = np.asarray(prototype_latents, dtype=np.float64)
    if protos.ndim != 2 or protos.shape[0] == 0:
        raise UninitializedModelError("no prototypes to classify against")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if metric == "cosine":
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        return np.argmax(qn @ pn.T, axis=1)
    if metric == "euclidean":
        d2 = np.sum((q[:, None, :] - protos[None, :, :]) ** 2, axis=2)
        return np.argmin(d2, axis=1)
    raise ContractError(f"unknown distance metric {metric!r}")


def classify(latent, prototype_latents, eval_class, cluster_uids=None, metric="cosine"):
    """Class of the most similar prototype; ties go to the lowest cluster uid."""
    protos = np.asarray(prototype_latents)
    eval_class = np.asarray(eval_class)
    if cluster_uids is not None:
        order = np.argsort(np.asarray(cluster_uids), kind="stable")
        protos, eval_class = protos[order], eval_class[order]
    return int(eval_class[nearest_prototype(latent, protos, metric)[0]])


def hungarian_mapping(pred_clusters, true_labels) -> dict:
    """One-to-one cluster -> class map maximizing agreement."""
    clusters = np.unique(pred_clusters)
    classes = np.unique(true_labels)
    counts = np.zeros((len(clusters), len(classes)), dtype=np.int64)
    ci = np.searchsorted(clusters, pred_clusters)
    li = np.searchsorted(classes, true_labels)
    np.add.at(counts, (ci, li), 1)
    rows, cols = linear_sum_assignment(-counts)
    return {int(clusters[r]): int(classes[c]) for r, c in zip(rows, cols)}


class AccuracyMatrix:
    """``A[i, t]``: accuracy on task ``i`` after training task ``t`` (0-indexed, ``t >= i``)."""

    def __init__(self, n_tasks):
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def __setitem__(self, key, value):
        i, t = key
        if t < i:
            raise ContractError(f"A[{i}][{t}] is above the diagonal of a lower-triangular table")
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"accuracy {value} outside [0, 1]")
        self.values[i, t] = value

    def __getitem__(self, key):
        i, t = key
        v = self.values[i, t]
        if math.isnan(v):
            raise IncompleteMatrixError(f"A[{i}][{t}] is not set")
        return float(v)

    @classmethod
    def from_rows(cls, rows):
        """Build from nested lists where ``None`` marks unset entries."""
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for t, v in enumerate(row):
                if v is not None:
                    m[i, t] = v
        return m

    def to_rows(self):
        return [[None if math.isnan(v) else float(v) for v in row] for row in self.values]


def _dec(v) -> Decimal:
    # accuracies are short decimal ratios (47/50 -> 0.94); doing the sums on the
    # shortest decimal form keeps 0.8 - 0.9 at exactly -0.1
    return Decimal(repr(float(v)))


def average_accuracy(acc: AccuracyMatrix, t) -> float:
    """Mean of column ``t`` over tasks ``0..t``."""
    column = [_dec(acc[i, t]) for i in range(t + 1)]
    return float(sum(column) / (t + 1))


def bwt(acc: AccuracyMatrix, t) -> float:
    """Mean change on tasks ``0..t-1`` between right-after-training and after task ``t``."""
    if t < 1:
        raise UndefinedMetricError("backward transfer needs at least two tasks")
    return float(sum(_dec(acc[i, t]) - _dec(acc[i, i]) for i in range(t)) / t)
