"""K-means (Lloyd, k-means++ seeding) and minibatch K-means.

Both are deterministic given ``seed``: all randomness comes from a single
``numpy.random.default_rng(seed)`` stream consumed in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, EmptyClusterError


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    # inertia after every assignment step, then the final value
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


def _check(points, k):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DegenerateInputError("points must be a 2-D matrix")
    if k < 1 or k > points.shape[0]:
        raise DegenerateInputError(f"need 1 <= K <= rows, got K={k}, rows={points.shape[0]}")
    return points


def sq_distances(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(points, k, rng) -> np.ndarray:
    """k-means++ seeding. Returns the chosen row indices."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a chosen centroid
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(len(free))])
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.asarray(chosen)


def assign(points, centroids):
    d2 = sq_distances(points, centroids)
    labels = np.argmin(d2, axis=1)  # first minimum -> lowest cluster id on ties
    return labels, d2[np.arange(len(points)), labels]


def update_centroids(points, labels, centroids):
    """Means of assigned points. An empty cluster is moved onto the point
    farthest from its current centroid. Returns (centroids, n_reseeded)."""
    k = centroids.shape[0]
    new = np.empty_like(centroids)
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        if counts[j]:
            new[j] = points[labels == j].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        d2 = np.sum((points - new[labels]) ** 2, axis=1)
        taken = set()
        for j in empty:
            order = np.argsort(-d2, kind="stable")
            idx = next(int(i) for i in order if int(i) not in taken)
            taken.add(idx)
            new[j] = points[idx]
    return new, len(empty)


def kmeans(points, k, seed=0, max_iter=300, tol=1e-6, n_init=1) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    With ``n_init > 1`` the seeding is repeated from the same rng stream and
    the run with the lowest final inertia wins (earliest run on ties).
    """
    points = _check(points, k)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        result = _lloyd(points, points[kmeans_plusplus(points, k, rng)].copy(), max_iter, tol)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def _lloyd(points, centroids, max_iter, tol) -> KMeansResult:

    history = []
    labels = None
    n_iter = 0
    reseeded = 0
    for n_iter in range(1, max_iter + 1):
        labels, d2 = assign(points, centroids)
        history.append(float(d2.sum()))
        new, reseeded = update_centroids(points, labels, centroids)
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if not reseeded and shift < tol:
            break
    if reseeded:
        # the loop ran out with a reseeded centroid; settle it
        labels, _ = assign(points, centroids)
        centroids, _ = update_centroids(points, labels, centroids)
    inertia = float(np.sum((points - centroids[labels]) ** 2))
    history.append(inertia)
    return KMeansResult(centroids, labels, inertia, history, n_iter)


def minibatch_kmeans(points, k, seed=0, iters=10, batch_size=None) -> np.ndarray:
    """Minibatch K-means; returns the final nearest-centroid assignment.

    Each centroid moves toward its batch members with step ``1 / count`` where
    ``count`` is the number of points it has absorbed so far.
    """
    points = _check(points, k)
    n = points.shape[0]
    batch_size = min(64, n) if batch_size is None else min(batch_size, n)
    rng = np.random.default_rng(seed)
    centroids = points[kmeans_plusplus(points, k, rng)].copy()
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iters):
        batch = points[rng.choice(n, size=batch_size, replace=False)]
        labels, _ = assign(batch, centroids)
        for x, j in zip(batch, labels):
            counts[j] += 1
            centroids[j] += (x - centroids[j]) / counts[j]
    labels, _ = assign(points, centroids)
    return labels


def nearest_to_centroid(points, result: KMeansResult, j: int) -> int:
    """Index of the member of cluster ``j`` closest to its centroid (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    members = np.flatnonzero(result.assignments == j)
    if len(members) == 0:
        raise EmptyClusterError(f"cluster {j} has no members")
    d2 = np.sum((points[members] - result.centroids[j]) ** 2, axis=1)
    return int(members[np.argmin(d2)])
