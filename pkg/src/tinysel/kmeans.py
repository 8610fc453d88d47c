"""Lloyd's K-Means with k-means++ seeding, deterministic under a seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray   # (k, d)
    assignments: np.ndarray  # (n,)
    inertia: float
    iterations: int


def _sq_dists(x, centroids):
    """Squared euclidean distances (n, k)."""
    # ||x||^2 - 2 x.c + ||c||^2; clip tiny negatives from cancellation
    d = (np.einsum("nd,nd->n", x, x)[:, None]
         - 2.0 * x @ centroids.T
         + np.einsum("kd,kd->k", centroids, centroids)[None, :])
    return np.maximum(d, 0.0)


def _kmeanspp_init(x, k, rng):
    n = len(x)
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
        else:
            probs = closest / total
            centroids[i] = x[rng.choice(n, p=probs)]
        closest = np.minimum(closest, _sq_dists(x, centroids[i:i + 1]).ravel())
    return centroids


def kmeans(features, k: int, seed=0, max_iters=300, tol=1e-6) -> KMeansResult:
    """Runs k-means++ then Lloyd iterations until the largest centroid
    movement drops below ``tol``. Empty clusters are repaired by stealing
    the point farthest from the largest cluster's centroid."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if k > n:
        raise ValueError(f"k={k} exceeds number of rows {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        assignments = np.argmin(d, axis=1)
        new_centroids = centroids.copy()
        for i in range(k):
            mask = assignments == i
            if mask.any():
                new_centroids[i] = x[mask].mean(axis=0)
            else:
                # steal the farthest member of the largest cluster
                counts = np.bincount(assignments, minlength=k)
                big = int(np.argmax(counts))
                members = np.flatnonzero(assignments == big)
                far = members[np.argmax(d[members, big])]
                new_centroids[i] = x[far]
                assignments[far] = i
        move = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if move < tol:
            break
    d = _sq_dists(x, centroids)
    assignments = np.argmin(d, axis=1)
    inertia = float(d[np.arange(n), assignments].sum())
    return KMeansResult(centroids=centroids, assignments=assignments,
                        inertia=inertia, iterations=it)
