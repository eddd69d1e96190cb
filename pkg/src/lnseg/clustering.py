"""Clustering of per-pixel feature vectors: agglomerative (Ward, complete) and k-means.

The agglomerative routine is the exact greedy algorithm: at every step it
merges the globally closest pair of active clusters, breaking ties by the
smallest (i, j) slot pair. A merged cluster keeps the smaller slot. Each row
caches its nearest neighbour among higher slots, so only rows touched by a
merge are rescanned; cluster distances follow the Lance-Williams recurrences.
"""
from __future__ import annotations

import numpy as np

from .numerics import Rng

LINKAGES = ("ward", "complete")


class ClusteringError(ValueError):
    pass


def _check_features(x: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ClusteringError(f"features must be an (n, f) array with f >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ClusteringError("features contain NaN or Inf")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"need 1 <= K <= n, got K={k}, n={n}")
    return x


def normalize_rows(features: np.ndarray, eps: float = 0.0):
    """Scale each row to unit L2 norm; returns (normalized, zero_row_mask).

    Rows whose norm is <= eps are left as zero and flagged in the mask.
    """
    f = np.asarray(features, dtype=np.float64)
    norms = np.sqrt(np.sum(f * f, axis=1))
    zero = norms <= eps
    out = np.zeros_like(f)
    out[~zero] = f[~zero] / norms[~zero, None]
    return out, zero


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    # in place: one n x n allocation instead of three
    d = x @ x.T
    d *= -2.0
    d += sq[:, None]
    d += sq[None, :]
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def canonical_labels(groups: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered 0.. in order of their first member."""
    _, first, inv = np.unique(groups, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


def linkage(features: np.ndarray, method: str = "ward", stop_at: int = 1):
    """Greedy agglomeration down to ``stop_at`` clusters.

    Returns (merges, owner): ``merges`` is a list of (cluster_a, cluster_b,
    height, size) with scipy-style ids (points 0..n-1, the merge at step s gets
    id n+s) and ``owner`` maps each point to its final slot.
    Ward heights are sqrt(2 * increase in within-cluster sum of squares).
    """
    if method not in LINKAGES:
        raise ClusteringError(f"unknown linkage {method!r}; choose from {LINKAGES}")
    x = _check_features(features, stop_at)
    n = x.shape[0]
    d = squared_distances(x)
    if method == "complete":
        d = np.sqrt(d)
    np.fill_diagonal(d, np.inf)
    size = np.ones(n)
    active = np.ones(n, bool)
    cid = np.arange(n)
    owner = np.arange(n)

    nn = np.full(n, -1)
    nn_d = np.full(n, np.inf)

    def rescan(k):
        # retired columns are never overwritten, so mask them here
        if k + 1 < n:
            row = np.where(active[k + 1 :], d[k, k + 1 :], np.inf)
            j = int(np.argmin(row))
            nn[k], nn_d[k] = k + 1 + j, row[j]
        else:
            nn[k], nn_d[k] = -1, np.inf

    for k in range(n):
        rescan(k)

    merges = []
    for step in range(n - stop_at):
        i = int(np.argmin(nn_d))
        j = int(nn[i])
        dij = d[i, j]
        ni, nj = size[i], size[j]
        if method == "ward":
            nk = size
            new = ((nk + ni) * d[i] + (nk + nj) * d[j] - nk * dij) / (nk + ni + nj)
            height = float(np.sqrt(dij))
        else:
            new = np.maximum(d[i], d[j])
            height = float(dij)
        new[~active] = np.inf
        new[i] = np.inf
        new[j] = np.inf
        merges.append((int(cid[i]), int(cid[j]), height, int(ni + nj)))

        active[j] = False
        d[i, :] = new
        d[:, i] = new
        size[i] = ni + nj
        cid[i] = n + step
        owner[owner == j] = i
        nn_d[j] = np.inf
        nn[j] = -1

        # rows whose cached neighbour vanished or moved
        stale = np.flatnonzero(active & ((nn == i) | (nn == j)))
        for k in stale:
            rescan(int(k))
        rescan(i)
        # lower rows may now prefer the merged cluster
        lower = np.flatnonzero(active[:i])
        if lower.size:
            cand = new[lower]
            better = (cand < nn_d[lower]) | ((cand == nn_d[lower]) & (i < nn[lower]))
            nn[lower[better]] = i
            nn_d[lower[better]] = cand[better]
    return merges, owner


def agglomerative(features: np.ndarray, k: int, method: str = "ward") -> np.ndarray:
    """Labels in {0..K-1} from cutting the greedy hierarchy at K clusters."""
    _, owner = linkage(features, method, stop_at=k)
    return canonical_labels(owner)


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

def kmeans_pp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(0, n))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def _assign(x, centers):
    d2 = (
        np.einsum("ij,ij->i", x, x)[:, None]
        - 2.0 * x @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]


def kmeans(features: np.ndarray, k: int, rng: Rng, max_iters: int = 300, return_history: bool = False):
    """k-means++ seeding followed by Lloyd iterations to an assignment fixpoint.

    An empty cluster is re-seeded at the point farthest from its centre.
    With ``return_history`` the per-iteration objective is returned too.
    """
    x = _check_features(features, k)
    centers = kmeans_pp_init(x, k, rng)
    labels, dist = _assign(x, centers)
    history = [float(dist.sum())]
    for _ in range(max_iters):
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist))
                centers[c] = x[far]
                dist[far] = 0.0
        new_labels, dist = _assign(x, centers)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    # a cluster can still be empty after the last step; hand it the farthest point
    counts = np.bincount(labels, minlength=k)
    for c in range(k):
        if counts[c] == 0:
            # only take from clusters that keep at least one member
            cand = np.where(counts[labels] > 1, dist, -1.0)
            far = int(np.argmax(cand))
            counts[labels[far]] -= 1
            labels[far], dist[far], counts[c] = c, 0.0, 1
    labels = canonical_labels(labels)
    return (labels, history) if return_history else labels


def cluster(features: np.ndarray, k: int, method: str = "ward", rng: Rng | None = None) -> np.ndarray:
    if method in LINKAGES:
        return agglomerative(features, k, method)
    if method == "kmeans":
        return kmeans(features, k, rng if rng is not None else Rng(0))
    raise ClusteringError(f"unknown clusterer {method!r}; choose from ward, complete, kmeans")
