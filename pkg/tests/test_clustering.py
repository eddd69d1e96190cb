import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lnseg.clustering import (
    ClusteringError,
    agglomerative,
    canonical_labels,
    cluster,
    kmeans,
    linkage,
    normalize_rows,
)
from lnseg.numerics import Rng


def sse(points):
    return float(np.sum((points - points.mean(axis=0)) ** 2))


def brute_force(x, k, method):
    """Greedy agglomeration recomputing every merge cost from scratch."""
    clusters = [[i] for i in range(len(x))]
    while len(clusters) > k:
        best, pair = np.inf, None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            A, B = x[clusters[a]], x[clusters[b]]
            if method == "ward":
                cost = sse(np.vstack([A, B])) - sse(A) - sse(B)
            else:
                cost = max(np.linalg.norm(p - q) for p in A for q in B)
            if cost < best:
                best, pair = cost, (a, b)
        a, b = pair
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.empty(len(x), np.int64)
    for c, members in enumerate(clusters):
        labels[members] = c
    return canonical_labels(labels)


@pytest.mark.parametrize("method", ["ward", "complete"])
def test_matches_brute_force_on_small_instances(method):
    rng = np.random.default_rng(123 if method == "ward" else 321)
    for _ in range(500):
        n = int(rng.integers(2, 11))
        x = rng.normal(size=(n, int(rng.integers(1, 4))))
        k = int(rng.integers(1, n + 1))
        np.testing.assert_array_equal(agglomerative(x, k, method), brute_force(x, k, method))


def test_three_points_on_a_line():
    x = np.array([[0.0], [1.0], [10.0]])
    np.testing.assert_array_equal(agglomerative(x, 2, "ward"), [0, 0, 1])


def test_k_equals_n_gives_singletons():
    x = np.random.default_rng(0).normal(size=(7, 2))
    np.testing.assert_array_equal(agglomerative(x, 7), np.arange(7))


def test_k_one_gives_one_cluster():
    x = np.random.default_rng(0).normal(size=(7, 2))
    np.testing.assert_array_equal(agglomerative(x, 1), np.zeros(7))


def test_ward_is_scale_invariant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=(50, 3))
        for k in (2, 3, 5):
            np.testing.assert_array_equal(agglomerative(x, k), agglomerative(17.5 * x, k))


def test_ward_heights_are_non_decreasing():
    x = np.random.default_rng(9).normal(size=(60, 4))
    merges, _ = linkage(x, "ward")
    heights = [m[2] for m in merges]
    assert len(merges) == 59
    assert np.all(np.diff(heights) >= -1e-12)


def test_ward_heights_match_scipy():
    from scipy.cluster.hierarchy import linkage as scipy_linkage

    x = np.random.default_rng(2).normal(size=(40, 3))
    ours = np.array([m[2] for m in linkage(x, "ward")[0]])
    np.testing.assert_allclose(ours, scipy_linkage(x, "ward")[:, 2], rtol=1e-10)


def same_partition(a, b):
    return np.array_equal(canonical_labels(a), canonical_labels(b))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 30), st.integers(1, 5))
def test_permuting_points_only_relabels(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    k = min(k, n)
    perm = rng.permutation(n)
    base = agglomerative(x, k)
    permuted = agglomerative(x[perm], k)
    back = np.empty_like(permuted)
    back[perm] = permuted
    assert same_partition(base, back)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.sampled_from(["ward", "complete", "kmeans"]))
def test_labels_are_a_full_partition(seed, n, method):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    k = int(rng.integers(1, n + 1))
    labels = cluster(x, k, method, Rng(seed))
    assert labels.shape == (n,)
    assert set(labels.tolist()) == set(range(k))


def test_duplicate_points_still_give_k_clusters():
    x = np.zeros((10, 3))
    labels = agglomerative(x, 4)
    assert set(labels.tolist()) == {0, 1, 2, 3}


def test_invalid_inputs():
    x = np.ones((3, 2))
    with pytest.raises(ClusteringError):
        agglomerative(x, 4)
    with pytest.raises(ClusteringError):
        agglomerative(x, 0)
    with pytest.raises(ClusteringError):
        agglomerative(np.array([[np.nan, 0.0]]), 1)
    with pytest.raises(ClusteringError):
        agglomerative(x, 2, "single")
    with pytest.raises(ClusteringError):
        cluster(x, 2, "dbscan")


def blobs(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(50, 2)) * 0.1
    b = rng.normal(size=(50, 2)) * 0.1 + [10.0, 0.0]
    return np.vstack([a, b])


def test_kmeans_separates_blobs():
    labels = kmeans(blobs(), 2, Rng(0))
    assert len(set(labels[:50])) == 1 and len(set(labels[50:])) == 1
    assert labels[0] != labels[50]


def test_kmeans_single_cluster():
    np.testing.assert_array_equal(kmeans(blobs(), 1, Rng(0)), 0)


def test_kmeans_objective_never_increases():
    x = np.random.default_rng(4).normal(size=(300, 5))
    _, history = kmeans(x, 6, Rng(3), return_history=True)
    assert np.all(np.diff(history) <= 1e-9)


def test_kmeans_is_deterministic_under_seed():
    x = np.random.default_rng(4).normal(size=(200, 3))
    np.testing.assert_array_equal(kmeans(x, 4, Rng(1)), kmeans(x, 4, Rng(1)))


def test_kmeans_fills_every_cluster_with_duplicates():
    x = np.vstack([np.zeros((20, 2)), np.ones((2, 2))])
    labels = kmeans(x, 4, Rng(0))
    assert set(labels.tolist()) == {0, 1, 2, 3}


def test_normalize_rows():
    out, zero = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0], [0.6, 0.8]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0], [0.6, 0.8]])
    np.testing.assert_array_equal(zero, [False, True, False])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalized_rows_have_unit_norm(seed):
    x = np.random.default_rng(seed).normal(size=(20, 6))
    out, zero = normalize_rows(x)
    assert not zero.any()
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-12)
    again, _ = normalize_rows(out)
    np.testing.assert_allclose(again, out, rtol=1e-12)


def test_canonical_labels_number_by_first_member():
    np.testing.assert_array_equal(canonical_labels(np.array([5, 5, 2, 9, 2])), [0, 0, 1, 2, 1])
