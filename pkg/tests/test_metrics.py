import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lnseg.metrics import (
    StatsError,
    adjusted_rand_index,
    bonferroni,
    contingency,
    f_test,
    summarize,
    welch_t,
)


def pair_counting_ari(a, b):
    """ARI from the four pair counts over all unordered point pairs."""
    n11 = n10 = n01 = n00 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        if sa and sb:
            n11 += 1
        elif sa:
            n10 += 1
        elif sb:
            n01 += 1
        else:
            n00 += 1
    denom = (n11 + n01) * (n01 + n00) + (n11 + n10) * (n10 + n00)
    return 0.0 if denom == 0 else 2.0 * (n11 * n00 - n10 * n01) / denom


def test_ari_matches_pair_counting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, rng.integers(1, 7), 6)
        b = rng.integers(0, rng.integers(1, 7), 6)
        assert abs(adjusted_rand_index(a, b) - pair_counting_ari(a, b)) <= 1e-12


def test_ari_known_values():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5, abs=1e-15)
    assert adjusted_rand_index([0, 0, 1, 1, 2], [3, 3, 7, 7, 1]) == 1.0


def test_all_background_prediction_scores_zero():
    target = np.random.default_rng(1).integers(0, 3, (64, 64))
    assert adjusted_rand_index(target, np.zeros_like(target)) == 0.0


def test_degenerate_partitions_follow_the_zero_convention():
    assert adjusted_rand_index([0, 0, 0], [1, 1, 1]) == 0.0
    assert adjusted_rand_index([0], [0]) == 0.0


def test_ari_shape_mismatch():
    with pytest.raises(ValueError):
        adjusted_rand_index([0, 1, 2], [0, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.integers(0, 2**31 - 1))
def test_ari_symmetric_and_permutation_invariant(a, seed):
    a = np.array(a)
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 4, a.size)
    assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)
    relabel = rng.permutation(10)
    assert adjusted_rand_index(relabel[a], b) == pytest.approx(adjusted_rand_index(a, b), abs=1e-12)
    assert adjusted_rand_index(a, b) <= 1.0 + 1e-12


def test_contingency_sums_to_n():
    a = np.array([0, 0, 1, 2, 2, 2])
    b = np.array([1, 1, 1, 0, 0, 5])
    t = contingency(a, b)
    assert t.sum() == 6
    np.testing.assert_array_equal(t, [[0, 2, 0], [0, 1, 0], [2, 0, 1]])


def test_welch_identical_samples():
    r = welch_t([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert r.t == 0.0 and r.p == 1.0


def test_welch_against_tabulated_critical_value():
    # equal sizes and variances: Welch df equals 2n - 2; t_{0.975, 10} = 2.228
    a = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
    shift = 2.228 * math.sqrt(2 * a.var(ddof=1) / a.size)
    r = welch_t(a + shift, a)
    assert r.df == pytest.approx(10.0)
    assert r.p == pytest.approx(0.05, abs=1e-4)


def test_welch_matches_hand_computation():
    a = np.array([0.9, 0.95, 0.97, 0.99])
    b = np.array([0.5, 0.7, 0.6, 0.8])
    va, vb = a.var(ddof=1) / 4, b.var(ddof=1) / 4
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / 3 + vb**2 / 3)
    r = welch_t(a, b)
    assert r.t == pytest.approx(t, rel=1e-12)
    assert r.df == pytest.approx(df, rel=1e-12)
    assert 0 < r.p < 0.05


def test_welch_needs_two_values():
    with pytest.raises(StatsError):
        welch_t([1.0], [1.0, 2.0])


def test_f_equal_variances():
    r = f_test([1.0, 2.0, 3.0], [5.0, 6.0, 7.0])
    assert r.F == 1.0 and r.p == pytest.approx(1.0)


def test_f_against_tabulated_critical_value():
    # upper 5% point of F(4, 4) is 6.388: two-sided p = 0.10
    a = np.array([-1.0, 1.0, -1.0, 1.0, 0.0])
    b = a / math.sqrt(6.388)
    r = f_test(a, b)
    assert r.F == pytest.approx(6.388)
    assert r.p == pytest.approx(0.10, abs=1e-4)


def test_f_degenerate():
    assert f_test([1.0, 2.0], [3.0, 3.0]).F == math.inf
    with pytest.raises(StatsError):
        f_test([1.0, 1.0], [3.0, 3.0])


def test_bonferroni():
    np.testing.assert_allclose(bonferroni([0.01], m=6), [0.06])
    np.testing.assert_allclose(bonferroni([0.3, 0.01]), [0.6, 0.02])
    np.testing.assert_allclose(bonferroni([0.5], m=6), [1.0])


def test_summarize():
    s = summarize([0.0, 1.0])
    assert s["mean"] == 0.5 and s["sem"] == pytest.approx(0.5)
    assert summarize([0.3, 0.3, 0.3])["sem"] == 0.0
    assert summarize([0.7])["sem"] is None
    with pytest.raises(StatsError):
        summarize([])
