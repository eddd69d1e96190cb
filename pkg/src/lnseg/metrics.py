"""Partition agreement and the statistical tests used to compare models."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


class StatsError(ValueError):
    pass


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label arrays differ in size: {a.size} vs {b.size}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def adjusted_rand_index(labels_true: np.ndarray, labels_pred: np.ndarray) -> float:
    """Hubert-Arabie ARI. Returns 0.0 when the chance-corrected denominator vanishes
    (for example both partitions are a single cluster, or n < 2)."""
    table = contingency(labels_true, labels_pred)
    n = int(table.sum())
    if n < 2:
        return 0.0
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0:
        return 0.0
    return float((sum_ij - expected) / denom)


@dataclass
class TTest:
    t: float
    df: float
    p: float


def welch_t(a, b) -> TTest:
    """Two-sided Welch two-sample t-test. Identical samples give t=0, p=1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatsError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        return TTest(0.0, float(a.size + b.size - 2), 1.0) if ma == mb else TTest(math.copysign(math.inf, ma - mb), float(a.size + b.size - 2), 0.0)
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)) if va > 0 and vb > 0 else float(a.size - 1 if va > 0 else b.size - 1)
    p = float(2.0 * stats.t.sf(abs(t), df))
    return TTest(float(t), float(df), min(p, 1.0))


@dataclass
class FTest:
    F: float
    df1: int
    df2: int
    p: float


def f_test(a, b) -> FTest:
    """Variance-ratio test F = var(a) / var(b) with a two-sided p-value.

    A zero variance in b alone gives F = inf and p = 0; both zero is degenerate.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatsError("each sample needs at least two values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    df1, df2 = a.size - 1, b.size - 1
    if vb == 0:
        if va == 0:
            raise StatsError("both samples have zero variance; F is undefined")
        return FTest(math.inf, df1, df2, 0.0)
    f = va / vb
    p = 2.0 * min(stats.f.sf(f, df1, df2), stats.f.cdf(f, df1, df2))
    return FTest(float(f), df1, df2, float(min(p, 1.0)))


ari = adjusted_rand_index


def bonferroni(pvalues, m: int | None = None) -> np.ndarray:
    """Multiply by the number of comparisons and cap at 1."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size if m is None else m
    return np.minimum(p * m, 1.0)


def summarize(values) -> dict:
    """Mean and standard error of the mean (None when fewer than two values)."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        raise StatsError("nothing to summarize")
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else None
    return {"n": int(v.size), "mean": float(v.mean()), "sem": sem}
