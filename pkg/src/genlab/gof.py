"""Goodness-of-fit tests and mergeable summary statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy import stats


def ks_test(samples, reference: Union[Callable, Sequence[float], np.ndarray]) -> tuple[float, float]:
    """One-sample KS against a CDF, or two-sample KS against another sample.

    For n >= 100 the p-value uses the asymptotic Kolmogorov distribution.
    """
    x = np.asarray(samples, dtype=float)
    if len(x) == 0:
        raise ValueError("empty sample")
    if callable(reference):
        method = "asymp" if len(x) >= 100 else "exact"
        res = stats.kstest(x, reference, method=method)
    else:
        y = np.asarray(reference, dtype=float)
        method = "asymp" if min(len(x), len(y)) >= 100 else "auto"
        res = stats.ks_2samp(x, y, method=method)
    return float(res.statistic), float(res.pvalue)


def pool_cells(counts, probs, min_expected: float = 5.0):
    """Merge adjacent cells (from the tail inwards) until every expectation reaches ``min_expected``."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = counts.sum()
    oc, pc = [], []
    acc_c = acc_p = 0.0
    for c, p in zip(counts, probs):
        acc_c += c
        acc_p += p
        if acc_p * n >= min_expected:
            oc.append(acc_c)
            pc.append(acc_p)
            acc_c = acc_p = 0.0
    if acc_p > 0 or acc_c > 0:
        if pc:
            oc[-1] += acc_c
            pc[-1] += acc_p
        else:
            oc.append(acc_c)
            pc.append(acc_p)
    return np.asarray(oc), np.asarray(pc)


def chisq_test(counts, probs, min_expected: float = 5.0, ddof: int = 0) -> tuple[float, float]:
    """Pearson chi-square of observed ``counts`` against cell probabilities ``probs``.

    Probabilities are renormalized to the observed total; cells with expected
    count below ``min_expected`` are pooled with their neighbours.
    """
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if counts.shape != probs.shape:
        raise ValueError("counts and probs differ in shape")
    if np.any(probs < 0) or probs.sum() <= 0:
        raise ValueError("invalid probabilities")
    probs = probs / probs.sum()
    oc, pc = pool_cells(counts, probs, min_expected)
    if len(oc) < 2:
        return 0.0, 1.0
    exp = pc * counts.sum()
    stat = float(np.sum((oc - exp) ** 2 / exp))
    df = len(oc) - 1 - ddof
    return stat, float(stats.chi2.sf(stat, df))


def mixture_chisq_test(observed, pmf_rows: np.ndarray, min_expected: float = 5.0) -> tuple[float, float]:
    """Chi-square where observation i has its own law ``pmf_rows[i]`` over 0..K-1.

    The expected histogram is the sum of the rows; the last column should hold
    the tail mass.
    """
    obs = np.asarray(observed, dtype=np.int64)
    K = pmf_rows.shape[1]
    counts = np.bincount(np.minimum(obs, K - 1), minlength=K)
    return chisq_test(counts, pmf_rows.sum(axis=0), min_expected)


def ci_compare(est_a: float, se_a: float, est_b: float, se_b: float) -> float:
    """z-score of the difference of two independent estimates."""
    if est_a == est_b:
        return 0.0
    s = math.hypot(se_a, se_b)
    return math.inf if s == 0 else (est_a - est_b) / s


@dataclass(frozen=True)
class Moments:
    """Count, sum and sum of squares: merges exactly and associatively."""

    n: int = 0
    s1: float = 0.0
    s2: float = 0.0

    @staticmethod
    def of(x) -> "Moments":
        x = np.asarray(x, dtype=float)
        return Moments(int(x.size), float(math.fsum(x.ravel())), float(math.fsum((x * x).ravel())))

    def merge(self, other: "Moments") -> "Moments":
        return Moments(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2)

    @property
    def mean(self) -> float:
        return self.s1 / self.n if self.n else math.nan

    @property
    def se(self) -> float:
        if self.n < 2:
            return math.inf
        var = (self.s2 - self.s1 * self.s1 / self.n) / (self.n - 1)
        return math.sqrt(max(var, 0.0) / self.n)


@dataclass(frozen=True)
class Histogram:
    """Integer-count histogram; merging adds counts."""

    counts: tuple

    @staticmethod
    def of(values, bins: int) -> "Histogram":
        v = np.minimum(np.asarray(values, dtype=np.int64), bins - 1)
        return Histogram(tuple(int(c) for c in np.bincount(v, minlength=bins)))

    def merge(self, other: "Histogram") -> "Histogram":
        if len(self.counts) != len(other.counts):
            raise ValueError("histograms differ in length")
        return Histogram(tuple(a + b for a, b in zip(self.counts, other.counts)))
