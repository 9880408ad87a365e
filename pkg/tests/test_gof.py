import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from genlab.gof import (Histogram, Moments, chisq_test, ci_compare, ks_test, mixture_chisq_test, pool_cells)
from genlab.seeding import kernel_seed, make_rng, spawn


def test_ks_calibration():
    ps = [ks_test(r.exponential(size=2000), stats.expon.cdf)[1] for r in spawn(1, 100)]
    assert sum(p > 0.01 for p in ps) >= 98


def test_ks_two_sample_calibration():
    ps = [ks_test(r.normal(size=500), r.normal(size=700))[1] for r in spawn(2, 100)]
    assert sum(p > 0.01 for p in ps) >= 98


def test_ks_power():
    rng = make_rng(3)
    assert ks_test(rng.exponential(size=10_000) * 1.1, stats.expon.cdf)[1] < 1e-6
    assert ks_test(rng.normal(size=10_000) + 0.1, rng.normal(size=10_000))[1] < 1e-6


def test_chisq_calibration_and_power():
    probs = np.array([0.5, 0.3, 0.15, 0.05])
    ps = [chisq_test(np.bincount(r.choice(4, 5000, p=probs), minlength=4), probs)[1] for r in spawn(4, 100)]
    assert sum(p > 0.01 for p in ps) >= 98
    shifted = np.array([0.47, 0.32, 0.16, 0.05])
    counts = np.bincount(make_rng(5).choice(4, 10_000, p=shifted), minlength=4)
    assert chisq_test(counts, probs)[1] < 1e-6
    with pytest.raises(ValueError):
        chisq_test([1, 2], [0.5, -0.5])


def test_mixture_chisq():
    rng = make_rng(6)
    p = rng.uniform(0.2, 0.8, size=5000)
    obs = rng.geometric(p) - 1
    K = 30
    k = np.arange(K)
    rows = p[:, None] * (1 - p[:, None]) ** k
    rows[:, -1] = (1 - p) ** (K - 1)
    assert mixture_chisq_test(obs, rows)[1] > 0.01


def test_pool_cells():
    oc, pc = pool_cells([10, 5, 1, 1, 0], [0.5, 0.3, 0.1, 0.05, 0.05], min_expected=5)
    assert oc.sum() == 17 and pc.sum() == pytest.approx(1.0)
    assert np.all(pc * 17 >= 5 - 1e-12)


def test_ci_compare():
    assert ci_compare(1.0, 0.1, 1.0, 0.2) == 0.0
    assert ci_compare(1.0, 0.3, 0.0, 0.4) == pytest.approx(2.0)
    assert ci_compare(1.0, 0.0, 0.0, 0.0) == float("inf")


dyadic = st.lists(st.integers(-1000, 1000).map(lambda k: k / 64), max_size=20)


@given(dyadic, dyadic, dyadic)
def test_moments_merge_associative(a, b, c):
    ma, mb, mc = Moments.of(a), Moments.of(b), Moments.of(c)
    assert ma.merge(mb).merge(mc) == ma.merge(mb.merge(mc))
    assert ma.merge(mb).merge(mc) == Moments.of(a + b + c)


@given(st.lists(st.integers(0, 12), max_size=30), st.lists(st.integers(0, 12), max_size=30),
       st.lists(st.integers(0, 12), max_size=30))
def test_histogram_merge_associative(a, b, c):
    ha, hb, hc = (Histogram.of(x, 8) for x in (a, b, c))
    assert ha.merge(hb).merge(hc) == ha.merge(hb.merge(hc)) == Histogram.of(a + b + c, 8)


def test_moments_mean_se():
    x = make_rng(7).normal(size=1000)
    m = Moments.of(x)
    assert m.mean == pytest.approx(x.mean())
    assert m.se == pytest.approx(x.std(ddof=1) / np.sqrt(1000))
    with pytest.raises(ValueError):
        Histogram.of([1], 3).merge(Histogram.of([1], 4))


def test_seeding_is_reproducible():
    a = [r.random() for r in spawn(42, 3)]
    assert a == [r.random() for r in spawn(42, 3)]
    assert len(set(a)) == 3
    assert kernel_seed(make_rng(1)) == kernel_seed(make_rng(1))
    assert 0 <= kernel_seed(make_rng(2)) < 2 ** 62
