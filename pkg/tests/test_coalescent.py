import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.linalg import expm

from genlab.coalescent import (batch_pair_distances, conditioned_pair_distances, dual_moment_estimate,
                               kingman_batch, run_conditioned_coalescent, run_kingman_enriched,
                               spatial_dual_moment)
from genlab.forward import moran_mrca, simulate_gw_genealogy
from genlab.gof import chisq_test, ci_compare, ks_test
from genlab.massdiff import CRITICAL, MassPath, ModelParams, default_grid, sample_conditioned_paths
from genlab.seeding import spawn
from genlab.spatial import kernel_matrix
from genlab.umspace import Polynomial


def test_single_individual_weight():
    d = kingman_batch(1, 2.0, ModelParams(a=0.3), reps=5, seed=1)
    assert np.allclose(d.log_weight, 0.6)
    assert np.all(d.n_blocks == 1)
    assert np.all(kingman_batch(1, 2.0, reps=3, seed=1).log_weight == 0.0)


def test_pair_stays_apart_with_prob_exp_minus_bt():
    b, t, n = 1.5, 0.7, 50_000
    d = kingman_batch(2, t, ModelParams(b=b), reps=n, seed=2)
    p = math.exp(-b * t)
    frac = np.mean(d.n_blocks == 2)
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_three_sample_full_coalescence_time():
    b, n = 2.0, 40_000
    d = kingman_batch(3, 1e3, ModelParams(b=b), reps=n, seed=3)
    tmrca = d.r_prime.max(axis=(1, 2)) / 2.0
    target = 1 / (3 * b) + 1 / b
    assert abs(tmrca.mean() - target) < 3 * tmrca.std() / math.sqrt(n)


def test_degree_one_is_exact():
    est = dual_moment_estimate(1.7, Polynomial.constant(1.0, 1), 2.0, n_mc=1000, seed=4)
    assert est.estimate == pytest.approx(1.7) and est.se == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("x,b,t", [(0.5, 1.0, 1.0), (2.0, 0.5, 2.0)])
def test_second_moment_closed_form(x, b, t):
    est = dual_moment_estimate(x, Polynomial.constant(1.0, 2), t, ModelParams(b=b), 100_000, seed=5)
    assert abs(est.estimate - (x * x + b * x * t)) < 3 * est.se


@pytest.mark.parametrize("s", [0.25, 0.5, 1.0])
def test_pair_indicator_closed_form(s):
    x, t = 1.3, 1.0
    poly = Polynomial(2, lambda d: (d[..., 0, 1] < 2 * s).astype(float))
    est = dual_moment_estimate(x, poly, t, CRITICAL, 100_000, seed=6)
    assert abs(est.estimate - x * s) < 3 * est.se


@pytest.mark.parametrize("n,x,t", [(1, 1.0, 1.0), (2, 0.5, 1.0), (3, 1.0, 0.5), (3, 0.8, 1.0)])
def test_forward_dual_moments_agree(n, x, t):
    reps = 4000
    fwd = np.array([simulate_gw_genealogy(400, x, t, seed=r).total_mass ** n for r in spawn(7 + n, reps)])
    dual = dual_moment_estimate(x, Polynomial.constant(1.0, n), t, CRITICAL, 100_000, seed=8)
    z = ci_compare(fwd.mean(), fwd.std() / math.sqrt(reps), dual.estimate, dual.se)
    assert abs(z) < 3


@given(st.integers(1, 6), st.floats(0.01, 3.0), st.integers(0, 2**32))
def test_dual_distance_growth_and_labels(n, t, seed):
    d = kingman_batch(n, t, CRITICAL, reps=20, seed=seed)
    for lab, r in zip(d.labels, d.r_prime):
        apart = lab[:, None] != lab[None, :]
        assert np.all(r[apart] == 2.0 * t)
        assert np.all(r[~apart & ~np.eye(n, dtype=bool)] < 2.0 * t)
        for v in np.unique(lab):
            assert v == np.flatnonzero(lab == v).min()


def test_single_run_state():
    st_ = run_kingman_enriched(4, 0.5, seed=9)
    assert sum(len(b) for b in st_.blocks) == 4 and st_.n_blocks == len(st_.blocks)


def test_projectivity():
    n_rep, t = 40_000, 0.6
    big = kingman_batch(5, t, CRITICAL, reps=n_rep, seed=10)
    small = kingman_batch(3, t, CRITICAL, reps=n_rep, seed=11)
    sub = big.labels[:, :3]
    k_big = np.array([len(np.unique(row)) for row in sub])
    k_small = small.n_blocks
    obs = np.bincount(k_big, minlength=4)[1:]
    ref = np.bincount(k_small, minlength=4)[1:]
    _, p = stats.chi2_contingency(np.vstack([obs, ref]))[:2]
    assert p > 0.01
    tb = np.sort(big.r_prime[:, 0, 1])
    ts = np.sort(small.r_prime[:, 0, 1])
    assert ks_test(tb, ts)[1] > 0.01


def test_constant_path_is_kingman():
    m, b, t = 2.0, 1.0, 1.5
    path = MassPath(default_grid(t, 64), np.full(65, m))
    r = conditioned_pair_distances(path, 20_000, b, seed=12)
    tau = r / 2
    inner = tau[tau < t - 1e-12]
    assert abs(np.mean(tau >= t - 1e-12) - math.exp(-b * t / m)) < 0.015
    assert ks_test(inner, stats.truncexpon(b=t * b / m, scale=m / b).cdf)[1] > 0.01


def test_entrance_path_forces_full_coalescence():
    grid = default_grid(1.0, 256)
    path = MassPath(grid, grid.copy(), entrance=True)
    res = run_conditioned_coalescent(path, 6, 1.0, seed=13)
    assert res.forced
    assert len(np.unique(res.state.labels)) == 1


def test_moran_and_dual_pair_laws_agree():
    grid = default_grid(1.0, 256)
    vals = sample_conditioned_paths(1.0, 1.0, grid, n_paths=1, seed=14)[0]
    path = MassPath(grid, vals)
    fwd = np.array([2 * (1.0 - moran_mrca(path, 8, 1.0, r)[0][0, 1]) for r in spawn(15, 1500)])
    dual = conditioned_pair_distances(path, 5000, 1.0, seed=16)
    assert ks_test(fwd, dual)[1] > 0.01


@pytest.mark.parametrize("immigration", [False, True])
def test_batch_matches_single_path(immigration):
    grid = default_grid(1.0, 128)
    vals = sample_conditioned_paths(0.5, 1.0, grid, n_paths=1, seed=17)[0]
    path = MassPath(grid, vals)
    single = conditioned_pair_distances(path, 5000, 1.0, seed=18, immigration=immigration, initial_offset=0.2)
    batch = batch_pair_distances(grid, np.tile(vals, (5000, 1)), 1.0, seed=19, immigration=immigration,
                                 initial_offset=0.2)
    assert ks_test(single, batch)[1] > 0.01


def test_conditioned_coalescent_pair_matches_vectorized():
    grid = default_grid(1.0, 64)
    vals = sample_conditioned_paths(1.0, 1.0, grid, n_paths=1, seed=20)[0]
    path = MassPath(grid, vals)
    loop = np.array([run_conditioned_coalescent(path, 2, 1.0, r).state.r_prime[0, 1] for r in spawn(21, 3000)])
    vec = conditioned_pair_distances(path, 3000, 1.0, seed=22)
    assert ks_test(loop, vec)[1] > 0.01


def test_spatial_dual_single_block_is_random_walk():
    S, t, cmig = 4, 0.8, 1.5
    K = kernel_matrix(S)
    y0 = np.array([1.0, 0.2, 0.0, 0.5])
    oracle = (expm(cmig * t * (K - np.eye(S))) @ y0)[0]
    est = spatial_dual_moment([0], t, y0, K, ModelParams(cmig=cmig), n_mc=40_000, seed=23)
    assert abs(est.estimate - oracle) < 3 * est.se


def test_spatial_dual_two_sites_pair_oracle():
    # two walkers on the complete 2-site graph; state (same site?) chain with FK potential b when together
    b, c, t = 1.0, 0.8, 1.0
    K = kernel_matrix(2, "uniform")
    y0 = np.array([1.0, 0.6])
    # generator on ordered site pairs (x1, x2) with coalescence folded into potential:
    # E[y0[x1] y0[x2] 1{apart}] + E[y0[x1] 1{merged}] with merge rate b and weight e^{b * time together}
    states = [(0, 0), (0, 1), (1, 0), (1, 1)]
    n = len(states)
    Q = np.zeros((n + 2, n + 2))
    for i, (x1, x2) in enumerate(states):
        for j, (z1, z2) in enumerate(states):
            if i != j:
                Q[i, j] += c * ((K[x1, z1] if x2 == z2 else 0) + (K[x2, z2] if x1 == z1 else 0))
        if x1 == x2:
            Q[i, n + x1] += b
    for x in range(2):
        Q[n + x, n + (1 - x)] += c * K[x, 1 - x]
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    V = np.diag([b if x1 == x2 else 0.0 for x1, x2 in states] + [0.0, 0.0])
    f = np.array([y0[x1] * y0[x2] for x1, x2 in states] + list(y0))
    oracle = (expm(t * (Q + V)) @ f)[0]
    est = spatial_dual_moment([0, 0], t, y0, K, ModelParams(b=b, cmig=c), n_mc=100_000, seed=24)
    assert abs(est.estimate - oracle) < 3 * est.se


def test_dual_second_moment_z_scores_are_standard_normal():
    # calibration of the weighted dual estimator and its standard error across seeds
    zs = []
    for r in spawn(77, 25):
        for x, b, t in ((0.5, 0.5, 1.0), (1.0, 1.0, 1.0), (2.0, 1.0, 2.0)):
            est = dual_moment_estimate(x, Polynomial.constant(1.0, 2), t, ModelParams(b=b), 20_000, r)
            zs.append((est.estimate - (x * x + b * x * t)) / est.se)
    assert stats.kstest(zs, "norm").pvalue > 0.01
