import math

import numpy as np
import pytest
from scipy import stats

from genlab.conditioned import moran_pair_statistic
from genlab.forward import (backward_clock, moran_mrca, pair_mass_profile, simulate_gw_events,
                            simulate_gw_genealogy, simulate_immigration_genealogy, simulate_moran_given_mass)
from genlab.gof import ci_compare, ks_test
from genlab.massdiff import CRITICAL, MassPath, ModelParams, default_grid, sample_feller_exact, sample_paths_exact
from genlab.seeding import spawn
from genlab.umspace import Dendrogram, truncated_pair_mass


def test_time_zero_is_star():
    tree = simulate_gw_genealogy(100, 0.5, 0.0, seed=1)
    assert tree.n_leaves == 50
    assert np.allclose(tree.mass, 0.01)
    assert np.all(tree.distance_matrix() == 0.0)


@pytest.mark.parametrize("N", [50, 200, 800])
def test_total_mass_mean_and_law(N):
    reps = 3000
    mass = np.array([simulate_gw_genealogy(N, 1.0, 1.0, seed=r).total_mass for r in spawn(N, reps)])
    assert abs(mass.mean() - 1.0) < 3 * mass.std() / math.sqrt(reps)
    if N == 800:
        _, p = ks_test(mass, sample_feller_exact(1.0, 1.0, size=20_000, seed=2))
        assert p > 0.01


def test_pair_profile_matches_closed_form():
    reps, x, s = 2000, 1.0, 0.5
    prof = np.array([pair_mass_profile(simulate_gw_genealogy(200, x, 1.0, seed=r), s) for r in spawn(3, reps)])
    assert abs(prof.mean() - x * s) < 3 * prof.std() / math.sqrt(reps)


def test_point_process_matches_event_driven():
    reps, N = 1500, 100
    a = [simulate_gw_genealogy(N, 1.0, 1.0, seed=r) for r in spawn(4, reps)]
    b = [simulate_gw_events(N, 1.0, 1.0, seed=r) for r in spawn(5, reps)]
    _, p = ks_test([t.total_mass for t in a], [t.total_mass for t in b])
    assert p > 0.01
    pa = np.array([pair_mass_profile(t, 0.3) for t in a])
    pb = np.array([pair_mass_profile(t, 0.3) for t in b])
    z = ci_compare(pa.mean(), pa.std() / math.sqrt(reps), pb.mean(), pb.std() / math.sqrt(reps))
    assert abs(z) < 3


def test_noncritical_mean():
    params = ModelParams(a=0.5)
    reps = 2000
    mass = np.array([simulate_gw_genealogy(200, 1.0, 1.0, params, r).total_mass for r in spawn(6, reps)])
    assert abs(mass.mean() - math.exp(0.5)) < 3 * mass.std() / math.sqrt(reps)


def test_immigration_mean_and_survival():
    params = ModelParams(c=1.0)
    reps = 1500
    for conv in ("outside", "immortal"):
        trees = [simulate_immigration_genealogy(200, 1.0, params, 0.5, conv, r) for r in spawn(7, reps)]
        mass = np.array([t.total_mass for t in trees])
        assert abs(mass.mean() - 1.5) < 3 * mass.std() / math.sqrt(reps)
    late = [simulate_immigration_genealogy(100, 8.0, params, 0.0, seed=r).is_null for r in spawn(8, 200)]
    early = [simulate_immigration_genealogy(100, 0.05, params, 0.0, seed=r).is_null for r in spawn(9, 200)]
    assert sum(late) == 0 and sum(early) > sum(late)


def test_immigration_requires_rate():
    with pytest.raises(ValueError):
        simulate_immigration_genealogy(100, 1.0, CRITICAL)


def test_immigration_event_driven_agrees():
    params = ModelParams(c=1.0)
    reps = 1500
    a = [simulate_immigration_genealogy(100, 1.0, params, 0.0, "immortal", r) for r in spawn(10, reps)]
    b = [simulate_gw_events(100, 0.0, 1.0, params, r, immigration="immortal") for r in spawn(11, reps)]
    pa = np.array([pair_mass_profile(t, 0.5) for t in a])
    pb = np.array([pair_mass_profile(t, 0.5) for t in b])
    z = ci_compare(pa.mean(), pa.std() / math.sqrt(reps), pb.mean(), pb.std() / math.sqrt(reps))
    assert abs(z) < 3


def test_moran_constant_path_pair_law():
    m, b, t = 2.0, 1.0, 1.5
    path = MassPath(default_grid(t, 64), np.full(65, m))
    d = np.array([2.0 * (t - moran_mrca(path, 2, b, r)[0][0, 1]) for r in spawn(12, 6000)])
    tau = d / 2.0
    p_none = math.exp(-b * t / m)
    frac = np.mean(tau >= t - 1e-12)
    assert abs(frac - p_none) < 3 * math.sqrt(p_none * (1 - p_none) / len(tau))
    inner = tau[tau < t - 1e-12]
    law = stats.truncexpon(b=t * b / m, scale=m / b)
    _, p = ks_test(inner, law.cdf)
    assert p > 0.01


def test_moran_huge_mass_is_star():
    path = MassPath(default_grid(1.0, 8), np.full(9, 1e12))
    tree = simulate_moran_given_mass(path, 20, seed=13)
    d = tree.distance_matrix()
    assert np.allclose(d[~np.eye(20, dtype=bool)], 2.0)


def test_moran_extinct_path_is_null():
    path = MassPath(default_grid(1.0, 4), np.array([1.0, 0.5, 0.0, 0.0, 0.0]))
    assert simulate_moran_given_mass(path, 10, seed=14).is_null


def test_moran_over_feller_paths_matches_gw_pair_statistic():
    x, t, s, reps = 1.0, 1.0, 0.5, 2000
    grid = default_grid(t, 256)
    paths = sample_paths_exact(x, CRITICAL, grid, reps, seed=15)
    stat = np.array([moran_pair_statistic(simulate_moran_given_mass(MassPath(grid, v), 30, seed=r), s)
                     for v, r in zip(paths, spawn(16, reps))])
    assert abs(stat.mean() - x * s) < 3 * stat.std() / math.sqrt(reps)


def test_backward_clock():
    path = MassPath(np.array([0.0, 1.0, 2.0]), np.array([1.0, 2.0, 4.0]))
    B = backward_clock(path, 2.0)
    assert B.tolist() == pytest.approx([2 * (0.75 + 0.375), 2 * 0.375, 0.0])


def test_branching_property_additive():
    N, t, reps = 200, 0.8, 3000
    init = Dendrogram(np.array([0.5, 1.0]), np.array([0.3]))
    both = np.array([truncated_pair_mass(simulate_gw_genealogy(N, init, t, seed=r), t) for r in spawn(17, reps)])
    one = np.array([truncated_pair_mass(simulate_gw_genealogy(N, 0.5, t, seed=r), t) for r in spawn(18, reps)])
    two = np.array([truncated_pair_mass(simulate_gw_genealogy(N, 1.0, t, seed=r), t) for r in spawn(19, reps)])
    se = math.sqrt((both.var() + one.var() + two.var()) / reps)
    assert abs(both.mean() - one.mean() - two.mean()) < 3 * se


def test_exchangeability_of_particles():
    tree = simulate_gw_genealogy(200, 1.0, 1.0, seed=20)
    d = tree.distance_matrix()
    perm = np.random.default_rng(21).permutation(tree.n_leaves)
    dp = d[np.ix_(perm, perm)]
    assert np.array_equal(np.sort(d.ravel()), np.sort(dp.ravel()))
