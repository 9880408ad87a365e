import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from genlab.umspace import (Dendrogram, NullTreeError, Polynomial, ball_masses, concatenate_h, concatenate_many,
                            count_balls, decompose_balls, dendrogram_from_json, evaluate_polynomial, from_distance_matrix,
                            from_merges, h_top, h_trunk, null_tree, sample_compound_poisson_forest,
                            sample_distance_matrices, sample_distance_matrix, star_tree, truncated_pair_mass,
                            unit_tree)
from strategies import canonical, dendrograms, heights, is_ultrametric

TWO = Dendrogram(np.array([0.5, 0.5]), np.array([1.0]))


# examples
def test_unit_tree_distance_matrix():
    s = sample_distance_matrix(unit_tree(), 2, seed=1)
    assert s.entries.tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_two_leaves_offdiagonal_takes_zero_or_two():
    d = sample_distance_matrices(TWO, 2, 20_000, seed=2)[:, 0, 1]
    assert set(np.unique(d)) == {0.0, 2.0}
    assert abs(np.mean(d == 2.0) - 0.5) < 3 * math.sqrt(0.25 / 20_000)


def test_three_leaf_triples_match_enumeration():
    # leaves 0,1 merge at height 1, leaf 2 joins at height 2; equal masses
    tree = Dendrogram(np.ones(3) / 3, np.array([1.0, 2.0]))
    dist = np.array([[0, 2, 4], [2, 0, 4], [4, 4, 0]], dtype=float)
    law: dict = {}
    for a, b, c in itertools.product(range(3), repeat=3):
        key = (dist[a, b], dist[a, c], dist[b, c])
        law[key] = law.get(key, 0) + Fraction(1, 27)
    keys = sorted(law)
    n = 30_000
    sample = sample_distance_matrices(tree, 3, n, seed=3)
    obs = [np.sum((sample[:, 0, 1] == k[0]) & (sample[:, 0, 2] == k[1]) & (sample[:, 1, 2] == k[2])) for k in keys]
    assert sum(obs) == n
    _, p = stats.chisquare(obs, [float(law[k]) * n for k in keys])
    assert p > 1e-3


def test_polynomial_degree_zero_and_one():
    tree = Dendrogram(np.array([0.3, 1.2]), np.array([0.7]))
    assert evaluate_polynomial(tree, Polynomial.constant(2.5, 0))[0] == 2.5
    assert evaluate_polynomial(tree, Polynomial.constant(2.5, 1))[0] == pytest.approx(2.5 * 1.5)


def test_polynomial_identity_phi_on_two_leaves():
    est, se = evaluate_polynomial(TWO, Polynomial(2, lambda d: d[..., 0, 1]))
    assert est == pytest.approx(1.0) and se == 0.0


def test_polynomial_monte_carlo_matches_enumeration():
    rng = np.random.default_rng(4)
    tree = Dendrogram(rng.uniform(0.1, 1, 30), rng.choice([0.5, 1.0, 2.0], 29))
    poly = Polynomial(3, lambda d: np.exp(-d[..., 0, 1]) * (d[..., 1, 2] < 3))
    mc, se = evaluate_polynomial(tree, poly, n_mc=200_000, seed=5)
    exact, _ = evaluate_polynomial(tree, poly, exact_cutoff=40)
    assert abs(mc - exact) < 4 * se


def test_null_tree_sampling_raises():
    with pytest.raises(NullTreeError):
        sample_distance_matrix(null_tree(), 2, seed=1)
    assert evaluate_polynomial(null_tree(), Polynomial.constant(1.0, 2))[0] == 0.0


def test_h_top_examples():
    tree = Dendrogram(np.array([1.0, 2.0]), np.array([3.0]))
    assert canonical(h_top(tree, 5.0)) == canonical(tree)
    assert h_top(tree, 1.0).distance(0, 1) == 2.0
    with pytest.raises(ValueError):
        h_top(tree, 0.0)


def test_h_trunk_examples():
    tree = Dendrogram(np.array([1.0, 2.0, 0.5]), np.array([0.5, 1.5]))
    top = h_trunk(tree, 5.0)
    assert top.n_leaves == 1 and top.total_mass == pytest.approx(3.5)
    assert canonical(h_trunk(tree, 0.0)) == canonical(tree)
    mid = h_trunk(tree, 1.0)
    assert mid.mass.tolist() == [3.0, 0.5] and mid.gaps.tolist() == [0.5]


def test_concatenation_examples():
    a = Dendrogram(np.array([1.0, 2.0]), np.array([0.4]))
    assert canonical(concatenate_h(a, null_tree(), 1.0)) == canonical(a)
    ee = concatenate_h(unit_tree(), unit_tree(), 0.8)
    assert ee.mass.tolist() == [1.0, 1.0] and ee.distance(0, 1) == pytest.approx(1.6)


def test_count_balls_examples():
    tree = Dendrogram(np.array([1.0, 1.0]), np.array([1.0]))
    assert count_balls(tree, 0.5) == 2
    assert count_balls(tree, 1.5) == 1
    assert count_balls(tree, 10.0) == 1
    assert count_balls(null_tree(), 1.0) == 0


def test_compound_poisson_forest():
    assert sample_compound_poisson_forest(0.0, lambda r: unit_tree(), 1.0, seed=1).is_null
    rng = np.random.default_rng(6)
    mass = [sample_compound_poisson_forest(2.0, lambda r: unit_tree(), 1.0, rng).total_mass for _ in range(4000)]
    counts = np.bincount(np.asarray(mass, dtype=int), minlength=12)[:12]
    probs = stats.poisson.pmf(np.arange(12), 2.0)
    probs[-1] += stats.poisson.sf(11, 2.0)
    _, p = stats.chisquare(counts, probs / probs.sum() * len(mass))
    assert p > 1e-3


def test_forest_ball_count_poisson():
    rng = np.random.default_rng(7)
    sampler = lambda r: Dendrogram(r.exponential(1.0, 2), np.array([0.3]))  # noqa: E731
    c = [count_balls(sample_compound_poisson_forest(1.5, sampler, 1.0, rng), 1.0) for _ in range(4000)]
    obs = np.bincount(c, minlength=9)[:9]
    probs = stats.poisson.pmf(np.arange(9), 1.5)
    probs[-1] += stats.poisson.sf(8, 1.5)
    _, p = stats.chisquare(obs, probs / probs.sum() * len(c))
    assert p > 1e-3


def test_json_schema_and_round_trip():
    tree = from_merges([0.5, 1.0, 0.25, 2.0], [(0.5, [0, 1]), (1.0, [2, 3]), (1.5, [4, 5])])
    data = json.loads(tree.to_json())
    assert [d["id"] for d in data["leaves"]] == [0, 1, 2, 3]
    assert [m["height"] for m in data["merges"]] == [0.5, 1.0, 1.5]
    back = dendrogram_from_json(tree.to_json())
    assert back.to_json() == tree.to_json()
    assert np.array_equal(back.distance_matrix(), tree.distance_matrix())


def test_forest_json_round_trip():
    tree = Dendrogram(np.array([1.0, 2.0, 3.0]), np.array([0.5, np.inf]))
    back = dendrogram_from_json(tree.to_json())
    assert np.isinf(back.gaps).sum() == 1 and back.total_mass == 6.0


def test_invalid_trees_rejected():
    with pytest.raises(ValueError):
        Dendrogram(np.array([1.0, 1.0]), np.array([]))
    with pytest.raises(ValueError):
        Dendrogram(np.array([-1.0]), np.array([]))
    with pytest.raises(ValueError):
        from_merges([1.0, 1.0, 1.0], [(1.0, [0, 1]), (0.5, [3, 2])])


def test_zero_mass_leaves_pruned():
    tree = Dendrogram(np.array([1.0, 0.0, 2.0]), np.array([0.5, 1.5]))
    assert tree.n_leaves == 2 and tree.gaps.tolist() == [1.5]


# properties
@given(dendrograms(), heights)
def test_operations_stay_ultrametric(tree, h):
    for t in (tree, h_top(tree, h), h_trunk(tree, h), concatenate_h(tree, tree, h)):
        assert is_ultrametric(t.distance_matrix())


@given(dendrograms(), heights, heights)
def test_h_top_semigroup(tree, h1, h2):
    assert canonical(h_top(h_top(tree, h1), h2)) == canonical(h_top(tree, min(h1, h2)))


@given(dendrograms(), heights, heights)
def test_top_count_consistency(tree, h, hp):
    if hp <= h:
        assert count_balls(h_top(tree, h), hp) == count_balls(tree, hp)
        assert h_trunk(tree, hp).n_leaves == count_balls(tree, hp)


@given(dendrograms(), heights)
def test_decompose_round_trip(tree, h):
    parts = decompose_balls(tree, h)
    assert len(parts) == count_balls(tree, h)
    assert canonical(concatenate_many(parts, h)) == canonical(h_top(tree, h))
    assert np.allclose([p.total_mass for p in parts], ball_masses(tree, h))


@given(dendrograms(4), dendrograms(4), dendrograms(4), heights)
def test_concatenation_associative_commutative(a, b, c, h):
    left = concatenate_h(concatenate_h(a, b, h), c, h)
    right = concatenate_h(a, concatenate_h(b, c, h), h)
    assert canonical(left) == canonical(right)
    assert canonical(concatenate_h(a, b, h)) == canonical(concatenate_h(b, a, h))


@given(dendrograms(4), dendrograms(4), heights, heights)
def test_truncation_consistent_with_concatenation(a, b, h, hp):
    if hp < h:
        lhs = h_top(concatenate_h(a, b, h), hp)
        rhs = concatenate_h(h_top(a, hp), h_top(b, hp), hp)
        assert canonical(lhs) == canonical(rhs)


@given(dendrograms(3), dendrograms(3), heights, st.integers(1, 4))
def test_truncated_polynomial_additivity(a, b, h, degree):
    poly = Polynomial(degree, lambda d: np.exp(-d.sum(axis=(-1, -2)) / 7.0), h)
    lhs, _ = evaluate_polynomial(concatenate_h(a, b, h), poly)
    ra, _ = evaluate_polynomial(a, poly)
    rb, _ = evaluate_polynomial(b, poly)
    if degree == 1:
        assert lhs == pytest.approx(ra + rb, rel=1e-12)
    else:
        assert lhs == pytest.approx(ra + rb, rel=1e-10, abs=1e-12)


@given(dendrograms(5, dyadic=True), dendrograms(5, dyadic=True), heights)
def test_truncated_pair_mass_additivity_exact(a, b, h):
    lhs = truncated_pair_mass(concatenate_h(a, b, h), h, exact=True)
    assert lhs == truncated_pair_mass(a, h, exact=True) + truncated_pair_mass(b, h, exact=True)


@given(dendrograms())
def test_json_round_trip_property(tree):
    back = dendrogram_from_json(tree.to_json())
    assert canonical(back) == canonical(tree)
    assert back.to_json() == tree.to_json()


@given(dendrograms())
def test_distance_matrix_round_trip(tree):
    back = from_distance_matrix(tree.distance_matrix(), tree.mass)
    assert canonical(back) == canonical(tree)


@given(dendrograms(), st.permutations(range(7)))
def test_relabeling_invariance(tree, perm):
    perm = [p for p in perm if p < tree.n_leaves]
    d = tree.distance_matrix()
    back = from_distance_matrix(d[np.ix_(perm, perm)], tree.mass[perm])
    assert canonical(back) == canonical(tree)


@given(dendrograms())
def test_merges_round_trip(tree):
    back = from_merges(tree.mass, tree.merges())
    assert np.array_equal(back.distance_matrix(), tree.distance_matrix())


def test_star_tree():
    s = star_tree([1, 2, 3], 0.5)
    assert count_balls(s, 0.5) == 3 and count_balls(s, 0.6) == 1
