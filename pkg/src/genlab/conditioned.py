"""Long-survival objects.

T-conditioned genealogies (Moran driven by a conditioned mass path), the
Q-process (mass with immigration b, genealogy with an immortal line), the
size-biased (Palm) state by mass reweighting, the Kallenberg decomposition
check, the backbone tree, and the rescaled long-time limits.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .coalescent import batch_pair_distances
from .coxcluster import DEFAULT_CUT, compose_cox_state, sample_cox_masses, sample_yule_family
from .forward import LAMBDA_CAP, simulate_moran_given_mass
from .gof import chisq_test
from .massdiff import (CRITICAL, MassPath, ModelParams, default_grid, sample_conditioned_paths,
                       sample_conditioned_terminal, sample_feller_exact, sample_paths_exact, u_infinity)
from .seeding import SeedLike, make_rng, spawn
from .umspace import Dendrogram, concatenate_gapped, concatenate_many, count_balls, h_top, null_tree, \
    truncated_pair_mass


@dataclass
class Report:
    statistic: str
    paper_target: float
    estimate: float
    se: float
    passed: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = bool(d.pop("passed"))
        for k in ("paper_target", "estimate", "se"):
            d[k] = None if d[k] is None or not math.isfinite(d[k]) else float(d[k])
        return d


def _z_report(name: str, target: float, est: float, se: float, k: float = 3.0) -> Report:
    ok = abs(est - target) <= k * se if se > 0 else est == target
    return Report(name, float(target), float(est), float(se), bool(ok))


def _p_report(name: str, p: float, alpha: float = 0.01) -> Report:
    """Goodness-of-fit report: the estimate is the p-value, the target is alpha."""
    return Report(name, alpha, float(p), 0.0, bool(p > alpha))


@dataclass(frozen=True)
class ScaledTree:
    base: Dendrogram
    mass_scale: float = 1.0
    distance_scale: float = 1.0

    def __post_init__(self):
        if not (self.mass_scale > 0 and self.distance_scale > 0):
            raise ValueError("scales must be positive")

    @property
    def tree(self) -> Dendrogram:
        return self.base.scaled(self.mass_scale, self.distance_scale)

    def h_top(self, h: float) -> "ScaledTree":
        return ScaledTree(h_top(self.base, h / self.distance_scale), self.mass_scale, self.distance_scale)

    @staticmethod
    def yaglom(tree: Dendrogram, t: float, b: float = 1.0, normalization: str = "t") -> "ScaledTree":
        """Scales ``1/t`` on masses and distances, or ``1/(bt)`` and ``b/t`` with ``normalization="bt"``."""
        if normalization == "t":
            return ScaledTree(tree, 1.0 / t, 1.0 / t)
        if normalization == "bt":
            return ScaledTree(tree, 1.0 / (b * t), b / t)
        raise ValueError("normalization must be 't' or 'bt'")


# T-conditioned and Q-process trees
def sample_T_conditioned_tree(x0: float, T: float, t: Optional[float] = None, K: int = 200,
                              params: ModelParams = CRITICAL, seed: SeedLike = None, steps: int = 512,
                              return_path: bool = False):
    """Genealogy at time ``t <= T`` of the process conditioned on survival to ``T``.

    ``x0 = 0`` uses the entrance law from the null tree.
    """
    t = T if t is None else t
    if not 0 < t <= T:
        raise ValueError("need 0 < t <= T")
    rng = make_rng(seed)
    grid = default_grid(t, steps)
    vals = sample_conditioned_paths(x0, T, grid, params, 1, rng)[0]
    path = MassPath(grid, vals, entrance=(x0 == 0))
    tree = simulate_moran_given_mass(path, K, params, rng)
    return (tree, path) if return_path else tree


def q_process_params(params: ModelParams) -> ModelParams:
    if not params.critical:
        raise ValueError("the Q-process is implemented for the critical case")
    return replace(params, c=params.b)


def sample_q_process_tree(x0: float, t: float, K: int = 200, params: ModelParams = CRITICAL,
                          seed: SeedLike = None, steps: int = 512, return_path: bool = False):
    """Mass: Feller with immigration b; genealogy: Moran with an immortal line."""
    rng = make_rng(seed)
    grid = default_grid(t, steps)
    vals = sample_paths_exact(x0, q_process_params(params), grid, 1, rng)[0]
    path = MassPath(grid, vals, entrance=(x0 == 0))
    tree = simulate_moran_given_mass(path, K, params, rng, immigration=True)
    return (tree, path) if return_path else tree


def sample_T_conditioned_trees(x0: float, T: float, n: int, t: Optional[float] = None, K: int = 200,
                               params: ModelParams = CRITICAL, seed: SeedLike = None, steps: int = 512):
    """``n`` independent T-conditioned genealogies; mass paths are drawn in one batch."""
    t = T if t is None else t
    rng = make_rng(seed)
    grid = default_grid(t, steps)
    vals = sample_conditioned_paths(x0, T, grid, params, n, rng)
    return [simulate_moran_given_mass(MassPath(grid, v, entrance=(x0 == 0)), K, params, rng) for v in vals]


def sample_q_process_trees(x0: float, t: float, n: int, K: int = 200, params: ModelParams = CRITICAL,
                           seed: SeedLike = None, steps: int = 512):
    """``n`` independent Q-process genealogies; mass paths are drawn in one batch."""
    rng = make_rng(seed)
    grid = default_grid(t, steps)
    vals = sample_paths_exact(x0, q_process_params(params), grid, n, rng)
    return [simulate_moran_given_mass(MassPath(grid, v, entrance=(x0 == 0)), K, params, rng, immigration=True)
            for v in vals]


def moran_pair_statistic(tree: Dendrogram, h: float) -> float:
    """``ū² · P(two distinct particles within distance < 2h)``.

    Unbiased for the degree-2 truncated polynomial of the diffuse limit, since
    the Moran pair law does not depend on the particle number.
    """
    if tree.is_null:
        return 0.0
    K = tree.n_leaves
    tot = tree.total_mass
    if K < 2:
        return tot * tot
    off = truncated_pair_mass(tree, h) - float(np.sum(tree.mass ** 2))
    return off * K / (K - 1)


# size-biasing
def size_biased_indices(weights: np.ndarray, n: int, rng: np.random.Generator):
    """Multinomial resampling proportional to ``weights``; returns (indices, ESS)."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum")
    p = w / w.sum()
    ess = 1.0 / float(np.sum(p * p))
    return rng.choice(len(w), size=n, p=p), ess


def ratio_estimate(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """``mean(num) / mean(den)`` with a delta-method standard error."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    r = num.mean() / den.mean()
    resid = num - r * den
    se = float(resid.std(ddof=1) / (math.sqrt(len(num)) * abs(den.mean())))
    return float(r), se


# backbone
@dataclass
class BackboneParts:
    depths: np.ndarray   # t - s for each split, decreasing
    families: list
    lump: float


def sample_backbone_tree(t: float, params: ModelParams = CRITICAL, epsilon: Optional[float] = None,
                         seed: SeedLike = None, return_parts: bool = False, family_cut: Optional[float] = None):
    """Families split off an immortal line at rate ``2/(t-s)`` on ``[0, t-ε]``.

    A family split at s has depth ``t - s`` and is joined to the next (later)
    one at height ``t - s``.  The split times in ``[t-ε, t)`` are lumped into
    one leaf of mass Gamma(2, bε/2), the exact law of their total.  Each family
    uses the cut ``family_cut`` times its depth.
    """
    if not params.critical:
        raise ValueError("the backbone is implemented for the critical case")
    if not t > 0:
        raise ValueError("t must be positive")
    eps = DEFAULT_CUT * t if epsilon is None else float(epsilon)
    if not 0 < eps < t:
        raise ValueError("need 0 < epsilon < t")
    rel = DEFAULT_CUT if family_cut is None else float(family_cut)
    rng = make_rng(seed)
    n = rng.poisson(2.0 * math.log(t / eps))
    depths = np.sort(t * (eps / t) ** rng.uniform(size=n))[::-1]
    fams = [sample_yule_family(float(y), params, rel * float(y), rng) for y in depths]
    lump = float(rng.gamma(2.0, params.b * eps / 2.0))
    pieces = fams + [Dendrogram([lump], [])]
    tree = concatenate_gapped(pieces, list(depths))
    return (tree, BackboneParts(depths, fams, lump)) if return_parts else tree


def backbone_pair_oracle(s, t: float, params: ModelParams = CRITICAL):
    """``E[Φ_s]`` of the backbone tree at time t (pairs within distance 2s, s <= t)."""
    s = np.minimum(np.asarray(s, dtype=float), t)
    b = params.b
    return b * b * (s * t + s * s / 2.0)


# Kallenberg decomposition
def kallenberg_decompose_check(x0: float, t: float, params: ModelParams = CRITICAL, n_mc: int = 10_000,
                               seed: SeedLike = None, pool_factor: int = 100, n_trees: int = 1500,
                               h: Optional[float] = None) -> list[Report]:
    """Size-biased Feller state against Feller ⊔^t Kallenberg tree."""
    rngs = spawn(seed, 4)
    out: list[Report] = []
    cir0 = q_process_params(params)
    # (i) masses
    pool = sample_feller_exact(x0, t, params, size=pool_factor * n_mc, rng=rngs[0])
    idx, ess = size_biased_indices(pool, n_mc, rngs[0])
    sb = pool[idx]
    direct = sample_feller_exact(x0, t, params, size=n_mc, rng=rngs[1]) + \
        sample_feller_exact(0.0, t, cir0, size=n_mc, rng=rngs[1])
    out.append(_p_report("kallenberg_mass_ks_p", stats.ks_2samp(sb, direct).pvalue))
    out.append(_z_report("size_biased_mass_mean", float(x0 + params.b * t), float(sb.mean()),
                         float(sb.std(ddof=1) / math.sqrt(n_mc))))
    # (ii) family count at depth t
    mass, counts, _ = sample_cox_masses(x0, t, t, pool_factor * n_mc, params, rngs[2])
    idx, _ = size_biased_indices(mass, n_mc, rngs[2])
    lam = float(x0 * u_infinity(t, params))
    obs = counts[idx]
    kmax = int(obs.max())
    ks = np.arange(1, kmax + 1)
    probs = stats.poisson.pmf(ks - 1, lam)
    probs[-1] += stats.poisson.sf(kmax - 1, lam)
    cnt = np.bincount(obs, minlength=kmax + 1)[1:]
    _, p = chisq_test(cnt, probs)
    out.append(_p_report("kallenberg_ballcount_chisq_p", p))
    # (iii) degree-2 truncated polynomial
    h = t / 2.0 if h is None else h
    rng = rngs[3]
    zs, phis = np.empty(n_trees), np.empty(n_trees)
    lhs = np.empty(n_trees)
    for k in range(n_trees):
        u = compose_cox_state(x0, t, t, params, rng, epsilon=1e-2 * t)
        zs[k] = u.total_mass
        phis[k] = truncated_pair_mass(u, h) if not u.is_null else 0.0
        v = compose_cox_state(x0, t, t, params, rng, epsilon=1e-2 * t)
        kal = sample_backbone_tree(t, params, 1e-2 * t, rng, family_cut=1e-2)
        lhs[k] = truncated_pair_mass(concatenate_many([v, kal], t), h)
    est_sb, se_sb = ratio_estimate(zs * phis, zs)
    est_dir, se_dir = float(lhs.mean()), float(lhs.std(ddof=1) / math.sqrt(n_trees))
    rep = _z_report("kallenberg_truncated_pair_mass", est_dir, est_sb, math.hypot(se_sb, se_dir))
    out.append(rep)
    return out


# rescaled long-time limits
def _weighted_ecdf_cvm(a: np.ndarray, w: np.ndarray, cdf) -> float:
    order = np.argsort(a)
    a, w = a[order], w[order] / w.sum()
    F = np.cumsum(w)
    return float(np.sum(w * (F - cdf(a)) ** 2))


KY_LIMITS = {
    # family: (mass law, pair second-moment CDF of a = r/(2t), scaled second moment / b^2)
    "feller-conditioned": (lambda b: stats.expon(scale=b / 2.0), lambda a: np.clip(a, 0, 1), 0.5),
    "q-process": (lambda b: stats.gamma(2.0, scale=b / 2.0), lambda a: np.clip((2 * a + a * a) / 3.0, 0, 1), 1.5),
    "backbone": (lambda b: stats.gamma(2.0, scale=b / 2.0), lambda a: np.clip((2 * a + a * a) / 3.0, 0, 1), 1.5),
}


def _ky_samples(family: str, t: float, params: ModelParams, n: int, x0: float, steps: int,
                rng: np.random.Generator, cut: float):
    """Masses and one normalized pair distance ``r/(2t)`` per replicate."""
    b = params.b
    if family == "feller-conditioned":
        grid = default_grid(t, steps)
        paths = sample_conditioned_paths(x0, t, grid, params, n, rng)
        r = batch_pair_distances(grid, paths, b, rng)
        return paths[:, -1], r / (2.0 * t)
    if family == "q-process":
        grid = default_grid(t, steps)
        paths = sample_paths_exact(x0, q_process_params(params), grid, n, rng)
        r = batch_pair_distances(grid, paths, b, rng, immigration=True)
        return paths[:, -1], r / (2.0 * t)
    if family == "backbone":
        masses, a = np.empty(n), np.empty(n)
        for k in range(n):
            tree = sample_backbone_tree(t, params, cut * t, rng, family_cut=cut)
            masses[k] = tree.total_mass
            i, j = rng.choice(tree.n_leaves, size=2, p=tree.mass / tree.total_mass)
            a[k] = float(tree.distance(i, j)) / (2.0 * t)
        return masses, a
    raise ValueError(f"unknown family {family!r}")


def ky_rescale_and_test(family: str, t_grid: Sequence[float], params: ModelParams = CRITICAL,
                        n_mc: int = 2000, seed: SeedLike = None, x0: float = 1.0, steps: int = 256,
                        normalization: str = "t", cut: float = 1e-2, k: float = 3.0,
                        alpha: float = 0.01) -> list[Report]:
    """Rescale by ``1/t`` and compare with the limit laws across increasing t.

    Reports per t: scaled mass mean, scaled second moment, KS p-value of the
    scaled mass against the limit law, mass-squared weighted mean of the
    normalized pair distance, and its Cramér-von Mises distance to the limit.
    For the conditioned family it also checks that size-biasing its scaled
    state reproduces the second moment of the Q-process limit.  ``k`` is the
    z-score tolerance and ``alpha`` the KS level.
    """
    if family not in KY_LIMITS:
        raise ValueError(f"unknown family {family!r}")
    law, pair_cdf, m2 = KY_LIMITS[family]
    b = params.b
    mass_unit = 1.0 if normalization == "t" else b
    rngs = spawn(seed, len(t_grid))
    out: list[Report] = []
    cvms = []
    for t, rng in zip(t_grid, rngs):
        z, a = _ky_samples(family, float(t), params, n_mc, x0, steps, rng, cut)
        y = z / (t * mass_unit)
        lim = law(b / mass_unit)
        out.append(_z_report(f"scaled_mass_mean[t={t:g}]", lim.mean(), y.mean(), y.std(ddof=1) / math.sqrt(n_mc),
                              k))
        y2 = y * y
        out.append(_z_report(f"scaled_second_moment[t={t:g}]", m2 * (b / mass_unit) ** 2, y2.mean(),
                             y2.std(ddof=1) / math.sqrt(n_mc), k))
        out.append(_p_report(f"scaled_mass_ks_p[t={t:g}]", stats.kstest(y, lim.cdf).pvalue, alpha))
        grid_a = np.linspace(0, 1, 2001)
        mean_a = float(np.trapezoid(1.0 - pair_cdf(grid_a), grid_a))
        est, se = ratio_estimate(y2 * a, y2)
        out.append(_z_report(f"weighted_pair_distance_mean[t={t:g}]", mean_a, est, se, k))
        cvm = _weighted_ecdf_cvm(a, y2, pair_cdf)
        cvms.append(cvm)
        out.append(Report(f"weighted_pair_distance_cvm[t={t:g}]", 0.0, cvm, 0.0, True))
        if family == "feller-conditioned":
            est, se = ratio_estimate(y ** 3, y)
            lim_q = KY_LIMITS["q-process"][2] * (b / mass_unit) ** 2
            out.append(_z_report(f"size_biased_second_moment[t={t:g}]", lim_q, est, se, k))
    return out


def yaglom_terminal(T: float, x0: float = 1.0, params: ModelParams = CRITICAL, n: int = 10_000,
                    seed: SeedLike = None, normalization: str = "t", alpha: float = 0.01) -> Report:
    """KS of ``Z_T / T`` given survival against Exp(mean b/2)."""
    z = sample_conditioned_terminal(x0, T, params, n, seed)
    unit = 1.0 if normalization == "t" else params.b
    y = z / (T * unit)
    p = stats.kstest(y, stats.expon(scale=params.b / (2.0 * unit)).cdf).pvalue
    return _p_report(f"yaglom_ks_p[T={T:g}]", p, alpha)
