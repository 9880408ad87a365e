"""Forward particle constructions of genealogy-valued processes.

Galton-Watson genealogies are sampled through the coalescent point process
(CPP) of the reconstructed tree: for a linear birth-death process with birth
rate λ and death rate μ (r = λ - μ), a clan started by one particle survives
to time t with probability e^{rt}/W(t), where W(h) = (λ e^{rh} - μ)/r
(W(h) = 1 + λh when r = 0), and then its surviving leaves are separated by
i.i.d. node depths H with P(H > h) = 1/W(h), conditioned on H < t.  An
event-driven simulator with explicit MRCA bookkeeping is kept as a cross-check.

The Moran construction runs a finite Fleming-Viot genealogy in the intrinsic
clock Λ(s) = ∫ b/ū: every unordered pair resamples at Λ-rate 1, and with
immortal-line immigration every particle is replaced by an immigrant at
Λ-rate 1.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numba import njit

from .massdiff import CRITICAL, MassPath, ModelParams
from .seeding import SeedLike, kernel_seed, make_rng
from .umspace import (Dendrogram, _RangeMax, from_distance_matrix, null_tree,
                      offdiagonal_pair_mass, unit_tree)

LAMBDA_CAP = 50.0


# coalescent point process
def _bd_rates(N: float, params: ModelParams) -> tuple[float, float]:
    p = 0.5 + params.a / (2.0 * params.b * N)
    if not 0.0 <= p <= 1.0:
        raise ValueError("|a| must not exceed b*N")
    return params.b * N * p, params.b * N * (1.0 - p)


def _W(h, lam: float, mu: float):
    r = lam - mu
    if r == 0.0:
        return 1.0 + lam * h
    return (lam * np.exp(r * h) - mu) / r


def _W_inv(w, lam: float, mu: float):
    r = lam - mu
    if r == 0.0:
        return (w - 1.0) / lam
    return np.log((r * w + mu) / lam) / r


def _cpp_depths(n: int, t: float, lam: float, mu: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` node depths conditioned on being below ``t``."""
    wt = _W(t, lam, mu)
    u = rng.uniform(1.0 / wt, 1.0, size=n)
    return np.minimum(_W_inv(1.0 / u, lam, mu), t)


def _clan_sizes(n_init: int, t: float, lam: float, mu: float, rng: np.random.Generator):
    """Indices of surviving founders and their leaf counts."""
    wt = _W(t, lam, mu)
    r = lam - mu
    p_surv = 1.0 / wt if r == 0.0 else math.exp(r * t) / wt
    alive = np.flatnonzero(rng.uniform(size=n_init) < p_surv)
    sizes = rng.geometric(1.0 / wt, size=len(alive))
    return alive, sizes


def _expand_initial(init: Dendrogram, N: float):
    counts = np.floor(init.mass * N + 1e-9).astype(np.int64)
    if counts.sum() < 1:
        raise ValueError("initial particle count floor(N * mass) must be at least 1")
    leaf_of = np.repeat(np.arange(init.n_leaves), counts)
    # gap between consecutive founders: 0 inside a leaf, tree gap across leaves
    gaps = np.zeros(max(len(leaf_of) - 1, 0))
    cross = np.flatnonzero(np.diff(leaf_of) != 0)
    if len(cross):
        tab = init.table()
        gaps[cross] = tab.query(leaf_of[cross], leaf_of[cross + 1])
    return len(leaf_of), gaps


def simulate_gw_genealogy(N: float, x0=1.0, t: float = 1.0, params: ModelParams = CRITICAL,
                          seed: SeedLike = None) -> Dendrogram:
    """Genealogy at time ``t`` of binary GW particles of mass ``1/N``.

    Each particle branches at rate ``bN`` into two (probability
    ``1/2 + a/(2bN)``) or dies.  ``x0`` is a mass or an initial Dendrogram; each
    initial leaf of mass m contributes ``floor(N m)`` founders at distance 0
    from each other.  Extinct runs return the null tree.
    """
    rng = make_rng(seed)
    init = x0 if isinstance(x0, Dendrogram) else unit_tree(float(x0))
    n_init, init_gaps = _expand_initial(init, N)
    if t == 0:
        return Dendrogram(np.full(n_init, 1.0 / N), init_gaps)
    lam, mu = _bd_rates(N, params)
    alive, sizes = _clan_sizes(n_init, t, lam, mu, rng)
    if len(alive) == 0:
        return null_tree()
    total = int(sizes.sum())
    gaps = np.empty(total - 1)
    inner = np.ones(total - 1, dtype=bool)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    inner[starts[1:] - 1] = False
    gaps[inner] = _cpp_depths(int(inner.sum()), t, lam, mu, rng)
    if len(alive) > 1:
        between = _RangeMax(init_gaps).query(alive[:-1], alive[1:]) if len(init_gaps) else np.zeros(len(alive) - 1)
        gaps[~inner] = t + between
    return Dendrogram(np.full(total, 1.0 / N), gaps)


def simulate_immigration_genealogy(N: float, t: float, params: ModelParams, x0: float = 0.0,
                                   convention: str = "outside", seed: SeedLike = None) -> Dendrogram:
    """GW genealogy with immigration of single particles at rate ``N c``.

    convention = "outside": an immigrant arriving at time s is at distance 2s
    from everybody alive then (its ancestry leaves the population at time 0).
    convention = "immortal": immigrants split off an immortal line; families
    founded at times s < s' are at distance 2(t - s) at time t.
    """
    if params.c <= 0:
        raise ValueError("immigration needs c > 0")
    rng = make_rng(seed)
    lam, mu = _bd_rates(N, params)
    n_imm = rng.poisson(N * params.c * t)
    times = np.sort(rng.uniform(0.0, t, size=n_imm))
    n_init = int(math.floor(N * x0 + 1e-9))
    founders = np.concatenate([np.zeros(n_init), times])
    pieces_mass, pieces_gaps, clan_times = [], [], []
    for s in founders:
        depth = t - s
        alive, sizes = _clan_sizes(1, depth, lam, mu, rng)
        if len(alive) == 0:
            continue
        L = int(sizes[0])
        pieces_mass.append(np.full(L, 1.0 / N))
        pieces_gaps.append(_cpp_depths(L - 1, depth, lam, mu, rng))
        clan_times.append(s)
    if not pieces_mass:
        return null_tree()
    joins = []
    for k in range(1, len(pieces_mass)):
        if convention == "outside":
            joins.append(t)
        elif convention == "immortal":
            joins.append(t - clan_times[k - 1])
        else:
            raise ValueError(f"unknown convention {convention!r}")
    gaps = []
    for k, g in enumerate(pieces_gaps):
        if k > 0:
            gaps.append(np.array([joins[k - 1]]))
        gaps.append(g)
    return Dendrogram(np.concatenate(pieces_mass), np.concatenate(gaps))


# event-driven cross-check
@njit(cache=True)
def _gw_events(n0, t, lam, mu, imm_rate, immortal, cap, seed):
    np.random.seed(seed)
    mrca = np.zeros((cap, cap))
    sigma = np.zeros(cap)
    n = n0
    s = 0.0
    overflow = False
    while True:
        total = (lam + mu) * n + imm_rate
        if total <= 0.0:
            break
        s += np.random.exponential(1.0 / total)
        if s >= t:
            break
        u = np.random.random() * total
        if u < imm_rate:
            if n >= cap:
                overflow = True
                break
            j = n
            for k in range(n):
                v = sigma[k] if immortal else 0.0
                mrca[j, k] = v
                mrca[k, j] = v
            sigma[j] = s
            n += 1
            continue
        i = int((u - imm_rate) / (lam + mu))
        if i >= n:
            i = n - 1
        if np.random.random() < lam / (lam + mu):
            if n >= cap:
                overflow = True
                break
            j = n
            for k in range(n):
                mrca[j, k] = mrca[i, k]
                mrca[k, j] = mrca[k, i]
            mrca[i, j] = s
            mrca[j, i] = s
            sigma[j] = sigma[i]
            n += 1
        else:
            last = n - 1
            if i != last:
                for k in range(n):
                    mrca[i, k] = mrca[last, k]
                    mrca[k, i] = mrca[k, last]
                sigma[i] = sigma[last]
            n -= 1
    return mrca[:n, :n].copy(), overflow


def simulate_gw_events(N: float, x0: float, t: float, params: ModelParams = CRITICAL,
                       seed: SeedLike = None, immigration: Optional[str] = None,
                       cap: Optional[int] = None) -> Dendrogram:
    """Event-driven GW (optionally with immigration) with exact MRCA tracking.

    Without ``cap`` the particle capacity starts small and doubles on
    overflow; the rerun reuses the kernel seed, so the result does not depend
    on the capacity.
    """
    rng = make_rng(seed)
    lam, mu = _bd_rates(N, params)
    n0 = int(math.floor(N * x0 + 1e-9))
    imm_rate = N * params.c if immigration else 0.0
    kseed = kernel_seed(rng)
    grow = cap is None
    cap = cap or int(4 * max(n0, 1) + 4 * N * params.c * t + 64)
    if cap < n0 + (1 if immigration == "immortal" else 0):
        raise RuntimeError("particle capacity below the initial population; raise cap")
    while True:
        mrca, overflow = _gw_events(n0, float(t), lam, mu, imm_rate, immigration == "immortal", cap, kseed)
        if not overflow:
            break
        if not grow:
            raise RuntimeError("particle capacity exceeded; raise cap")
        cap *= 2
    n = mrca.shape[0]
    if n == 0:
        return null_tree()
    dist = 2.0 * (t - mrca)
    np.fill_diagonal(dist, 0.0)
    return from_distance_matrix(dist, np.full(n, 1.0 / N))


# Moran genealogy driven by a mass path
def intrinsic_clock(path: MassPath, b: float) -> np.ndarray:
    """Trapezoid increments of ∫ b/ū over each grid cell (inf at mass zeros)."""
    v = path.values
    with np.errstate(divide="ignore"):
        inv = np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), np.inf)
    return b * np.diff(path.grid) * 0.5 * (inv[:-1] + inv[1:])


def backward_clock(path: MassPath, b: float) -> np.ndarray:
    """``B[k] = ∫_{grid[k]}^{t_end} b/ū``."""
    inc = intrinsic_clock(path, b)
    return np.concatenate([np.cumsum(inc[::-1])[::-1], [0.0]])


def _window(path: MassPath, b: float, cap: float):
    """Start index and forward clock knots of the simulated window."""
    B = backward_clock(path, b)
    finite = np.flatnonzero(B <= cap)
    k0 = int(finite[0])
    forced = k0 > 0
    lam_knots = B[k0] - B[k0:]
    return k0, lam_knots, path.grid[k0:], forced


@njit(cache=True)
def _moran_kernel(K, lam_total, lam_knots, time_knots, immigration, mrca, sigma, seed):
    np.random.seed(seed)
    pair_rate = K * (K - 1) / 2.0
    rate = pair_rate + (K if immigration else 0.0)
    lam = 0.0
    n_events = 0
    if rate <= 0.0:
        return n_events
    while True:
        lam += np.random.exponential(1.0 / rate)
        if lam >= lam_total:
            break
        s = np.interp(lam, lam_knots, time_knots)
        n_events += 1
        u = np.random.random() * rate
        if u < pair_rate:
            i = int(np.random.random() * K)
            j = int(np.random.random() * (K - 1))
            if j >= i:
                j += 1
            # particle j is replaced by an offspring of particle i
            for k in range(K):
                mrca[j, k] = mrca[i, k]
                mrca[k, j] = mrca[k, i]
            mrca[i, j] = s
            mrca[j, i] = s
            mrca[j, j] = s
            sigma[j] = sigma[i]
        else:
            i = int(np.random.random() * K)
            for k in range(K):
                mrca[i, k] = sigma[k]
                mrca[k, i] = sigma[k]
            mrca[i, i] = s
            sigma[i] = s
    return n_events


def moran_mrca(path: MassPath, K: int, b: float, seed: SeedLike = None, immigration: bool = False,
               cap: float = LAMBDA_CAP, initial_offset: float = 0.0):
    """MRCA-time matrix (K, K) of the Moran genealogy at ``path.t_end``.

    Returns ``(mrca, forced)``; ``forced`` is True when the clock from the path
    start exceeds ``cap`` and the window was shortened (single ancestor at its
    start).  Founders at the path start are at mutual distance
    ``2 * initial_offset``.
    """
    if K < 1:
        raise ValueError("K must be positive")
    rng = make_rng(seed)
    k0, lam_knots, time_knots, forced = _window(path, b, cap)
    start = float(time_knots[0])
    base = start if forced else start - initial_offset
    mrca = np.full((K, K), base)
    sigma = np.full(K, start)
    if len(lam_knots) > 1:
        _moran_kernel(K, float(lam_knots[-1]), lam_knots, time_knots, immigration, mrca, sigma, kernel_seed(rng))
    return mrca, forced


def simulate_moran_given_mass(path: MassPath, K: int = 500, params: ModelParams = CRITICAL,
                              seed: SeedLike = None, immigration: bool = False,
                              cap: float = LAMBDA_CAP) -> Dendrogram:
    """Conditioned genealogy ``ū_t · FV_t(ū)`` with K particles.

    Each unordered pair resamples at rate ``b/ū_s``, so two particles coalesce
    backwards at exactly that rate for every K.  A path that is 0 at its end
    yields the null tree.
    """
    if path.values[-1] <= 0:
        return null_tree()
    mrca, _ = moran_mrca(path, K, params.b, seed, immigration, cap)
    dist = 2.0 * (path.t_end - mrca)
    np.fill_diagonal(dist, 0.0)
    return from_distance_matrix(dist, np.full(K, path.values[-1] / K))


def pair_mass_profile(tree: Dendrogram, s: float) -> float:
    """``ν²`` of distinct pairs at distance < 2s (self pairs excluded)."""
    if tree.is_null:
        return 0.0
    return offdiagonal_pair_mass(tree, s)
