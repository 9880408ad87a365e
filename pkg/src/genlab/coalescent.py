"""Dual side: enriched Kingman coalescent with Feynman-Kac weights.

Backwards in time each pair of blocks merges at rate b while the dual distance
between separate blocks grows at speed 2.  Moments of the forward process are

    E[Φ(U_t)] = E[H^φ(u_0, (p_t, r'_t)) exp(∫_0^t b C(|p_s|, 2) + a |p_s| ds)]

where H^φ draws one point of u_0 per block (weighted by mass, so each block
contributes a factor of the total mass) and evaluates φ on the sampled initial
distances plus r'.  Blocks are labelled by their least element.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .forward import LAMBDA_CAP, backward_clock
from .massdiff import CRITICAL, MassPath, ModelParams
from .seeding import SeedLike, kernel_seed, make_rng
from .umspace import Dendrogram, Polynomial, sample_leaves, unit_tree


@dataclass
class CoalescentState:
    """Partition (block label = least element per individual), dual distances, FK log-weight."""

    labels: np.ndarray
    r_prime: np.ndarray
    log_weight: float
    clock: float

    @property
    def blocks(self) -> list[list[int]]:
        out: dict[int, list[int]] = {}
        for i, l in enumerate(self.labels):
            out.setdefault(int(l), []).append(i)
        return [out[k] for k in sorted(out)]

    @property
    def n_blocks(self) -> int:
        return len(np.unique(self.labels))


@dataclass
class DualBatch:
    """Vectorized coalescent replicates."""

    labels: np.ndarray      # (R, n)
    r_prime: np.ndarray     # (R, n, n)
    log_weight: np.ndarray  # (R,)
    t: float

    @property
    def n_blocks(self) -> np.ndarray:
        n = self.labels.shape[1]
        return np.sum(self.labels == np.arange(n)[None, :], axis=1)


def kingman_batch(n: int, t: float, params: ModelParams = CRITICAL, reps: int = 1,
                  seed: SeedLike = None) -> DualBatch:
    """``reps`` exact runs of the enriched coalescent started from n singletons."""
    if n < 1 or t < 0:
        raise ValueError("need n >= 1 and t >= 0")
    rng = make_rng(seed)
    b, a = params.b, params.a
    labels = np.tile(np.arange(n), (reps, 1))
    packed = labels.copy()  # block representatives in the first k columns
    merge_time = np.full((reps, n, n), float(t))
    logw = np.zeros(reps)
    clock = np.zeros(reps)
    active = np.ones(reps, dtype=bool)
    rows = np.arange(reps)
    for k in range(n, 1, -1):
        if not np.any(active):
            break
        rate = b * k * (k - 1) / 2.0
        pot = b * k * (k - 1) / 2.0 + a * k
        dt = rng.exponential(1.0 / rate, size=reps)
        done = active & (clock + dt >= t)
        logw[done] += pot * (t - clock[done])
        active &= ~done
        logw[active] += pot * dt[active]
        clock[active] += dt[active]
        idx = rows[active]
        if len(idx) == 0:
            break
        i = rng.integers(0, k, size=len(idx))
        j = rng.integers(0, k - 1, size=len(idx))
        j = np.where(j >= i, j + 1, j)
        li = packed[idx, i]
        lj = packed[idx, j]
        lo = np.minimum(li, lj)
        hi = np.maximum(li, lj)
        in_lo = labels[idx] == lo[:, None]
        in_hi = labels[idx] == hi[:, None]
        cross = (in_lo[:, :, None] & in_hi[:, None, :]) | (in_hi[:, :, None] & in_lo[:, None, :])
        mt = merge_time[idx]
        mt[cross] = np.broadcast_to(clock[idx][:, None, None], mt.shape)[cross]
        merge_time[idx] = mt
        lab = labels[idx]
        lab[in_hi] = np.broadcast_to(lo[:, None], lab.shape)[in_hi]
        labels[idx] = lab
        # drop the merged representative by swapping in the last packed column
        pos_hi = np.where(li == hi, i, j)
        pk = packed[idx]
        pk[np.arange(len(idx)), pos_hi] = pk[:, k - 1]
        packed[idx] = pk
    if np.any(active):
        logw[active] += (a * 1) * (t - clock[active])
    r_prime = 2.0 * merge_time
    r_prime[:, np.arange(n), np.arange(n)] = 0.0
    return DualBatch(labels, r_prime, logw, float(t))


def run_kingman_enriched(n: int, t: float, params: ModelParams = CRITICAL, seed: SeedLike = None) -> CoalescentState:
    d = kingman_batch(n, t, params, 1, seed)
    return CoalescentState(d.labels[0], d.r_prime[0], float(d.log_weight[0]), float(t))


@dataclass
class DualEstimate:
    estimate: float
    se: float
    ess: float

    def __iter__(self):
        return iter((self.estimate, self.se))


def _weighted_mean(values: np.ndarray, logw: np.ndarray) -> DualEstimate:
    m = float(np.max(logw))
    w = np.exp(logw - m)
    prod = values * w
    est = math.exp(m) * float(prod.mean())
    se = math.exp(m) * float(prod.std(ddof=1)) / math.sqrt(len(values)) if len(values) > 1 else math.inf
    ess = float(w.sum() ** 2 / np.sum(w * w))
    return DualEstimate(est, se, ess)


def dual_moment_estimate(u0, poly: Polynomial, t: float, params: ModelParams = CRITICAL,
                         n_mc: int = 100_000, seed: SeedLike = None) -> DualEstimate:
    """Estimate ``E[Φ(U_t)]`` from the dual, started from the tree ``u0`` (or a mass)."""
    rng = make_rng(seed)
    tree = u0 if isinstance(u0, Dendrogram) else unit_tree(float(u0))
    n = poly.degree
    if n == 0:
        c = float(np.asarray(poly.phi(np.zeros((1, 1, 1))))[0])
        return DualEstimate(c, 0.0, float(n_mc))
    if tree.is_null:
        return DualEstimate(0.0, 0.0, float(n_mc))
    dual = kingman_batch(n, t, params, n_mc, rng)
    pts = sample_leaves(tree, (n_mc, n), rng)
    rep_pts = np.take_along_axis(pts, dual.labels, axis=1)
    ii, jj = np.triu_indices(n, 1)
    dist = dual.r_prime.copy()
    if len(ii):
        d0 = tree.distance(rep_pts[:, ii], rep_pts[:, jj])
        dist[:, ii, jj] += d0
        dist[:, jj, ii] += d0
    vals = poly(dist) * tree.total_mass ** dual.n_blocks
    res = _weighted_mean(vals, dual.log_weight)
    if res.ess < 100:
        warnings.warn(f"Feynman-Kac weights degenerate: effective sample size {res.ess:.1f}")
    return res


# conditioned (time-inhomogeneous) coalescent
@dataclass
class ConditionedCoalescent:
    state: CoalescentState
    forced: bool
    spine_time: np.ndarray  # per individual: forward time its block met the immortal line (nan if never)


def _clock_inverse(path: MassPath, b: float, cap: float):
    B = backward_clock(path, b)
    k0 = int(np.flatnonzero(B <= cap)[0])
    knots = B[k0:][::-1]           # increasing backward clock
    times = path.grid[k0:][::-1]   # matching forward times (decreasing)
    return knots, times, k0 > 0


def run_conditioned_coalescent(path: MassPath, n: int, b: float = 1.0, seed: SeedLike = None,
                               immigration: bool = False, cap: float = LAMBDA_CAP,
                               initial_offset: float = 0.0) -> ConditionedCoalescent:
    """Pair coalescence at rate ``b/ū`` backwards from ``path.t_end``.

    With ``immigration`` each block also meets the immortal line at the same
    rate.  If the clock to the path start exceeds ``cap`` all remaining blocks
    are merged at the time where the clock reaches ``cap``.
    """
    rng = make_rng(seed)
    knots, times, forced = _clock_inverse(path, b, cap)
    total = float(knots[-1])
    t_end = path.t_end
    start = float(times[-1])
    labels = np.arange(n)
    merge = np.full((n, n), np.nan)
    spine = np.full(n, np.nan)
    alive = list(range(n))  # block representatives not yet on the line
    ell = 0.0
    while len(alive) > 1 or (immigration and len(alive) == 1):
        k = len(alive)
        rate = k * (k - 1) / 2.0 + (k if immigration else 0.0)
        ell += rng.exponential(1.0 / rate)
        if ell >= total:
            break
        s = float(np.interp(ell, knots, times))
        u = rng.uniform() * rate
        if u < k * (k - 1) / 2.0:
            i, j = rng.choice(k, size=2, replace=False)
            la, lb = sorted((alive[i], alive[j]))
            ma = labels == la
            mb = labels == lb
            merge[np.ix_(ma, mb)] = s
            merge[np.ix_(mb, ma)] = s
            labels[mb] = la
            alive.remove(lb)
        else:
            i = int(rng.integers(k))
            spine[labels == alive[i]] = s
            alive.pop(i)
    if forced and len(alive) > 1:
        for lb in alive[1:]:
            ma = labels == alive[0]
            mb = labels == lb
            merge[np.ix_(ma, mb)] = start
            merge[np.ix_(mb, ma)] = start
            labels[mb] = alive[0]
        alive = alive[:1]
    # distances: merged pairs by merge time, otherwise via the line or the start
    mrca = np.where(np.isnan(merge), np.nan, merge)
    base = start if forced else start - initial_offset
    sp = np.where(np.isnan(spine), start, spine)
    for i in range(n):
        for j in range(n):
            if i != j and np.isnan(mrca[i, j]):
                on_line = immigration and not (np.isnan(spine[i]) and np.isnan(spine[j]))
                mrca[i, j] = min(sp[i], sp[j]) if on_line else base
    np.fill_diagonal(mrca, t_end)
    r = 2.0 * (t_end - mrca)
    state = CoalescentState(labels, r, 0.0, t_end - start)
    return ConditionedCoalescent(state, forced, spine)


def conditioned_pair_distances(path: MassPath, reps: int, b: float = 1.0, seed: SeedLike = None,
                               immigration: bool = False, cap: float = LAMBDA_CAP,
                               initial_offset: float = 0.0) -> np.ndarray:
    """Vectorized dual pair distances (n = 2) for one mass path."""
    rng = make_rng(seed)
    knots, times, forced = _clock_inverse(path, b, cap)
    total = float(knots[-1])
    t_end = path.t_end
    start = float(times[-1])
    base = start if forced else start - initial_offset
    if not immigration:
        e = rng.exponential(1.0, size=reps)
        s = np.interp(np.minimum(e, total), knots, times)
        return np.where(e < total, 2.0 * (t_end - s), 2.0 * (t_end - base))
    # coalescence clock 1, each lineage leaves for the line at clock 1
    e_c = rng.exponential(1.0, size=reps)
    e1 = rng.exponential(1.0, size=reps)
    e2 = rng.exponential(1.0, size=reps)
    first_kill = np.minimum(e1, e2)
    coal = (e_c < first_kill) & (e_c < total)
    second = np.maximum(e1, e2)
    s_coal = np.interp(np.minimum(e_c, total), knots, times)
    s_line = np.interp(np.minimum(second, total), knots, times)
    line_mrca = np.where(second < total, s_line, np.where(first_kill < total, start, base))
    return np.where(coal, 2.0 * (t_end - s_coal), 2.0 * (t_end - line_mrca))


# spatial coalescent
@njit(cache=True)
def _spatial_dual_kernel(start, t, b, cmig, cum_kernel, y0, reps, seed):
    np.random.seed(seed)
    n = start.shape[0]
    S = y0.shape[0]
    out_logw = np.zeros(reps)
    out_val = np.zeros(reps)
    out_merge = np.full((reps, n, n), t)
    loc = np.empty(n, dtype=np.int64)
    lab = np.empty(n, dtype=np.int64)
    for r in range(reps):
        for i in range(n):
            loc[i] = start[i]
            lab[i] = i
        clock = 0.0
        logw = 0.0
        while True:
            # blocks are individuals i with lab[i] == i
            k = 0
            co = 0
            for i in range(n):
                if lab[i] == i:
                    k += 1
                    for j in range(i + 1, n):
                        if lab[j] == j and loc[j] == loc[i]:
                            co += 1
            rate = cmig * k + b * co
            if rate <= 0.0:
                logw += b * co * (t - clock)
                break
            dt = np.random.exponential(1.0 / rate)
            if clock + dt >= t:
                logw += b * co * (t - clock)
                break
            logw += b * co * dt
            clock += dt
            u = np.random.random() * rate
            if u < cmig * k:
                # move one block
                target = int(u / cmig)
                c = -1
                for i in range(n):
                    if lab[i] == i:
                        c += 1
                        if c == target:
                            v = np.random.random()
                            nxt = 0
                            while nxt < S - 1 and cum_kernel[loc[i], nxt] < v:
                                nxt += 1
                            loc[i] = nxt
                            break
            else:
                target = int((u - cmig * k) / b)
                c = -1
                done = False
                for i in range(n):
                    if lab[i] != i or done:
                        continue
                    for j in range(i + 1, n):
                        if lab[j] == j and loc[j] == loc[i]:
                            c += 1
                            if c == target:
                                for p in range(n):
                                    for q in range(n):
                                        if lab[p] == i and lab[q] == j:
                                            out_merge[r, p, q] = clock
                                            out_merge[r, q, p] = clock
                                for p in range(n):
                                    if lab[p] == j:
                                        lab[p] = i
                                done = True
                                break
        val = 1.0
        for i in range(n):
            if lab[i] == i:
                val *= y0[loc[i]]
        out_logw[r] = logw
        out_val[r] = val
    return out_val, out_logw, out_merge


def spatial_dual_moment(start_sites, t: float, y0, kernel: np.ndarray, params: ModelParams,
                        phi=None, n_mc: int = 10_000, seed: SeedLike = None) -> DualEstimate:
    """Spatial dual for ``E[∫ φ(r) Π 1{ξ_i = start_i} ν^{⊗n}]`` at time t.

    Blocks sit on sites, jump at rate ``cmig`` with the kernel, and each
    co-located unordered pair merges at rate b; the Feynman-Kac potential is b
    per co-located pair.  Initial site populations are single atoms of mass
    ``y0[ξ]`` at mutual distance 0.
    """
    rng = make_rng(seed)
    start = np.asarray(start_sites, dtype=np.int64)
    y0 = np.asarray(y0, dtype=float)
    cum = np.cumsum(np.asarray(kernel, dtype=float), axis=1)
    cum[:, -1] = 1.0
    vals, logw, merge = _spatial_dual_kernel(start, float(t), params.b, params.cmig, cum, y0, n_mc,
                                             kernel_seed(rng))
    if phi is not None:
        r = 2.0 * merge
        n = len(start)
        r[:, np.arange(n), np.arange(n)] = 0.0
        vals = vals * np.asarray(phi(r), dtype=float)
    return _weighted_mean(vals, logw)


def _clock_crossing(grid: np.ndarray, B: np.ndarray, e: np.ndarray):
    """Forward time at which the backward clock ``B`` (one row per path) equals ``e``.

    Returns ``(s, hit)``; ``hit`` is False where ``e >= B[:, 0]``.
    """
    idx = np.sum(B > e[:, None], axis=1)
    hit = idx > 0
    k = np.clip(idx, 1, B.shape[1] - 1)
    rows = np.arange(len(e))
    b_hi, b_lo = B[rows, k - 1], B[rows, k]
    g_hi, g_lo = grid[k - 1], grid[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(np.isfinite(b_hi), (b_hi - e) / (b_hi - b_lo), 0.0)
    s = g_hi + np.clip(frac, 0.0, 1.0) * (g_lo - g_hi)
    return s, hit


def batch_pair_distances(grid, values: np.ndarray, b: float = 1.0, seed: SeedLike = None,
                         immigration: bool = False, cap: float = LAMBDA_CAP,
                         initial_offset: float = 0.0) -> np.ndarray:
    """One dual pair distance per mass path (rows of ``values``), vectorized.

    Same law as :func:`conditioned_pair_distances` applied row by row.
    """
    rng = make_rng(seed)
    grid = np.asarray(grid, dtype=float)
    v = np.atleast_2d(np.asarray(values, dtype=float))
    with np.errstate(divide="ignore"):
        inv = np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), np.inf)
    inc = b * np.diff(grid)[None, :] * 0.5 * (inv[:, :-1] + inv[:, 1:])
    B = np.concatenate([np.cumsum(inc[:, ::-1], axis=1)[:, ::-1], np.zeros((len(v), 1))], axis=1)
    forced = B[:, 0] > cap
    # forced paths start at the first grid point where the clock is below the cap
    k0 = np.argmax(B <= cap, axis=1)
    e_start = np.where(forced, B[np.arange(len(v)), k0], np.inf)
    start = grid[k0]
    base = np.where(forced, start, start - initial_offset)
    t_end = grid[-1]
    P = len(v)

    def crossing(e):
        e_eff = np.minimum(e, e_start)
        s, hit = _clock_crossing(grid, B, e_eff)
        hit = hit & (e < np.where(forced, e_start, B[:, 0]))
        return s, hit

    e_c = rng.exponential(1.0, size=P)
    s_c, hit_c = crossing(e_c)
    if not immigration:
        return np.where(hit_c, 2.0 * (t_end - s_c), 2.0 * (t_end - base))
    e1 = rng.exponential(1.0, size=P)
    e2 = rng.exponential(1.0, size=P)
    first, second = np.minimum(e1, e2), np.maximum(e1, e2)
    coal = hit_c & (e_c < first)
    s_2, hit_2 = crossing(second)
    _, hit_1 = crossing(first)
    line = np.where(hit_2, s_2, np.where(hit_1, start, base))
    return np.where(coal, 2.0 * (t_end - s_c), 2.0 * (t_end - line))
