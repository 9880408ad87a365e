"""Super random walk on a cyclic group: marked genealogies and moment oracles.

Particles of mass 1/N branch critically at rate bN and jump at rate ``cmig``
with a symmetric kernel on Z_S.  Migration does not interact with branching,
so the genealogy is the Galton-Watson coalescent point process and the marks
follow from running the random walk down the reconstructed tree: each internal
node inherits the site of its parent after a walk of duration equal to the
height difference.  An event-driven simulator tracks sites and MRCA times
directly and serves as a cross-check.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.linalg import expm

from .forward import _bd_rates, _clan_sizes, _cpp_depths
from .massdiff import CRITICAL, ModelParams
from .seeding import SeedLike, kernel_seed, make_rng
from .umspace import Dendrogram, dendrogram_from_json, dendrogram_to_json, from_distance_matrix, null_tree


def kernel_matrix(S: int, kind: str = "nn") -> np.ndarray:
    """Symmetric migration kernel on Z_S: nearest neighbour or uniform."""
    if not 1 <= S <= 64:
        raise ValueError("the torus size must lie in 1..64")
    a = np.zeros((S, S))
    if kind == "nn":
        for x in range(S):
            a[x, (x + 1) % S] += 0.5
            a[x, (x - 1) % S] += 0.5
    elif kind == "uniform":
        a[:] = 1.0 / S
    else:
        raise ValueError(f"unknown kernel {kind!r}")
    return a


def _cumulative(kernel: np.ndarray) -> np.ndarray:
    cum = np.cumsum(np.asarray(kernel, dtype=float), axis=1)
    cum[:, -1] = 1.0
    return cum


@njit(cache=True)
def _jump(pos, n_steps, cum):
    S = cum.shape[0]
    for _ in range(n_steps):
        u = np.random.random()
        nxt = 0
        while nxt < S - 1 and cum[pos, nxt] < u:
            nxt += 1
        pos = nxt
    return pos


@njit(cache=True)
def _walk_marks(inner_gaps, sizes, founder_sites, t, cmig, cum, seed):
    """Leaf sites of every clan; ``inner_gaps`` holds L_c - 1 node heights per clan."""
    np.random.seed(seed)
    total = 0
    for c in range(sizes.shape[0]):
        total += sizes[c]
    marks = np.empty(total, dtype=np.int64)
    off = 0
    goff = 0
    for c in range(sizes.shape[0]):
        L = sizes[c]
        m = L - 1
        g = inner_gaps[goff:goff + m]
        root_pos = founder_sites[c]
        if m == 0:
            marks[off] = _jump(root_pos, np.random.poisson(cmig * t), cum)
            off += 1
            continue
        # Cartesian max-tree on the node heights
        parent = np.full(m, -1, dtype=np.int64)
        left = np.full(m, -1, dtype=np.int64)
        right = np.full(m, -1, dtype=np.int64)
        stack = np.empty(m, dtype=np.int64)
        top = 0
        for i in range(m):
            while top > 0 and g[stack[top - 1]] < g[i]:
                top -= 1
            left[i] = stack[top - 1] if top > 0 else -1
            stack[top] = i
            top += 1
        top = 0
        for i in range(m - 1, -1, -1):
            while top > 0 and g[stack[top - 1]] <= g[i]:
                top -= 1
            right[i] = stack[top - 1] if top > 0 else -1
            stack[top] = i
            top += 1
        for i in range(m):
            lft, rgt = left[i], right[i]
            if lft < 0:
                parent[i] = rgt
            elif rgt < 0:
                parent[i] = lft
            else:
                parent[i] = lft if g[lft] < g[rgt] else rgt
        order = np.argsort(-g)
        pos = np.empty(m, dtype=np.int64)
        for k in range(m):
            i = order[k]
            p = parent[i]
            if p < 0:
                pos[i] = _jump(root_pos, np.random.poisson(cmig * (t - g[i])), cum)
            else:
                pos[i] = _jump(pos[p], np.random.poisson(cmig * (g[p] - g[i])), cum)
        for j in range(L):
            if j == 0:
                p = 0
            elif j == L - 1:
                p = m - 1
            else:
                p = j - 1 if g[j - 1] < g[j] else j
            marks[off + j] = _jump(pos[p], np.random.poisson(cmig * g[p]), cum)
        off += L
        goff += m
    return marks


@dataclass(frozen=True)
class MarkedDendrogram:
    """A dendrogram with one site per leaf (aligned with ``base.ids``)."""

    base: Dendrogram
    marks: np.ndarray
    n_sites: int

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if len(marks) != self.base.n_leaves:
            raise ValueError("every leaf needs a mark")
        if len(marks) and (marks.min() < 0 or marks.max() >= self.n_sites):
            raise ValueError("marks must be site indices")
        marks.flags.writeable = False
        object.__setattr__(self, "marks", marks)

    def site_masses(self) -> np.ndarray:
        return np.bincount(self.marks, weights=self.base.mass, minlength=self.n_sites)

    def to_json(self) -> str:
        doc = json.loads(dendrogram_to_json(self.base))
        doc["sites"] = self.n_sites
        doc["marks"] = {str(int(i)): int(m) for i, m in zip(self.base.ids, self.marks)}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "MarkedDendrogram":
        doc = json.loads(text)
        base = dendrogram_from_json(text)
        marks = [doc["marks"][str(int(i))] for i in base.ids]
        return MarkedDendrogram(base, np.asarray(marks, dtype=np.int64), int(doc["sites"]))

    def site_mass_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "mass"])
        for k, v in enumerate(self.site_masses()):
            w.writerow([k, format(float(v), ".17g")])
        return buf.getvalue()


def _founders(N: float, init) -> np.ndarray:
    counts = np.floor(np.asarray(init, dtype=float) * N + 1e-9).astype(np.int64)
    if np.any(counts < 0):
        raise ValueError("initial masses must be nonnegative")
    return np.repeat(np.arange(len(counts)), counts)


def _kernel_for(params: ModelParams, S: int, kernel: Optional[np.ndarray]) -> np.ndarray:
    a = kernel_matrix(S, params.kernel) if kernel is None else np.asarray(kernel, dtype=float)
    if a.shape != (S, S) or not np.allclose(a.sum(axis=1), 1.0) or not np.allclose(a, a.T):
        raise ValueError("kernel must be a symmetric stochastic S x S matrix")
    return a


def simulate_spatial_genealogy(N: float, init: Sequence[float], t: float, params: ModelParams = CRITICAL,
                               seed: SeedLike = None, kernel: Optional[np.ndarray] = None) -> MarkedDendrogram:
    """Marked genealogy at time t; ``init[ξ]`` is the initial mass at site ξ.

    All founders are at mutual distance 0, so clans join at height t.
    """
    rng = make_rng(seed)
    S = len(init)
    a = _kernel_for(params, S, kernel)
    sites = _founders(N, init)
    lam, mu = _bd_rates(N, params)
    alive, sizes = _clan_sizes(len(sites), t, lam, mu, rng)
    if len(alive) == 0:
        return MarkedDendrogram(null_tree(), np.zeros(0, dtype=np.int64), S)
    inner = _cpp_depths(int(sizes.sum() - len(sizes)), t, lam, mu, rng)
    marks = _walk_marks(inner, sizes.astype(np.int64), sites[alive], float(t), params.cmig, _cumulative(a),
                        kernel_seed(rng))
    gaps = np.empty(int(sizes.sum()) - 1)
    is_join = np.zeros(len(gaps), dtype=bool)
    is_join[np.cumsum(sizes)[:-1] - 1] = True
    gaps[is_join] = t
    gaps[~is_join] = inner
    return MarkedDendrogram(Dendrogram(np.full(int(sizes.sum()), 1.0 / N), gaps), marks, S)


def spatial_site_masses(N: float, init: Sequence[float], t: float, params: ModelParams = CRITICAL,
                        reps: int = 1, seed: SeedLike = None, kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """Site masses of ``reps`` independent replicates, shape ``(reps, S)``."""
    rng = make_rng(seed)
    S = len(init)
    a = _kernel_for(params, S, kernel)
    cum = _cumulative(a)
    sites = _founders(N, init)
    lam, mu = _bd_rates(N, params)
    out = np.zeros((reps, S))
    for r in range(reps):
        alive, sizes = _clan_sizes(len(sites), t, lam, mu, rng)
        if len(alive) == 0:
            continue
        inner = _cpp_depths(int(sizes.sum() - len(sizes)), t, lam, mu, rng)
        marks = _walk_marks(inner, sizes.astype(np.int64), sites[alive], float(t), params.cmig, cum,
                            kernel_seed(rng))
        out[r] = np.bincount(marks, minlength=S) / N
    return out


@njit(cache=True)
def _spatial_events(sites0, t, lam, mu, cmig, cum, cap, seed):
    np.random.seed(seed)
    mrca = np.zeros((cap, cap))
    site = np.zeros(cap, dtype=np.int64)
    n = sites0.shape[0]
    for i in range(n):
        site[i] = sites0[i]
    s = 0.0
    overflow = False
    per = lam + mu + cmig
    while n > 0:
        s += np.random.exponential(1.0 / (per * n))
        if s >= t:
            break
        i = min(int(np.random.random() * n), n - 1)
        u = np.random.random() * per
        if u < cmig:
            site[i] = _jump(site[i], 1, cum)
        elif u < cmig + lam:
            if n >= cap:
                overflow = True
                break
            for k in range(n):
                mrca[n, k] = mrca[i, k]
                mrca[k, n] = mrca[k, i]
            mrca[i, n] = s
            mrca[n, i] = s
            site[n] = site[i]
            n += 1
        else:
            last = n - 1
            if i != last:
                for k in range(n):
                    mrca[i, k] = mrca[last, k]
                    mrca[k, i] = mrca[k, last]
                site[i] = site[last]
            n -= 1
    return mrca[:n, :n].copy(), site[:n].copy(), overflow


def simulate_spatial_events(N: float, init: Sequence[float], t: float, params: ModelParams = CRITICAL,
                            seed: SeedLike = None, kernel: Optional[np.ndarray] = None,
                            cap: Optional[int] = None) -> MarkedDendrogram:
    """Event-driven particle system with explicit sites and MRCA times (small N)."""
    rng = make_rng(seed)
    S = len(init)
    a = _kernel_for(params, S, kernel)
    sites = _founders(N, init)
    lam, mu = _bd_rates(N, params)
    kseed, fixed = kernel_seed(rng), cap is not None
    cap = cap or int(4 * max(len(sites), 1) + 64)
    if cap < len(sites):
        raise RuntimeError("particle capacity below the initial population; raise cap")
    while True:
        # rerunning with the same kernel seed makes the result independent of the capacity
        mrca, site, overflow = _spatial_events(sites, float(t), lam, mu, params.cmig, _cumulative(a), cap, kseed)
        if not overflow:
            break
        if fixed:
            raise RuntimeError("particle capacity exceeded; raise cap")
        cap *= 2
    n = len(site)
    if n == 0:
        return MarkedDendrogram(null_tree(), np.zeros(0, dtype=np.int64), S)
    dist = 2.0 * (t - mrca)
    np.fill_diagonal(dist, 0.0)
    tree = from_distance_matrix(dist, np.full(n, 1.0 / N))
    return MarkedDendrogram(tree, site[tree.ids], S)


# oracles
def moment_oracle(init: Sequence[float], t: float, params: ModelParams, kernel: Optional[np.ndarray] = None,
                  N: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """First and second site-mass moments ``(m, M)`` at time t.

    Solves ``m' = c A m`` and ``M' = c(AM + MA^T) + b diag(m)`` with
    ``A = a - I`` by one matrix exponential.  With ``N`` the migration noise of
    the particle system, ``(c/N) Σ a(ξ,η) m_ξ (e_η - e_ξ)(e_η - e_ξ)^T``, is added.
    """
    y0 = np.asarray(init, dtype=float)
    S = len(y0)
    a = _kernel_for(params, S, kernel)
    A = a - np.eye(S)
    c, b = params.cmig, params.b
    I = np.eye(S)
    dim = S + S * S
    G = np.zeros((dim, dim))
    G[:S, :S] = c * A
    # row-major vec: vec(AM) = (A ⊗ I) vec M, vec(M A^T) = (I ⊗ A) vec M
    G[S:, S:] = c * (np.kron(A, I) + np.kron(I, A))
    src = np.zeros((S * S, S))
    for x in range(S):
        src[x * S + x, x] += b
    if N is not None and c > 0:
        for x in range(S):
            for y in range(S):
                if x == y or a[x, y] == 0:
                    continue
                e = np.zeros(S)
                e[y] += 1.0
                e[x] -= 1.0
                src[:, x] += (c / N) * a[x, y] * np.outer(e, e).reshape(-1)
    G[S:, :S] = src
    v0 = np.concatenate([y0, np.outer(y0, y0).reshape(-1)])
    v = expm(t * G) @ v0
    return v[:S], v[S:].reshape(S, S)


def fk_pair_oracle(init: Sequence[float], t: float, params: ModelParams,
                   kernel: Optional[np.ndarray] = None) -> np.ndarray:
    """``E[y_ξ(t) y_η(t)]`` from the two-lineage Feynman-Kac chain (matrix exponential).

    States: ordered site pairs of two separate lineages, then single merged
    lineages.  Co-located pairs merge at rate b and carry the potential b.
    """
    y0 = np.asarray(init, dtype=float)
    S = len(y0)
    a = _kernel_for(params, S, kernel)
    c, b = params.cmig, params.b
    n2 = S * S
    Q = np.zeros((n2 + S, n2 + S))
    for i in range(S):
        for j in range(S):
            s = i * S + j
            for k in range(S):
                Q[s, k * S + j] += c * a[i, k]
                Q[s, i * S + k] += c * a[j, k]
            if i == j:
                Q[s, n2 + i] += b
    for k in range(S):
        for l in range(S):
            Q[n2 + k, n2 + l] += c * a[k, l]
    np.fill_diagonal(Q, 0.0)
    Q -= np.diag(Q.sum(axis=1))
    V = np.zeros(n2 + S)
    for i in range(S):
        V[i * S + i] = b
    f = np.concatenate([np.outer(y0, y0).reshape(-1), y0])
    v = expm(t * (Q + np.diag(V))) @ f
    return v[:n2].reshape(S, S)


def spatial_polynomial_estimate(tree: MarkedDendrogram, phi: Optional[Callable] = None,
                                g: Optional[Callable] = None, degree: int = 2, n_mc: int = 10_000,
                                seed: SeedLike = None) -> tuple[float, float]:
    """Monte Carlo ``∫ φ(r) g(marks) dν^{⊗n}`` by mass-proportional leaf sampling.

    ``phi`` maps distance matrices ``(R, n, n)`` and ``g`` maps marks ``(R, n)``
    to values of shape ``(R,)``; either may be omitted (≡ 1).
    """
    base = tree.base
    if base.is_null:
        return 0.0, 0.0
    rng = make_rng(seed)
    idx = rng.choice(base.n_leaves, size=(n_mc, degree), p=base.mass / base.total_mass)
    vals = np.ones(n_mc)
    if phi is not None:
        ii, jj = np.triu_indices(degree, 1)
        d = np.zeros((n_mc, degree, degree))
        if len(ii):
            dd = base.distance(idx[:, ii], idx[:, jj])
            d[:, ii, jj] = dd
            d[:, jj, ii] = dd
        vals = vals * np.asarray(phi(d), dtype=float)
    if g is not None:
        vals = vals * np.asarray(g(tree.marks[idx]), dtype=float)
    scale = base.total_mass ** degree
    vals = scale * vals
    se = float(vals.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.inf
    return float(vals.mean()), se
