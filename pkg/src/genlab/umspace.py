"""Finite ultrametric measure spaces.

A space is stored as a planar dendrogram: leaves in a fixed left-to-right order,
each with a mass, plus ``gaps[i]``, the height of the lowest common merge of
leaves ``i`` and ``i+1``.  The genealogical distance of leaves ``i < j`` is

    r(i, j) = 2 * max(gaps[i:j])

so ultrametricity holds by construction.  A gap of ``inf`` separates root
components of a forest.  Heights are times back to the common ancestor, hence
distances are twice the heights.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform

from .seeding import SeedLike, make_rng

DISTANCE_CONVENTION = (
    "r(i,j) = 2 * height of the lowest common merge; leaves in different root "
    "components are at distance 2 * separation (null separation = infinite)"
)


class NullTreeError(ValueError):
    """Sampling from the null tree (zero total mass)."""


class _RangeMax:
    """Sparse table for O(1) range maxima over the gap array."""

    def __init__(self, gaps: np.ndarray):
        levels = [gaps]
        k = 1
        while 2 * k <= len(gaps):
            prev = levels[-1]
            levels.append(np.maximum(prev[:-k], prev[k:]))
            k *= 2
        self.levels = levels

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """max(gaps[lo:hi]) elementwise, 0 where lo >= hi."""
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        span = hi - lo
        out = np.zeros(np.broadcast(lo, hi).shape)
        pos = span > 0
        if not np.any(pos):
            return out
        s = span[pos]
        k = np.floor(np.log2(s)).astype(np.int64)
        a = lo[pos]
        b = hi[pos] - (1 << k)
        vals = np.empty(len(s))
        for lev in np.unique(k):
            sel = k == lev
            tab = self.levels[lev]
            vals[sel] = np.maximum(tab[a[sel]], tab[b[sel]])
        out[pos] = vals
        return out


@dataclass(frozen=True, eq=False)
class Dendrogram:
    """Planar representative of an ultrametric measure space.

    ``mass`` has one entry per leaf, ``gaps`` one entry per adjacent leaf pair.
    Zero-mass leaves are pruned on construction.
    """

    mass: np.ndarray
    gaps: np.ndarray
    ids: Optional[np.ndarray] = None
    _table: Optional[_RangeMax] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=float).reshape(-1)
        gaps = np.asarray(self.gaps, dtype=float).reshape(-1)
        if len(mass) == 0:
            gaps = np.zeros(0)
        if len(gaps) != max(len(mass) - 1, 0):
            raise ValueError("need exactly one gap per adjacent leaf pair")
        if np.any(mass < 0) or np.any(~np.isfinite(mass)):
            raise ValueError("leaf masses must be finite and nonnegative")
        if np.any(gaps < 0) or np.any(np.isnan(gaps)):
            raise ValueError("merge heights must be nonnegative")
        ids = np.arange(len(mass)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if len(ids) != len(mass):
            raise ValueError("ids and masses differ in length")
        keep = mass > 0
        if not np.all(keep):
            mass, gaps, ids = _prune(mass, gaps, ids, keep)
        mass.flags.writeable = False
        gaps.flags.writeable = False
        ids.flags.writeable = False
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "gaps", gaps)
        object.__setattr__(self, "ids", ids)

    # basic quantities
    @property
    def n_leaves(self) -> int:
        return len(self.mass)

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())

    @property
    def is_null(self) -> bool:
        return len(self.mass) == 0

    @property
    def height(self) -> float:
        """Largest finite merge height (0 for one leaf)."""
        fin = self.gaps[np.isfinite(self.gaps)]
        return float(fin.max()) if len(fin) else 0.0

    def table(self) -> _RangeMax:
        if self._table is None:
            object.__setattr__(self, "_table", _RangeMax(self.gaps))
        return self._table

    def distance(self, i, j) -> np.ndarray:
        """Distances between leaf positions ``i`` and ``j`` (arrays allowed)."""
        i = np.asarray(i)
        j = np.asarray(j)
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        return 2.0 * self.table().query(lo, hi)

    def distance_matrix(self) -> np.ndarray:
        n = self.n_leaves
        d = np.zeros((n, n))
        for i in range(n - 1):
            d[i, i + 1:] = 2.0 * np.maximum.accumulate(self.gaps[i:])
        return d + d.T

    def scaled(self, mass_scale: float = 1.0, distance_scale: float = 1.0) -> "Dendrogram":
        return Dendrogram(self.mass * mass_scale, self.gaps * distance_scale, self.ids)

    def relabel(self) -> "Dendrogram":
        return Dendrogram(self.mass, self.gaps)

    def __repr__(self) -> str:
        return f"Dendrogram(leaves={self.n_leaves}, mass={self.total_mass:.6g}, height={self.height:.6g})"

    # merge-tree view
    def merges(self) -> list[tuple[float, list[int]]]:
        """Merge list ``(height, children)``.

        Leaves are nodes ``0..L-1`` (planar positions); merge ``k`` is node
        ``L + k``.  Equal adjacent heights are grouped into one multifurcation,
        so merge heights strictly increase towards the roots.
        """
        return _merges_from_gaps(self.gaps)

    def to_json(self) -> str:
        return dendrogram_to_json(self)


def _prune(mass, gaps, ids, keep):
    # removing a leaf joins its neighbours through the larger of the two gaps
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64)
    if len(idx) == 1:
        return mass[idx].copy(), np.zeros(0), ids[idx].copy()
    table = _RangeMax(gaps)
    new_gaps = table.query(idx[:-1], idx[1:])
    return mass[idx].copy(), new_gaps, ids[idx].copy()


def _merges_from_gaps(gaps: np.ndarray) -> list[tuple[float, list[int]]]:
    n = len(gaps) + 1
    parent = list(range(n))
    node = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges: list[tuple[float, list[int]]] = []
    finite = np.flatnonzero(np.isfinite(gaps))
    order = finite[np.argsort(gaps[finite], kind="stable")]
    pos = 0
    while pos < len(order):
        h = gaps[order[pos]]
        end = pos
        while end < len(order) and gaps[order[end]] == h:
            end += 1
        group = np.sort(order[pos:end])
        # chains of equal-height gaps separated only by already merged blocks
        chains: list[list[int]] = []
        for g in group:
            if chains and find(chains[-1][-1] + 1) == find(g):
                chains[-1].append(g)
            else:
                chains.append([g])
        for chain in chains:
            comps = [find(chain[0])] + [find(g + 1) for g in chain]
            children = [node[c] for c in comps]
            new_id = n + len(merges)
            merges.append((float(h), sorted(children)))
            root = comps[0]
            for c in comps[1:]:
                parent[c] = root
            node[root] = new_id
        pos = end
    return merges


# constructors
def null_tree() -> Dendrogram:
    return Dendrogram(np.zeros(0), np.zeros(0))


def unit_tree(mass: float = 1.0) -> Dendrogram:
    return Dendrogram(np.array([float(mass)]), np.zeros(0))


def star_tree(masses: Sequence[float], height: float = 0.0) -> Dendrogram:
    m = np.asarray(masses, dtype=float)
    return Dendrogram(m, np.full(max(len(m) - 1, 0), float(height)))


def from_merges(masses: Sequence[float], merges: Sequence[tuple[float, Sequence[int]]],
                separation: float = math.inf, ids: Optional[Sequence[int]] = None) -> Dendrogram:
    """Build from a merge list whose node numbering follows ``Dendrogram.merges``.

    Leaves are nodes ``0..L-1``; merge ``k`` is node ``L + k``.  Children must
    be defined before their parent.  Unmerged roots are separated by
    ``separation``.
    """
    masses = np.asarray(masses, dtype=float)
    n = len(masses)
    if n == 0:
        return null_tree()
    heights = np.zeros(n + len(merges))
    children: list[list[int]] = [[] for _ in range(n + len(merges))]
    has_parent = np.zeros(n + len(merges), dtype=bool)
    first_leaf = np.arange(n + len(merges))
    for k, (h, ch) in enumerate(merges):
        nid = n + k
        ch = list(ch)
        if len(ch) < 2:
            raise ValueError("a merge needs at least two children")
        for c in ch:
            if c >= nid or c < 0:
                raise ValueError("merge children must refer to earlier nodes")
            if has_parent[c]:
                raise ValueError(f"node {c} has two parents")
            if c >= n and heights[c] >= h:
                raise ValueError("merge heights must strictly increase towards the root")
            has_parent[c] = True
        heights[nid] = float(h)
        children[nid] = sorted(ch, key=lambda c: first_leaf[c])
        first_leaf[nid] = min(first_leaf[c] for c in ch)
    roots = [v for v in range(n + len(merges)) if not has_parent[v]]
    roots.sort(key=lambda v: first_leaf[v])
    order: list[int] = []
    gaps: list[float] = []

    def walk(v):
        stack = [(v, 0)]
        while stack:
            u, k = stack.pop()
            if u < n:
                order.append(u)
                continue
            if k < len(children[u]):
                if k > 0:
                    gaps.append(heights[u])
                stack.append((u, k + 1))
                stack.append((children[u][k], 0))

    for r_i, r in enumerate(roots):
        if r_i > 0:
            gaps.append(separation)
        walk(r)
    ids_arr = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
    order_arr = np.asarray(order)
    return Dendrogram(masses[order_arr], np.asarray(gaps, dtype=float), ids_arr[order_arr])


def from_distance_matrix(dist: np.ndarray, masses: Sequence[float]) -> Dendrogram:
    """Planar dendrogram of an ultrametric distance matrix (single linkage is exact)."""
    dist = np.asarray(dist, dtype=float)
    masses = np.asarray(masses, dtype=float)
    n = len(masses)
    if n <= 1:
        return Dendrogram(masses, np.zeros(0))
    z = linkage(squareform(dist, checks=False), method="single")
    order = leaves_list(z)
    gaps = 0.5 * dist[order[:-1], order[1:]]
    return Dendrogram(masses[order], gaps, np.asarray(order))


# serialization
def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dendrogram_to_json(tree: Dendrogram) -> str:
    """Canonical JSON: leaves sorted by id, merges by (height, first child)."""
    n = tree.n_leaves
    merges = tree.merges()
    ids = tree.ids
    # map planar node numbers to canonical ids: leaves keep their ids,
    # merge nodes are numbered after the largest leaf id in canonical order
    base = int(ids.max()) + 1 if n else 0
    keyed = []
    node_min: dict[int, int] = {p: int(ids[p]) for p in range(n)}
    for k, (h, ch) in enumerate(merges):
        node_min[n + k] = min(node_min[c] for c in ch)
        keyed.append((h, node_min[n + k], k))
    keyed.sort()
    rank = {k: base + r for r, (_, _, k) in enumerate(keyed)}

    def cid(c):
        return int(ids[c]) if c < n else rank[c - n]

    leaf_items = sorted((int(ids[p]), tree.mass[p]) for p in range(n))
    leaves_txt = ",".join(f'{{"id":{i},"mass":{_fmt(m)}}}' for i, m in leaf_items)
    merge_txt = []
    for h, _, k in keyed:
        ch = sorted(cid(c) for c in merges[k][1])
        merge_txt.append(f'{{"height":{_fmt(h)},"children":[{",".join(map(str, ch))}]}}')
    return (
        f'{{"leaves":[{leaves_txt}],"merges":[{",".join(merge_txt)}],'
        f'"separation":null,"convention":{json.dumps(DISTANCE_CONVENTION)}}}'
    )


def dendrogram_from_json(text: str) -> Dendrogram:
    data = json.loads(text)
    leaves = sorted(data["leaves"], key=lambda d: d["id"])
    ids = [int(d["id"]) for d in leaves]
    masses = [float(d["mass"]) for d in leaves]
    pos = {i: p for p, i in enumerate(ids)}
    n = len(ids)
    base = max(ids) + 1 if ids else 0
    merges = []
    for k, m in enumerate(data.get("merges", [])):
        ch = [pos[c] if c in pos else n + (c - base) for c in m["children"]]
        merges.append((float(m["height"]), ch))
    sep = data.get("separation")
    separation = math.inf if sep is None else float(sep)
    return from_merges(masses, merges, separation=separation, ids=ids)


# the algebra
def h_top(tree: Dendrogram, h: float) -> Dendrogram:
    """Cap all distances at ``2h``."""
    if h <= 0:
        raise ValueError("h must be positive")
    return Dendrogram(tree.mass, np.minimum(tree.gaps, h), tree.ids)


def ball_slices(tree: Dendrogram, h: float) -> list[slice]:
    """Planar index ranges of the open 2h-balls."""
    if tree.is_null:
        return []
    cuts = np.flatnonzero(tree.gaps >= h) + 1
    edges = np.concatenate([[0], cuts, [tree.n_leaves]])
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def count_balls(tree: Dendrogram, h: float) -> int:
    """Number of open 2h-balls of positive mass."""
    if tree.is_null:
        return 0
    return int(np.count_nonzero(tree.gaps >= h)) + 1


def ball_masses(tree: Dendrogram, h: float) -> np.ndarray:
    if tree.is_null:
        return np.zeros(0)
    cuts = np.flatnonzero(tree.gaps >= h) + 1
    return np.add.reduceat(tree.mass, np.concatenate([[0], cuts]))


def h_trunk(tree: Dendrogram, h: float) -> Dendrogram:
    """One leaf per open 2h-ball, distances reduced by ``2h``."""
    if h < 0:
        raise ValueError("h must be nonnegative")
    if tree.is_null:
        return tree
    outer = tree.gaps[tree.gaps >= h] - h
    return Dendrogram(ball_masses(tree, h), outer)


def decompose_balls(tree: Dendrogram, h: float) -> list[Dendrogram]:
    """The h-top written as a list of pieces of diameter < 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    return [Dendrogram(tree.mass[s], tree.gaps[s.start:s.stop - 1], tree.ids[s])
            for s in ball_slices(tree, h)]


def concatenate_h(a: Dendrogram, b: Dendrogram, h: float) -> Dendrogram:
    """``a ⊔^h b``: both truncated at depth h, cross distances ``2h``."""
    return concatenate_many([a, b], h)


def concatenate_many(trees: Iterable[Dendrogram], h: float) -> Dendrogram:
    if h <= 0:
        raise ValueError("h must be positive")
    parts = [t for t in trees if not t.is_null]
    if not parts:
        return null_tree()
    masses, gaps, ids = [], [], []
    offset = 0
    for k, t in enumerate(parts):
        if k > 0:
            gaps.append(np.array([h]))
        masses.append(t.mass)
        gaps.append(np.minimum(t.gaps, h))
        ids.append(t.ids - t.ids.min() + offset)
        offset = int(ids[-1].max()) + 1
    return Dendrogram(np.concatenate(masses), np.concatenate(gaps), np.concatenate(ids))


def concatenate_gapped(trees: Sequence[Dendrogram], joins: Sequence[float]) -> Dendrogram:
    """Concatenate with explicit join heights ``joins[k]`` between piece k and k+1.

    Used for sliding concatenation, where the join height to the next piece
    depends on its immigration time.  Caller guarantees ultrametric consistency
    (each join at least the heights inside the adjacent pieces).
    """
    masses, gaps, ids = [], [], []
    offset = 0
    pending = None
    for t, j in zip(trees, list(joins) + [None]):
        if t.is_null:
            if pending is not None and j is not None:
                pending = max(pending, j)
            continue
        if masses:
            gaps.append(np.array([pending]))
        masses.append(t.mass)
        gaps.append(t.gaps)
        ids.append(t.ids - t.ids.min() + offset)
        offset = int(ids[-1].max()) + 1
        pending = j
    if not masses:
        return null_tree()
    return Dendrogram(np.concatenate(masses), np.concatenate(gaps), np.concatenate(ids))


# sampling and polynomials
@dataclass(frozen=True)
class DistanceMatrixSample:
    """Distances among ``n`` points drawn i.i.d. from the normalized measure."""

    n: int
    entries: np.ndarray  # full symmetric (n, n) matrix with zero diagonal

    def upper(self) -> np.ndarray:
        iu = np.triu_indices(self.n, 1)
        return self.entries[iu]


def sample_leaves(tree: Dendrogram, size, rng: np.random.Generator) -> np.ndarray:
    if tree.is_null or tree.total_mass <= 0:
        raise NullTreeError("null-tree sampling: total mass is zero")
    p = tree.mass / tree.total_mass
    return rng.choice(tree.n_leaves, size=size, p=p)


def sample_distance_matrices(tree: Dendrogram, n: int, reps: int, seed: SeedLike = None) -> np.ndarray:
    """Array of shape ``(reps, n, n)`` of sampled distance matrices."""
    rng = make_rng(seed)
    idx = sample_leaves(tree, (reps, n), rng)
    ii, jj = np.triu_indices(n, 1)
    d = tree.distance(idx[:, ii], idx[:, jj])
    out = np.zeros((reps, n, n))
    out[:, ii, jj] = d
    out[:, jj, ii] = d
    return out


def sample_distance_matrix(tree: Dendrogram, n: int, seed: SeedLike = None) -> DistanceMatrixSample:
    if n < 2:
        raise ValueError("n must be at least 2")
    return DistanceMatrixSample(n, sample_distance_matrices(tree, n, 1, seed)[0])


@dataclass(frozen=True)
class Polynomial:
    """``Φ(u) = ∫ φ(r) dμ^{⊗n}``, optionally truncated at depth ``h``.

    ``phi`` maps an array of distance matrices of shape ``(..., n, n)`` to
    values of shape ``(...)``.
    """

    degree: int
    phi: Callable[[np.ndarray], np.ndarray]
    h: Optional[float] = None

    @staticmethod
    def constant(c: float, degree: int, h: Optional[float] = None) -> "Polynomial":
        return Polynomial(degree, lambda d: np.full(d.shape[:-2], float(c)), h)

    def __call__(self, dist: np.ndarray) -> np.ndarray:
        val = np.asarray(self.phi(dist), dtype=float)
        if self.h is not None and self.degree >= 2:
            ii, jj = np.triu_indices(self.degree, 1)
            inside = np.all(dist[..., ii, jj] < 2.0 * self.h, axis=-1)
            val = val * inside
        return val

    def truncated(self, h: float) -> "Polynomial":
        return Polynomial(self.degree, self.phi, h)


def _constant_value(poly: Polynomial) -> float:
    return float(np.asarray(poly.phi(np.zeros((1, max(poly.degree, 1), max(poly.degree, 1)))))[0])


def evaluate_polynomial(tree: Dendrogram, poly: Polynomial, n_mc: int = 10_000,
                        seed: SeedLike = None, exact_cutoff: int = 12) -> tuple[float, float]:
    """(estimate, std-error) of ``Φ(tree)``.

    Exact enumeration over all leaf tuples when the tree has at most
    ``exact_cutoff`` leaves, Monte Carlo otherwise.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be positive")
    n = poly.degree
    if n == 0:
        return _constant_value(poly), 0.0
    if tree.is_null:
        return 0.0, 0.0
    m = tree.total_mass
    if n == 1:
        return _constant_value(poly) * m, 0.0
    L = tree.n_leaves
    scale = m ** n
    if L <= exact_cutoff and L ** n <= 2_000_000:
        grids = np.indices((L,) * n).reshape(n, -1).T
        p = tree.mass / m
        w = np.prod(p[grids], axis=1)
        ii, jj = np.triu_indices(n, 1)
        d = tree.distance(grids[:, ii], grids[:, jj])
        dist = np.zeros((len(grids), n, n))
        dist[:, ii, jj] = d
        dist[:, jj, ii] = d
        return float(scale * np.sum(w * poly(dist))), 0.0
    dist = sample_distance_matrices(tree, n, n_mc, seed)
    vals = scale * poly(dist)
    se = float(vals.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else math.inf
    return float(vals.mean()), se


def truncated_pair_mass(tree: Dendrogram, h: float, exact: bool = False):
    """Exact ``Φ_h`` for degree 2 and ``φ ≡ 1``: mass² of pairs at distance < 2h.

    With ``exact`` the sum of squared ball masses is returned as a Fraction.
    """
    bm = ball_masses(tree, h)
    if exact:
        return sum((Fraction(float(m)) ** 2 for m in bm), Fraction(0))
    return float(np.sum(bm * bm))


def offdiagonal_pair_mass(tree: Dendrogram, h: float) -> float:
    """As ``truncated_pair_mass`` but without the leaf diagonal (distinct pairs only)."""
    return truncated_pair_mass(tree, h) - float(np.sum(tree.mass ** 2))


def sample_compound_poisson_forest(theta: float, cluster_sampler: Callable[[np.random.Generator], Dendrogram],
                                   t: float, seed: SeedLike = None) -> Dendrogram:
    """``⊔^t`` of ``Poisson(theta)`` i.i.d. clusters."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    rng = make_rng(seed)
    k = rng.poisson(theta)
    return concatenate_many([cluster_sampler(rng) for _ in range(k)], t)
