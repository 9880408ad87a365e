"""Cox cluster machinery: single-ancestor families, Cox composition, ball counts.

A family of depth h descends from one ancestor at time 0 of the window [0, h].
Lineages split at rate α(s) = a e^{-as} / (e^{-as} - e^{-ah}) (1/(h - s) when
critical); the tree is cut at h - ε, where every lineage carries an
exponential leaf mass of mean m_ε.  With F(y) = (e^{ay} - 1)/a (F(y) = y when
a = 0) the reconstructed tree is a point process of node heights: each node
height H satisfies P(H > y) = F(ε)/F(y), and the leaf count is geometric with
success F(ε)/F(h).  Hence the family mass is exactly Exp(mean m_h) for every cut.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .massdiff import CRITICAL, ModelParams, cluster_mean, laplace_exponent_u, sample_feller_exact, u_infinity
from .seeding import SeedLike, make_rng
from .umspace import Dendrogram, concatenate_many, count_balls, null_tree

DEFAULT_CUT = 1e-3


def _F(y, a: float):
    y = np.asarray(y, dtype=float)
    return y if a == 0.0 else np.expm1(a * y) / a


def _F_inv(v, a: float):
    v = np.asarray(v, dtype=float)
    return v if a == 0.0 else np.log1p(a * v) / a


def _check_cut(h: float, epsilon: Optional[float]) -> float:
    eps = DEFAULT_CUT * h if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("epsilon-cut must be positive")
    if not eps < h:
        raise ValueError("epsilon-cut must be below the depth h")
    return eps


def _node_heights(n: int, h: float, eps: float, a: float, rng: np.random.Generator) -> np.ndarray:
    f_eps, f_h = float(_F(eps, a)), float(_F(h, a))
    u = rng.uniform(f_eps / f_h, 1.0, size=n)
    return np.clip(_F_inv(f_eps / u, a), eps, h)


def _direct_tree(h: float, eps: float, a: float, rng: np.random.Generator) -> np.ndarray:
    """Recursive split sampler: a lineage with remaining depth y splits at y' with
    F(y') = F(y) U; below the cut it becomes a leaf."""
    f_eps = float(_F(eps, a))
    gaps: list[float] = []
    stack: list[tuple[str, float]] = [("node", h)]
    while stack:
        kind, y = stack.pop()
        if kind == "gap":
            gaps.append(y)
            continue
        fy = float(_F(y, a)) * rng.uniform()
        if fy <= f_eps:
            continue
        y_split = float(_F_inv(fy, a))
        # emitted in reverse: left child, gap, right child
        stack.append(("node", y_split))
        stack.append(("gap", y_split))
        stack.append(("node", y_split))
    return np.asarray(gaps, dtype=float)


def sample_yule_family(h: float, params: ModelParams = CRITICAL, epsilon: Optional[float] = None,
                       seed: SeedLike = None, method: str = "cpp") -> Dendrogram:
    """One single-ancestor family of depth ``h`` with cut ``epsilon``.

    ``method="cpp"`` draws i.i.d. node heights (coalescent point process),
    ``method="direct"`` follows the splitting lineages; both have the same law.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    eps = _check_cut(h, epsilon)
    rng = make_rng(seed)
    a = params.a
    if method == "cpp":
        n_leaves = int(rng.geometric(float(_F(eps, a) / _F(h, a))))
        gaps = _node_heights(n_leaves - 1, h, eps, a, rng)
    elif method == "direct":
        gaps = _direct_tree(h, eps, a, rng)
        n_leaves = len(gaps) + 1
    else:
        raise ValueError(f"unknown method {method!r}")
    mass = rng.exponential(float(cluster_mean(eps, params)), size=n_leaves)
    return Dendrogram(mass, gaps)


def sample_yule_families(h: float, n: int, params: ModelParams = CRITICAL, epsilon: Optional[float] = None,
                         seed: SeedLike = None) -> list[Dendrogram]:
    """``n`` independent families, drawn in one vectorized pass."""
    eps = _check_cut(h, epsilon)
    rng = make_rng(seed)
    a = params.a
    leaves = rng.geometric(float(_F(eps, a) / _F(h, a)), size=n)
    mass = rng.exponential(float(cluster_mean(eps, params)), size=int(leaves.sum()))
    gaps = _node_heights(int(leaves.sum() - n), h, eps, a, rng)
    m_split = np.split(mass, np.cumsum(leaves)[:-1])
    g_split = np.split(gaps, np.cumsum(leaves - 1)[:-1])
    return [Dendrogram(m, g) for m, g in zip(m_split, g_split)]


def sample_family_masses(h: float, n: int, params: ModelParams = CRITICAL, epsilon: Optional[float] = None,
                         seed: SeedLike = None) -> np.ndarray:
    """Total masses of ``n`` families: sums of a geometric number of cut-leaf masses."""
    eps = _check_cut(h, epsilon)
    rng = make_rng(seed)
    leaves = rng.geometric(float(_F(eps, params.a) / _F(h, params.a)), size=n)
    return rng.gamma(leaves.astype(float), float(cluster_mean(eps, params)))


def sample_cox_count(y, h: float, params: ModelParams = CRITICAL, rng: Optional[np.random.Generator] = None):
    """Number of depth-h families given mass ``y`` at time t - h."""
    rng = make_rng(rng)
    return rng.poisson(np.asarray(y, dtype=float) * float(u_infinity(h, params)))


def compose_cox_state(x0: float, t: float, h: float, params: ModelParams = CRITICAL,
                      seed: SeedLike = None, epsilon: Optional[float] = None,
                      return_parts: bool = False):
    """The h-top of the state at time t from ``x0``: ``⊔^h`` of Cox-many families.

    With ``return_parts`` also returns ``(Y_{t-h}, families)``.
    """
    if not 0 < h <= t:
        raise ValueError("need 0 < h <= t")
    rng = make_rng(seed)
    y = float(sample_feller_exact(x0, t - h, params, rng=rng))
    n = int(sample_cox_count(y, h, params, rng))
    fams = sample_yule_families(h, n, params, epsilon, rng) if n else []
    tree = concatenate_many(fams, h) if fams else null_tree()
    return (tree, y, fams) if return_parts else tree


def sample_cox_masses(x0: float, t: float, h: float, n: int, params: ModelParams = CRITICAL,
                      seed: SeedLike = None, epsilon: Optional[float] = None):
    """Vectorized ``(total mass, family count, Y_{t-h})`` of ``n`` composed states."""
    rng = make_rng(seed)
    y = sample_feller_exact(x0, t - h, params, rng=rng, size=n)
    counts = sample_cox_count(y, h, params, rng)
    eps = _check_cut(h, epsilon)
    extra = rng.negative_binomial(np.maximum(counts, 1), float(_F(eps, params.a) / _F(h, params.a)))
    leaves = np.where(counts > 0, extra + counts, 0)
    mass = np.where(leaves > 0, rng.gamma(np.maximum(leaves, 1).astype(float), float(cluster_mean(eps, params))), 0.0)
    return mass, counts, y


def ball_success(h: float, hprime: float, params: ModelParams = CRITICAL) -> float:
    """Success probability of the geometric number of 2h'-balls in one 2h-ball."""
    if not 0 < hprime <= h:
        raise ValueError("need 0 < h' <= h")
    return float(_F(hprime, params.a) / _F(h, params.a))


def geometric_ball_pmf(k, h: float, hprime: float, params: ModelParams = CRITICAL):
    """``P(k balls)`` on {1, 2, ...}: ``p (1 - p)^{k-1}`` with ``p = F(h')/F(h)``."""
    p = ball_success(h, hprime, params)
    k = np.asarray(k)
    return np.where(k >= 1, p * (1.0 - p) ** np.maximum(k - 1, 0), 0.0)


def ballcount_generating_function(h: float, hprime: float, q, params: ModelParams = CRITICAL):
    """``g(q) = 1 - u_{h-h'}((1-q) u_{h'}(∞)) / u_h(∞)``."""
    if not 0 < hprime <= h:
        raise ValueError("need 0 < h' <= h")
    q = np.asarray(q, dtype=float)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("q must lie in [0, 1]")
    inner = (1.0 - q) * u_infinity(hprime, params)
    out = 1.0 - laplace_exponent_u(h - hprime, inner, params) / u_infinity(h, params)
    return out[()] if np.ndim(out) == 0 else out


def cox_levy_density(y, t: float, h: float, params: ModelParams = CRITICAL):
    """Density of the cluster Lévy measure at mass ``y`` for horizon t and depth h.

    Equal to ``u_s(∞) / m_s · exp(-y / m_s)`` with ``s = t - h``; in the critical
    case ``(b s / 2)^{-2} exp(-2y / (b s))``.
    """
    s = t - h
    if not s > 0:
        raise ValueError("need h < t")
    m = float(cluster_mean(s, params))
    y = np.asarray(y, dtype=float)
    out = np.where(y > 0, float(u_infinity(s, params)) / m * np.exp(-y / m), 0.0)
    return out[()] if out.ndim == 0 else out


def family_ball_counts(fams: list[Dendrogram], hprime: float) -> np.ndarray:
    return np.array([count_balls(f, hprime) for f in fams], dtype=np.int64)
