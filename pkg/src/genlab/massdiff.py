"""Total-mass diffusions: closed forms and samplers.

The Feller diffusion with drift and immigration

    dZ = (c + a Z) dt + sqrt(b Z) dB

has an exactly samplable transition.  Starting from x, Z_t is a sum of
Poisson(x u_t(inf)) independent exponentials of mean m_t plus an independent
Gamma(2c/b, m_t) immigration part, where u_t is the Laplace exponent below and
m_t = b t / 2 (a = 0) or (b / 2a)(e^{at} - 1).  All exponential laws in this
package are parametrized by their mean.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import mpmath
import numpy as np

from .seeding import SeedLike, make_rng


@dataclass(frozen=True)
class ModelParams:
    """Branching rate ``b``, criticality ``a``, immigration ``c``; spatial extras."""

    b: float = 1.0
    a: float = 0.0
    c: float = 0.0
    T: Optional[float] = None
    cmig: float = 0.0
    kernel: str = "nn"

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("b must be positive")
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        if self.T is not None and not self.T > 0:
            raise ValueError("T must be positive")
        if self.cmig < 0:
            raise ValueError("cmig must be nonnegative")

    @property
    def critical(self) -> bool:
        return self.a == 0.0


CRITICAL = ModelParams()


def laplace_exponent_u(t, lam, params: ModelParams = CRITICAL):
    """``u_t(λ)`` with ``E_x exp(-λ Z_t) = exp(-x u_t(λ))`` (no immigration)."""
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    b, a = params.b, params.a
    with np.errstate(divide="ignore", invalid="ignore"):
        if a == 0.0:
            out = np.where(np.isinf(lam), 2.0 / (b * t), 2.0 * lam / (2.0 + b * t * lam))
        else:
            one_m = -np.expm1(-a * t)
            out = np.where(np.isinf(lam), 2.0 * a / (b * one_m),
                           2.0 * a * lam / (2.0 * a * np.exp(-a * t) + b * lam * one_m))
    out = np.where(t == 0, lam, out)
    return out[()] if out.ndim == 0 else out


def u_infinity(t, params: ModelParams = CRITICAL):
    """``u_t(∞)``: extinction exponent, ``P_x(Z_t = 0) = exp(-x u_t(∞))``."""
    return laplace_exponent_u(t, np.inf, params)


def cluster_mean(t, params: ModelParams = CRITICAL):
    """Mean ``m_t`` of one exponential cluster of the exact sampler."""
    t = np.asarray(t, dtype=float)
    if params.a == 0.0:
        out = params.b * t / 2.0
    else:
        out = params.b / (2.0 * params.a) * np.expm1(params.a * t)
    return out[()] if out.ndim == 0 else out


def survival_probability(x, t, params: ModelParams = CRITICAL):
    """``P_x(Z_t > 0) = 1 - exp(-x u_t(∞))`` for ``c = 0``."""
    x = np.asarray(x, dtype=float)
    out = -np.expm1(-x * u_infinity(t, params))
    return out[()] if np.ndim(out) == 0 else out


def feller_laplace_transform(x, t, lam, params: ModelParams = CRITICAL):
    """Closed form ``E_x exp(-λ Z_t)`` including immigration."""
    val = np.exp(-np.asarray(x, dtype=float) * laplace_exponent_u(t, lam, params))
    if params.c > 0:
        val = val * (1.0 + np.asarray(lam) * cluster_mean(t, params)) ** (-2.0 * params.c / params.b)
    return val


def sample_feller_exact(x, t: float, params: ModelParams = CRITICAL, seed: SeedLike = None,
                        size: Optional[int] = None, rng: Optional[np.random.Generator] = None):
    """Exact draw(s) of ``Z_t`` given ``Z_0 = x``.

    ``x`` may be an array (one draw per entry) or a scalar with ``size``.
    """
    rng = rng if rng is not None else make_rng(seed)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    if size is not None:
        x = np.broadcast_to(x, (size,))
    if t == 0:
        return x.copy() if x.ndim else float(x)
    if t < 0:
        raise ValueError("t must be nonnegative")
    m = cluster_mean(t, params)
    k = rng.poisson(x * u_infinity(t, params))
    z = rng.gamma(k, m) if np.ndim(k) else (rng.gamma(k, m) if k > 0 else 0.0)
    if params.c > 0:
        z = z + rng.gamma(2.0 * params.c / params.b, m, size=np.shape(x) or None)
    return z if np.ndim(z) else float(z)


@dataclass(frozen=True)
class MassPath:
    """Total mass on a time grid.  ``entrance`` marks paths started at 0 from the boundary."""

    grid: np.ndarray
    values: np.ndarray
    entrance: bool = False

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape:
            raise ValueError("grid and values must be 1-d of equal length")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("mass must be nonnegative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    @property
    def extinction_index(self) -> Optional[int]:
        v = self.values
        start = 1 if self.entrance else 0
        pos = np.flatnonzero(v[start:] == 0)
        return int(pos[0] + start) if len(pos) else None

    @property
    def t_end(self) -> float:
        return float(self.grid[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "z"])
        for t, z in zip(self.grid, self.values):
            w.writerow([format(t, ".17g"), format(z, ".17g")])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, entrance: bool = False) -> "MassPath":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["t", "z"]:
            raise ValueError("expected header t,z")
        data = np.array([[float(a), float(b)] for a, b in rows[1:]])
        return MassPath(data[:, 0], data[:, 1], entrance)


def default_grid(t_end: float, steps: int = 2048) -> np.ndarray:
    return np.linspace(0.0, t_end, steps + 1)


def sample_paths_exact(x, params: ModelParams, grid: Sequence[float], n_paths: int,
                       seed: SeedLike = None) -> np.ndarray:
    """``(n_paths, len(grid))`` array of exact grid-sampled paths from ``x`` at ``grid[0]``."""
    rng = make_rng(seed)
    grid = np.asarray(grid, dtype=float)
    out = np.empty((n_paths, len(grid)))
    out[:, 0] = x
    for k in range(1, len(grid)):
        out[:, k] = sample_feller_exact(out[:, k - 1], grid[k] - grid[k - 1], params, rng=rng)
    return out


def sample_path_exact(x: float, params: ModelParams, grid: Sequence[float], seed: SeedLike = None) -> MassPath:
    return MassPath(grid, sample_paths_exact(x, params, grid, 1, seed)[0], entrance=(x == 0))


def sample_paths_em(x, params: ModelParams, grid: Sequence[float], n_paths: int,
                    seed: SeedLike = None, drift=None) -> np.ndarray:
    """Full-truncation Euler-Maruyama paths; negative values are clamped to 0.

    ``drift(s, z)`` overrides the default ``c + a z``; the variance rate is ``b z``.
    """
    rng = make_rng(seed)
    grid = np.asarray(grid, dtype=float)
    out = np.empty((n_paths, len(grid)))
    out[:, 0] = x
    for k in range(1, len(grid)):
        dt = grid[k] - grid[k - 1]
        z = np.maximum(out[:, k - 1], 0.0)
        mu = params.c + params.a * z if drift is None else drift(grid[k - 1], z)
        step = z + mu * dt + np.sqrt(params.b * z * dt) * rng.standard_normal(n_paths)
        out[:, k] = np.maximum(step, 0.0)
    return out


def sample_path_em(x: float, params: ModelParams, grid: Sequence[float], seed: SeedLike = None) -> MassPath:
    return MassPath(grid, sample_paths_em(x, params, grid, 1, seed)[0], entrance=(x == 0))


# process conditioned to survive until T
def conditioned_coefficients(s, x, T: float, params: ModelParams = CRITICAL):
    """(drift, variance-rate) of the mass conditioned on ``Z_T > 0``.

    drift = a x + b x κ / (exp(x κ) - 1) with κ = u_{T-s}(∞); equals b at x = 0.
    For a = 0 this is (2x/(T-s)) / (exp(2x/(b(T-s))) - 1).  The variance rate is b x.
    """
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    kappa = u_infinity(T - s, params)
    xk = x * kappa
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        frac = np.where(xk > 0, xk / np.expm1(xk), 1.0)
    drift = params.a * x + params.b * frac
    var = params.b * x
    if drift.ndim == 0:
        return float(drift), float(var)
    return drift, var


def rejected_variance(s, x, T: float, params: ModelParams = CRITICAL) -> float:
    """The variance coefficient ``x (2 + ã)`` that the extrapolation rules out."""
    drift, _ = conditioned_coefficients(s, x, T, params)
    return float(x * (2.0 + drift))


@dataclass
class CoefficientReport:
    drift: float
    variance: float
    drift_closed_form: float
    variance_closed_form: float
    drift_rel_error: float
    variance_rel_error: float
    rejected_variance: float
    rejected_rel_deviation: float
    h_values: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.drift_rel_error < 1e-6 and self.variance_rel_error < 1e-6 and self.rejected_rel_deviation >= 1.0


def _richardson(h: Sequence[float], vals: Sequence) -> mpmath.mpf:
    # Neville extrapolation of a smooth function of h to h = 0
    h = list(h)
    p = list(vals)
    n = len(p)
    for k in range(1, n):
        for i in range(n - k):
            p[i] = (h[i + k] * p[i] - h[i] * p[i + 1]) / (h[i + k] - h[i])
    return p[0]


def verify_conditioned_coefficients(s: float, x: float, T: float, params: ModelParams = CRITICAL,
                                    h_step: float = 0.05, levels: int = 8, dps: int = 60) -> CoefficientReport:
    """Recover drift and variance from the conditioned Laplace transform.

    The conditioned transform over [s, s+h] is
    ``(L(x,h;λ) - L(x,h;λ + u_{T-s-h}(∞))) / P_x(survive T-s)``.  Its first two
    λ-derivatives of ``e^{λx} L`` at 0 give the first two centred moments; those
    divided by h are extrapolated to h = 0.
    """
    if params.a != 0.0:
        raise NotImplementedError("transform check implemented for the critical case")
    if not (0 <= s < T and x > 0):
        raise ValueError("need 0 <= s < T and x > 0")
    b = mpmath.mpf(params.b)
    with mpmath.workdps(dps):
        X = mpmath.mpf(x)
        R = mpmath.mpf(T) - mpmath.mpf(s)
        norm = 1 - mpmath.exp(-2 * X / (b * R))

        def centred(h):
            def g(lam):
                f1 = 2 * lam / (2 + h * b * lam)
                f2 = (2 * (R - h) * lam * b + 4) / ((R - h) * h * lam * b ** 2 + 2 * R * b)
                return mpmath.exp(lam * X) * (mpmath.exp(-X * f1) - mpmath.exp(-X * f2)) / norm
            d1 = mpmath.diff(g, 0, 1)
            d2 = mpmath.diff(g, 0, 2)
            return -d1 / h, d2 / h

        hs = [mpmath.mpf(h_step) / 2 ** k for k in range(levels)]
        pairs = [centred(h) for h in hs]
        drift = _richardson(hs, [p[0] for p in pairs])
        var = _richardson(hs, [p[1] for p in pairs])
    d_cf, v_cf = conditioned_coefficients(s, x, T, params)
    rej = rejected_variance(s, x, T, params)
    return CoefficientReport(
        drift=float(drift), variance=float(var),
        drift_closed_form=d_cf, variance_closed_form=v_cf,
        drift_rel_error=abs(float(drift) - d_cf) / abs(d_cf),
        variance_rel_error=abs(float(var) - v_cf) / abs(v_cf),
        rejected_variance=rej, rejected_rel_deviation=abs(rej - v_cf) / abs(v_cf),
        h_values=[float(h) for h in hs],
    )


def _conditioned_step(z: np.ndarray, dt: float, kappa: float, params: ModelParams,
                      rng: np.random.Generator, entrance: np.ndarray) -> np.ndarray:
    """One exact transition of the h-transformed chain, tilted by 1 - exp(-κ Z_next).

    Clusters of the compound-Poisson transition survive to T independently with
    probability q = κm/(1+κm); surviving clusters have mass Exp(m) + Exp(m'),
    doomed clusters Exp(m') with m' = m/(1+κm).  At least one must survive.
    Entries flagged ``entrance`` start from the boundary 0 with one survivor.
    """
    m = cluster_mean(dt, params)
    u = u_infinity(dt, params)
    if np.isinf(kappa):
        q, m2 = 1.0, 0.0
    else:
        q = kappa * m / (1.0 + kappa * m)
        m2 = m / (1.0 + kappa * m)
    lam_s = z * u * q
    lam_d = z * u * (1.0 - q)
    n_s = _zero_truncated_poisson(lam_s, rng)
    n_s = np.where(entrance, 1, n_s)
    n_d = np.where(entrance, 0, rng.poisson(lam_d))
    out = rng.gamma(n_s, m)
    if m2 > 0:
        tot = n_s + n_d
        out = out + np.where(tot > 0, rng.gamma(np.maximum(tot, 1), m2), 0.0)
    return out


def _zero_truncated_poisson(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Poisson(λ) conditioned to be at least 1 (λ -> 0 gives 1)."""
    lam = np.asarray(lam, dtype=float)
    out = np.ones(lam.shape, dtype=np.int64)
    big = lam >= 1.0
    if np.any(big):
        l = lam[big]
        k = rng.poisson(l)
        zero = k == 0
        while np.any(zero):
            k[zero] = rng.poisson(l[zero])
            zero = k == 0
        out[big] = k
    small = (lam > 1e-12) & ~big
    if np.any(small):
        # inverse CDF restricted to k >= 1
        l = lam[small]
        u = rng.uniform(size=l.shape) * -np.expm1(-l)
        k = np.ones(l.shape, dtype=np.int64)
        p = l * np.exp(-l)
        cdf = p.copy()
        active = u > cdf
        while np.any(active):
            k[active] += 1
            p[active] = p[active] * l[active] / k[active]
            cdf[active] += p[active]
            active = active & (u > cdf) & (k < 1000)
        out[small] = k
    return out


def sample_conditioned_paths(x: float, T: float, grid: Sequence[float], params: ModelParams = CRITICAL,
                             n_paths: int = 1, seed: SeedLike = None, method: str = "exact",
                             max_attempts: int = 1_000_000) -> np.ndarray:
    """Paths conditioned on ``Z_T > 0``; ``grid`` must lie in ``[0, T]``.

    method = "rejection": exact unconditioned paths, kept when they survive to T.
    method = "sde": Euler-Maruyama with the conditioned drift.
    method = "exact": sequential sampling of the Doob-transformed transitions
    (also handles the entrance start x = 0).
    """
    rng = make_rng(seed)
    grid = np.asarray(grid, dtype=float)
    if grid[0] < 0 or grid[-1] > T + 1e-12:
        raise ValueError("grid must lie inside [0, T]")
    full = grid if grid[-1] >= T else np.append(grid, T)
    if method == "rejection":
        if x <= 0:
            raise ValueError("rejection needs x > 0; use method='exact' for the entrance law")
        kept: list[np.ndarray] = []
        have, tried = 0, 0
        p = float(survival_probability(x, T - grid[0], params))
        while have < n_paths:
            batch = int(min(max(2 * (n_paths - have) / max(p, 1e-12), 64), 2_000_000))
            if tried + batch > max_attempts * max(n_paths, 1):
                raise RuntimeError("rejection sampling exceeded the attempt cap")
            # the terminal value is sampled first so doomed paths are cheap to discard
            paths = sample_paths_exact(x, params, full, batch, rng)
            tried += batch
            ok = paths[:, -1] > 0
            kept.append(paths[ok])
            have += int(ok.sum())
        return np.concatenate(kept)[:n_paths, : len(grid)]
    if method == "sde":
        def drift(s, z):
            d, _ = conditioned_coefficients(np.minimum(s, T - 1e-12), z, T, params)
            return d
        return sample_paths_em(x, params, full, n_paths, rng, drift=drift)[:, : len(grid)]
    if method == "exact":
        out = np.empty((n_paths, len(full)))
        out[:, 0] = x
        entrance = np.full(n_paths, x == 0)
        for k in range(1, len(full)):
            kappa = float(u_infinity(T - full[k], params)) if full[k] < T else np.inf
            out[:, k] = _conditioned_step(out[:, k - 1], full[k] - full[k - 1], kappa, params, rng, entrance)
            entrance[:] = False
        return out[:, : len(grid)]
    raise ValueError(f"unknown method {method!r}")


def sample_conditioned_mass_path(x: float, T: float, grid: Sequence[float], params: ModelParams = CRITICAL,
                                 seed: SeedLike = None, method: str = "exact") -> MassPath:
    vals = sample_conditioned_paths(x, T, grid, params, 1, seed, method)[0]
    return MassPath(grid, vals, entrance=(x == 0))


def sample_conditioned_terminal(x: float, T: float, params: ModelParams = CRITICAL, size: int = 1,
                                seed: SeedLike = None, max_attempts: int = 1_000_000) -> np.ndarray:
    """``Z_T`` given ``Z_T > 0`` by rejection of exact terminal draws."""
    rng = make_rng(seed)
    p = float(survival_probability(x, T, params))
    kept: list[np.ndarray] = []
    have, tried = 0, 0
    while have < size:
        batch = int(min(max(1.5 * (size - have) / max(p, 1e-12), 64), 5_000_000))
        tried += batch
        if tried > max_attempts * size:
            raise RuntimeError("rejection sampling exceeded the attempt cap")
        z = sample_feller_exact(x, T, params, size=batch, rng=rng)
        z = z[z > 0]
        kept.append(z)
        have += len(z)
    return np.concatenate(kept)[:size]
