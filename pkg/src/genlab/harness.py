"""Experiment orchestration: configuration, dispatch, run records.

A run is fully determined by its configuration (command, parameters, options,
master seed).  ``run_experiment`` dispatches to the module operations and
returns a RunRecord whose content hash covers the configuration and every
output, so rerunning a configuration reproduces the same hash.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import tomli
from scipy import stats
from pydantic import BaseModel, ConfigDict, Field

from . import acceptance
from .coalescent import dual_moment_estimate
from .conditioned import (Report, _p_report, _z_report, backbone_pair_oracle, kallenberg_decompose_check,
                          ky_rescale_and_test, moran_pair_statistic, sample_backbone_tree, sample_q_process_trees,
                          yaglom_terminal)
from .coxcluster import compose_cox_state, sample_cox_masses
from .forward import pair_mass_profile, simulate_gw_genealogy, simulate_immigration_genealogy, simulate_moran_given_mass
from .gof import Moments, ci_compare, ks_test
from .massdiff import ModelParams, default_grid, sample_feller_exact, sample_path_exact, u_infinity
from .seeding import spawn
from .spatial import fk_pair_oracle, simulate_spatial_genealogy, spatial_site_masses
from .umspace import Polynomial, truncated_pair_mass

COMMANDS = ("simulate", "verify-duality", "cox", "yaglom", "backbone", "kallenberg", "spatial", "accept")

# every numeric default, per command
DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {"model": "feller", "N": 400, "K": 500, "x0": 1.0, "t": 1.0, "steps": 512},
    "verify-duality": {"degree": 2, "N": 400, "x0": 1.0, "t": 1.0, "s": [0.25, 0.5, 1.0],
                       "dual_replicates": 100_000},
    "cox": {"x0": 1.0, "t": 2.0, "h": 1.0, "bins": 12},
    "yaglom": {"x0": 1.0, "T": 200.0, "t_grid": [128.0, 256.0, 512.0], "family": "feller-conditioned",
               "normalization": "t", "steps": 256},
    "backbone": {"t": 1.0, "K": 20, "cut": 0.01, "steps": 256},
    "kallenberg": {"x0": 1.0, "t": 1.0, "trees": 500},
    "spatial": {"sites": 4, "N": 400, "t": 1.0, "init": 1.0},
    "accept": {"criteria": []},
}
DEFAULT_REPLICATES = {"simulate": 1, "verify-duality": 2000, "cox": 10_000, "yaglom": 10_000, "backbone": 2000,
                      "kallenberg": 10_000, "spatial": 10_000, "accept": 1}


class ParamsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    b: float = Field(1.0, gt=0)
    a: float = 0.0
    c: float = Field(0.0, ge=0)
    T: Optional[float] = Field(None, gt=0)
    cmig: float = Field(0.0, ge=0)
    kernel: Literal["nn", "uniform"] = "nn"

    def to_params(self) -> ModelParams:
        return ModelParams(**self.model_dump())


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: Literal["simulate", "verify-duality", "cox", "yaglom", "backbone", "kallenberg", "spatial", "accept"]
    seed: int = Field(0, ge=0, lt=2**64)
    replicates: Optional[int] = Field(None, ge=1)
    params: ParamsModel = Field(default_factory=ParamsModel)
    options: dict[str, Any] = Field(default_factory=dict)

    def resolved(self) -> "ExperimentConfig":
        """Copy with command defaults filled in."""
        opts = dict(DEFAULTS[self.command])
        unknown = set(self.options) - set(opts)
        if unknown:
            raise ValueError(f"unknown options for {self.command}: {sorted(unknown)}")
        opts.update(self.options)
        reps = self.replicates if self.replicates is not None else DEFAULT_REPLICATES[self.command]
        return self.model_copy(update={"options": opts, "replicates": reps})


class RunRecord(BaseModel):
    config: dict
    hash: str
    passed: bool
    reports: list[dict]
    artifacts: dict[str, str]
    started: str
    finished: str
    runtime: float

    def filename(self) -> str:
        return f"{self.config['command']}-{self.hash[:16]}.json"

    def save(self, out_dir: str | Path) -> Path:
        """Write the record under ``out_dir/runs/`` and the artifacts next to it."""
        out = Path(out_dir)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        path = out / "runs" / self.filename()
        path.write_text(self.model_dump_json(indent=2))
        for name, text in self.artifacts.items():
            (out / name).write_text(text)
        return path


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, default=str)


def content_hash(config: dict, reports: list[dict], artifacts: dict[str, str]) -> str:
    """Git-style blob hash of the canonical JSON of configuration and outputs."""
    body = _canonical({"config": config, "reports": reports, "artifacts": artifacts}).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read a TOML config; keyword overrides (e.g. from the CLI) win."""
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**data)


def _stat_csv(rows: list[tuple[str, float, float]]) -> str:
    lines = ["stat,value,se"]
    for name, v, se in rows:
        lines.append(f"{name},{format(float(v), '.17g')},{format(float(se), '.17g')}")
    return "\n".join(lines) + "\n"


# command bodies: (reports, artifacts)
def _simulate(cfg: ExperimentConfig, params: ModelParams):
    """One genealogy; the moran model also writes the mass path that drives it."""
    o = cfg.options
    r_tree, r_path = spawn(cfg.seed, 2)
    model = o["model"]
    artifacts = {}
    if model == "feller":
        tree = simulate_gw_genealogy(o["N"], o["x0"], o["t"], params, r_tree)
    elif model == "immigration":
        tree = simulate_immigration_genealogy(o["N"], o["t"], params, o["x0"], seed=r_tree)
    elif model == "moran":
        path = sample_path_exact(o["x0"], params, default_grid(o["t"], o["steps"]), r_path)
        tree = simulate_moran_given_mass(path, o["K"], params, r_tree, immigration=params.c > 0)
        artifacts["mass_path.csv"] = path.to_csv()
    else:
        raise ValueError(f"unknown model {model!r}; use feller, immigration or moran")
    reports = [Report("total mass", _feller_mean(o["x0"], o["t"], params), tree.total_mass, 0.0, True),
               Report("leaves", math.nan, float(tree.n_leaves), 0.0, True)]
    return reports, {"tree.json": tree.to_json(), **artifacts}


def _verify_duality(cfg: ExperimentConfig, params: ModelParams):
    """Forward particle estimates against the dual: the pair profile for degree 2,
    the n-th mass moment otherwise."""
    o = cfg.options
    n = int(o["degree"])
    if n < 1:
        raise ValueError("degree must be at least 1")
    polys = ([(f"pair profile s={s:g}", Polynomial(2, lambda d, s=s: (d[..., 0, 1] < 2.0 * s).astype(float)),
               lambda tree, s=s: pair_mass_profile(tree, s)) for s in o["s"]] if n == 2 else [])
    polys.append((f"mass moment n={n}", Polynomial.constant(1.0, n), lambda tree: tree.total_mass ** n))
    r_dual, r_fwd = spawn(cfg.seed, 2)
    acc = [Moments() for _ in polys]
    for rng in spawn(r_fwd, cfg.replicates):
        tree = simulate_gw_genealogy(o["N"], o["x0"], o["t"], params, rng)
        acc = [m.merge(Moments.of([f(tree)])) for m, (_, _, f) in zip(acc, polys)]
    out, rows, reports = [], [], []
    for m, (name, poly, _), rng in zip(acc, polys, spawn(r_dual, len(polys))):
        d = dual_moment_estimate(o["x0"], poly, o["t"], params, o["dual_replicates"], rng)
        z = ci_compare(m.mean, m.se, d.estimate, d.se)
        out.append({"statistic": name, "forward": m.mean, "dual": d.estimate, "se": math.hypot(m.se, d.se),
                    "zscore": z})
        rows += [(f"forward {name}", m.mean, m.se), (f"dual {name}", d.estimate, d.se)]
        reports.append(Report(f"{name} forward vs dual", d.estimate, m.mean, math.hypot(m.se, d.se), abs(z) <= 3.0))
    return reports, {"duality.json": _canonical(out), "duality.csv": _stat_csv(rows)}


def _feller_mean(x0: float, t: float, params: ModelParams) -> float:
    g = math.exp(params.a * t)
    return x0 * g + params.c * (t if params.a == 0 else (g - 1.0) / params.a)


def _cox(cfg: ExperimentConfig, params: ModelParams):
    o = cfg.options
    r_tree, r_mass, r_ref = spawn(cfg.seed, 3)
    tree = compose_cox_state(o["x0"], o["t"], o["h"], params, r_tree)
    mass, counts, y = sample_cox_masses(o["x0"], o["t"], o["h"], cfg.replicates, params, r_mass)
    ref = sample_feller_exact(o["x0"], o["t"], params, size=cfg.replicates, rng=r_ref)
    _, p = ks_test(mass, ref)
    n = cfg.replicates
    rows = [("mass_mean", mass.mean(), mass.std(ddof=1) / math.sqrt(n)),
            ("families_mean", counts.mean(), counts.std(ddof=1) / math.sqrt(n))]
    hist = np.bincount(np.minimum(counts, o["bins"] - 1), minlength=o["bins"]) / n
    rows += [(f"families_pmf_{k}", v, math.sqrt(v * (1 - v) / n)) for k, v in enumerate(hist)]
    reports = [_p_report("cox mass vs exact transition KS", p),
               _z_report("mean family count", _feller_mean(o["x0"], o["t"] - o["h"], params)
                         * float(u_infinity(o["h"], params)), counts.mean(), counts.std(ddof=1) / math.sqrt(n))]
    return reports, {"cox_tree.json": tree.to_json(), "cox_summary.csv": _stat_csv(rows)}


def _yaglom(cfg: ExperimentConfig, params: ModelParams):
    o = cfg.options
    r_term, r_ky = spawn(cfg.seed, 2)
    # Bonferroni over every test of the run so the whole run is held at level 0.01
    per_t = 5 if o["family"] == "feller-conditioned" else 4
    alpha = 0.01 / (1 + per_t * len(o["t_grid"]))
    k = float(stats.norm.isf(alpha / 2))
    reports = [yaglom_terminal(o["T"], o["x0"], params, cfg.replicates, r_term, o["normalization"], alpha)]
    reports += ky_rescale_and_test(o["family"], o["t_grid"], params, min(cfg.replicates, 4000), r_ky, o["x0"],
                                   o["steps"], o["normalization"], k=k, alpha=alpha)
    return reports, {}


def _backbone(cfg: ExperimentConfig, params: ModelParams):
    o = cfg.options
    t, n = o["t"], cfg.replicates
    r_b, r_q = spawn(cfg.seed, 2)
    bb = [sample_backbone_tree(t, params, o["cut"] * t, r_b, family_cut=o["cut"]) for _ in range(n)]
    qq = sample_q_process_trees(0.0, t, n, o["K"], params, r_q, steps=o["steps"])
    mb = np.array([x.total_mass for x in bb])
    mq = np.array([x.total_mass for x in qq])
    _, p = ks_test(mb, mq)
    pb = np.array([truncated_pair_mass(x, t / 2) for x in bb])
    pq = np.array([moran_pair_statistic(x, t / 2) for x in qq])
    se_b, se_q = pb.std(ddof=1) / math.sqrt(n), pq.std(ddof=1) / math.sqrt(n)
    reports = [_p_report("backbone vs Q-process mass KS", p),
               _z_report("backbone mass mean", params.b * t, mb.mean(), mb.std(ddof=1) / math.sqrt(n)),
               Report("truncated pair mass backbone vs Q-process", float(pq.mean()), float(pb.mean()),
                      math.hypot(se_b, se_q), abs(ci_compare(pb.mean(), se_b, pq.mean(), se_q)) <= 3.0),
               _z_report("backbone pair mass closed form", float(backbone_pair_oracle(t / 2, t, params)),
                         pb.mean(), se_b)]
    return reports, {"backbone_tree.json": bb[0].to_json()}


def _kallenberg(cfg: ExperimentConfig, params: ModelParams):
    o = cfg.options
    return kallenberg_decompose_check(o["x0"], o["t"], params, cfg.replicates, cfg.seed, n_trees=o["trees"]), {}


def _spatial(cfg: ExperimentConfig, params: ModelParams):
    o = cfg.options
    S = int(o["sites"])
    init = o["init"] if isinstance(o["init"], list) else [float(o["init"])] * S
    if len(init) != S:
        raise ValueError("init must have one entry per site")
    r_tree, r_mass = spawn(cfg.seed, 2)
    tree = simulate_spatial_genealogy(o["N"], init, o["t"], params, r_tree)
    Y = spatial_site_masses(o["N"], init, o["t"], params, cfg.replicates, r_mass)
    oracle = fk_pair_oracle(init, o["t"], params)
    n = cfg.replicates
    reports = []
    for i in range(S):
        for j in range(i, S):
            prod = Y[:, i] * Y[:, j]
            reports.append(_z_report(f"E[y{i} y{j}]", float(oracle[i, j]), prod.mean(),
                                     prod.std(ddof=1) / math.sqrt(n)))
    return reports, {"spatial_tree.json": tree.to_json(), "site_mass.csv": tree.site_mass_csv()}


def _accept(cfg: ExperimentConfig, params: ModelParams):
    only = cfg.options.get("criteria") or None
    crit = acceptance.run_all(cfg.seed, only)
    reports = [Report(f"criterion {c.number}: {c.title}", math.nan, math.nan, 0.0, c.passed) for c in crit]
    lines = "\n".join(c.line() for c in crit) + "\n"
    detail = _canonical([c.to_dict() for c in crit])
    return reports, {"acceptance.txt": lines, "acceptance.json": detail}


DISPATCH = {"simulate": _simulate, "verify-duality": _verify_duality, "cox": _cox, "yaglom": _yaglom,
            "backbone": _backbone, "kallenberg": _kallenberg, "spatial": _spatial, "accept": _accept}


def run_experiment(config: ExperimentConfig | dict) -> RunRecord:
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig(**config)
    cfg = cfg.resolved()
    params = cfg.params.to_params()
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    reports, artifacts = DISPATCH[cfg.command](cfg, params)
    runtime = time.perf_counter() - t0
    rep_dicts = [r.to_dict() for r in reports]
    if cfg.command == "accept":
        # criterion runtimes vary between runs; keep them out of the hashed content
        detail = json.loads(artifacts["acceptance.json"])
        for d in detail:
            d.pop("runtime", None)
            for r in d["reports"]:
                if r["statistic"].endswith("runtime seconds"):
                    r["estimate"] = None
        artifacts["acceptance.json"] = _canonical(detail)
        artifacts["acceptance.txt"] = "\n".join(
            line.rsplit(" (", 1)[0] for line in artifacts["acceptance.txt"].splitlines()) + "\n"
    conf = cfg.model_dump()
    h = content_hash(conf, rep_dicts, artifacts)
    return RunRecord(config=conf, hash=h, passed=all(r["pass"] for r in rep_dicts), reports=rep_dicts,
                     artifacts=artifacts, started=started, finished=datetime.now(timezone.utc).isoformat(),
                     runtime=runtime)
