"""Synthetic panels from the exact generative model and replicate studies.

Replicate ``k`` of cell ``c`` draws from ``SeedSequence(master, spawn_key=(c, k))``,
so any replicate can be regenerated alone and results do not depend on
execution order or on the number of worker threads.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import PanelGLMMError, SpecError
from .model import (
    FamilyLink,
    ModelParams,
    PanelLayout,
    build_designs,
    check_rho,
    family_link,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
POISSON_MEAN_LIMIT = 1e6


@dataclass(frozen=True)
class SimSpec:
    layout: PanelLayout
    true_params: ModelParams
    family: FamilyLink = field(default_factory=lambda: family_link("poisson"))
    intercept: bool = True
    r_x: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r_x < 1.0:
            raise SpecError("r_x must lie in [0, 1)")
        if self.true_params.beta.size < (1 if self.intercept else 0) or self.true_params.beta.size == 0:
            raise SpecError("beta must have at least one entry")

    @property
    def p(self) -> int:
        return self.true_params.beta.size


def gen_ar1_path(T: int, rho: float, sigma2_sq: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) path: first value from N(0, s2 / (1 - rho^2)), then the recursion."""
    check_rho(rho)
    if sigma2_sq == 0:
        return np.zeros(T)
    first = rng.standard_normal() * math.sqrt(sigma2_sq / (1.0 - rho * rho))
    innov = rng.standard_normal(T - 1) * math.sqrt(sigma2_sq)
    if T == 1:
        return np.array([first])
    rest, _ = lfilter([1.0], [1.0, -rho], innov, zi=[rho * first])
    return np.concatenate([[first], rest])


def gen_design(layout: PanelLayout, p: int, intercept: bool, r_x: float, rng) -> np.ndarray:
    n = layout.n_rows
    k = p - 1 if intercept else p
    Z = rng.standard_normal((n, k))
    if r_x > 0 and k > 0:
        common = rng.standard_normal((n, 1))
        Z = math.sqrt(r_x) * common + math.sqrt(1.0 - r_x) * Z
    cols = [np.ones((n, 1))] if intercept else []
    return np.hstack(cols + [Z])


def gen_panel(spec: SimSpec):
    """Draw (y, X, truth) with truth holding the parameters and realized effects."""
    rng = np.random.default_rng(spec.seed)
    layout, th = spec.layout, spec.true_params
    X = gen_design(layout, spec.p, spec.intercept, spec.r_x, rng)
    xi1 = rng.standard_normal(layout.n_individuals) * math.sqrt(th.sigma1_sq)
    xi2 = gen_ar1_path(layout.n_times, th.rho, th.sigma2_sq, rng)
    designs = build_designs(layout, X, intercept=0 if spec.intercept else None)
    eta = X @ th.beta + designs.u_apply(np.concatenate([xi1, xi2]))
    if spec.family.family == "poisson" and np.max(eta) > math.log(POISSON_MEAN_LIMIT):
        raise SpecError(f"poisson mean exceeds {POISSON_MEAN_LIMIT:g}; reduce beta or variances")
    mu = spec.family.inverse_link(eta)
    y = spec.family.sample(mu, rng)
    truth = {"params": th, "xi1": xi1, "xi2": xi2, "eta": eta, "mu": mu}
    return y, X, truth


def replicate_seed(master: int, cell: int, replicate: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(int(cell), int(replicate)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyCell:
    n_individuals: int
    n_times: int
    rho: float
    sigma2_sq: float


@dataclass(frozen=True)
class StudySpec:
    """Replicate study over a grid of panel sizes or AR coefficients.

    ``design`` is ``"nt_grid"``, ``"rho_grid"`` or ``"single"``. In a rho
    sweep, ``rho_sweep="fixed_marginal"`` keeps the stationary variance of
    the time effect equal to the base cell's by setting
    ``sigma2_sq = marginal * (1 - rho^2)``; ``"fixed_innovation"`` keeps
    ``sigma2_sq`` itself.
    """

    beta: tuple
    sigma1_sq: float
    sigma2_sq: float
    rho: float
    n_individuals: int = 25
    n_times: int = 10
    design: str = "single"
    nt_grid: tuple = ()
    rho_grid: tuple = ()
    rho_sweep: str = "fixed_marginal"
    n_replicates: int = 20
    family: str = "poisson"
    dispersion: float = 1.0
    intercept: bool = True
    r_x: float = 0.0
    flavor: str = "ridge"
    seed: int = 0

    def cells(self) -> list[StudyCell]:
        if self.n_replicates < 1:
            raise SpecError("n_replicates must be >= 1")
        if self.design == "single":
            return [StudyCell(self.n_individuals, self.n_times, self.rho, self.sigma2_sq)]
        if self.design == "nt_grid":
            if not self.nt_grid:
                raise SpecError("nt_grid design needs a nonempty nt_grid")
            return [StudyCell(int(N), int(T), self.rho, self.sigma2_sq) for N, T in self.nt_grid]
        if self.design == "rho_grid":
            if not self.rho_grid:
                raise SpecError("rho_grid design needs a nonempty rho_grid")
            marginal = self.sigma2_sq / (1.0 - self.rho ** 2)
            out = []
            for r in self.rho_grid:
                s2 = marginal * (1.0 - r * r) if self.rho_sweep == "fixed_marginal" else self.sigma2_sq
                out.append(StudyCell(self.n_individuals, self.n_times, float(r), float(s2)))
            return out
        raise SpecError(f"unknown study design {self.design!r}")

    def sim_spec(self, cell: StudyCell, seed: int) -> SimSpec:
        return SimSpec(
            layout=PanelLayout(cell.n_individuals, cell.n_times),
            true_params=ModelParams(np.asarray(self.beta, float), self.sigma1_sq, cell.sigma2_sq, cell.rho),
            family=family_link(self.family, dispersion=self.dispersion),
            intercept=self.intercept,
            r_x=self.r_x,
            seed=seed,
        )


def parameter_names(p: int) -> list[str]:
    return [f"beta_{j}" for j in range(p)] + ["sigma1_sq", "sigma2_sq", "rho"]


@dataclass
class StudyResult:
    spec: dict
    cells: list  # per-cell summaries
    records: list  # per-replicate records

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "study_result", "spec": self.spec,
                "cells": self.cells, "records": self.records}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def csv_rows(self) -> list[dict]:
        rows = []
        for rec in self.records:
            cell = self.cells[rec["cell"]]
            for name, true in zip(rec["parameters"], rec["truth"]):
                est = rec["estimates"].get(name) if rec["estimates"] else None
                rows.append({
                    "cell": rec["cell"],
                    "n_individuals": cell["n_individuals"],
                    "n_times": cell["n_times"],
                    "rho_true": cell["rho"],
                    "replicate": rec["replicate"],
                    "parameter": name,
                    "true": true,
                    "estimate": est,
                    "sq_error": None if est is None else (est - true) ** 2,
                    "n_iter": rec["n_iter"],
                    "converged": rec["converged"],
                })
        return rows

    def to_csv(self) -> str:
        cols = ["cell", "n_individuals", "n_times", "rho_true", "replicate", "parameter", "true",
                "estimate", "sq_error", "n_iter", "converged"]
        lines = [",".join(cols)]
        for row in self.csv_rows():
            lines.append(",".join(_csv_field(row[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _csv_field(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _fit_replicate(study: StudySpec, cell_idx: int, cell: StudyCell, rep: int, fit_config, sc_config):
    from .ridge_em import fit
    from .sc_em import fit_hd

    seed = replicate_seed(study.seed, cell_idx, rep)
    spec = study.sim_spec(cell, seed)
    names = parameter_names(spec.p)
    truth = spec.true_params.as_vector().tolist()
    rec = {"cell": cell_idx, "replicate": rep, "seed": seed, "parameters": names, "truth": truth,
           "estimates": None, "n_iter": None, "converged": False, "error": None}
    try:
        y, X, _ = gen_panel(spec)
        designs = build_designs(spec.layout, X, intercept=0 if spec.intercept else None)
        if study.flavor == "ridge":
            res = fit(y, designs, spec.family, fit_config)
        elif study.flavor == "sc":
            res = fit_hd(y, designs, spec.family, sc_config, fit_config)
        else:
            raise SpecError(f"unknown fit flavor {study.flavor!r}")
        rec["estimates"] = dict(zip(names, res.params.as_vector().tolist()))
        rec["n_iter"] = res.n_iter
        rec["converged"] = bool(res.converged)
    except (PanelGLMMError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, SpecError):
            raise
        logger.warning("cell %d replicate %d failed: %s", cell_idx, rep, exc)
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def summarize_cell(cell_idx: int, cell: StudyCell, recs: list, intercept: bool) -> dict:
    ok = [r for r in recs if r["estimates"] is not None]
    names = recs[0]["parameters"]
    truth = recs[0]["truth"]
    mse = {}
    for name, true in zip(names, truth):
        vals = np.array([r["estimates"][name] for r in ok])
        mse[name] = float(np.mean((vals - true) ** 2)) if ok else None
    beta_names = [n for n in names if n.startswith("beta_")]
    slope_names = beta_names[1:] if intercept else beta_names
    iters = [r["n_iter"] for r in ok if r["converged"]]
    return {
        "cell": cell_idx,
        "n_individuals": cell.n_individuals,
        "n_times": cell.n_times,
        "rho": cell.rho,
        "sigma2_sq": cell.sigma2_sq,
        "n_replicates": len(recs),
        "n_failed": len(recs) - len(ok),
        "failure_rate": (len(recs) - len(ok)) / len(recs),
        "convergence_rate": sum(bool(r["converged"]) for r in recs) / len(recs),
        "median_iterations": float(np.median(iters)) if iters else None,
        "mse": mse,
        "beta_mse": float(np.mean([mse[n] for n in beta_names])) if ok else None,
        "slope_mse": float(np.mean([mse[n] for n in slope_names])) if ok and slope_names else None,
    }


def run_study(study: StudySpec, fit_config=None, sc_config=None, n_jobs: int = 1) -> StudyResult:
    from .ridge_em import FitConfig
    from .sc_em import SCConfig

    fit_config = fit_config or FitConfig()
    sc_config = sc_config or SCConfig()
    cells = study.cells()
    jobs = [(c, cell, k) for c, cell in enumerate(cells) for k in range(study.n_replicates)]
    run = lambda job: _fit_replicate(study, job[0], job[1], job[2], fit_config, sc_config)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    if all(r["estimates"] is None for r in records):
        logger.error("every replicate failed")
    summaries = [
        summarize_cell(c, cell, [r for r in records if r["cell"] == c], study.intercept)
        for c, cell in enumerate(cells)
    ]
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in study.__dict__.items()}
    spec_dict["nt_grid"] = [list(x) for x in study.nt_grid]
    return StudyResult(spec=spec_dict, cells=summaries, records=records)
