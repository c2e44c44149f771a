"""Dataset files, run configurations and JSON result documents.

Everything the command line does goes through these functions, so any CLI
scenario can be replayed from Python.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import jsonschema
import numpy as np
import pandas as pd

from .errors import ConfigError, DataContractError
from .model import DesignSet, FamilyLink, ModelParams, PanelLayout, build_designs, family_link
from .ridge_em import FitConfig, FitResult
from .sc_em import CVSelection, SCConfig
from .simulate import FORMAT_VERSION, SimSpec, StudySpec, _jsonable

REQUIRED_COLUMNS = ("id", "time", "y")

# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}

FIT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "max_outer_iter": _COUNT,
        "inner_em_iter": _COUNT,
        "tol": _POS,
        "atol": {"type": "number", "minimum": 0},
        "rho_grid_size": {"type": "integer", "minimum": 3},
        "rho_tol": _POS,
        "divergence_window": _COUNT,
        "beta_step": {"enum": ["ecme", "em"]},
        "boundary_ratio": {"type": "number", "minimum": 0},
    },
}

SC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "s": {"type": "number", "minimum": 0, "maximum": 1},
        "l": {"type": "number", "minimum": 1},
        "n_components": _COUNT,
        "cv_folds": {"type": "integer", "minimum": 2},
        "s_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "l_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 1}},
        "k_grid": {"type": "array", "minItems": 1, "items": _COUNT},
        "n_restarts": _COUNT,
        "max_ascent_iter": _COUNT,
        "ascent_tol": _POS,
    },
}

_MODEL_PROPS = {
    "format_version": {"const": FORMAT_VERSION},
    "family": {"enum": ["poisson", "gaussian"]},
    "link": {"enum": ["log", "identity"]},
    "dispersion": _POS,
    "intercept": {"type": "boolean"},
    "seed": _SEED,
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version"],
    "properties": {
        **_MODEL_PROPS,
        "penalize_all": {"type": "boolean"},
        "penalty_mask": {"type": ["array", "null"], "items": {"enum": [0, 1]}},
        "fit": FIT_SCHEMA,
        "sc": SC_SCHEMA,
    },
}

SIM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "n_individuals", "n_times", "beta", "sigma1_sq", "sigma2_sq", "rho"],
    "properties": {
        **_MODEL_PROPS,
        "n_individuals": {"type": "integer", "minimum": 2},
        "n_times": {"type": "integer", "minimum": 2},
        "beta": {"type": "array", "minItems": 1, "items": _NUM},
        "sigma1_sq": {"type": "number", "minimum": 0},
        "sigma2_sq": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
        "r_x": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
}

STUDY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "beta", "sigma1_sq", "sigma2_sq", "rho"],
    "properties": {
        **_MODEL_PROPS,
        "beta": {"type": "array", "minItems": 1, "items": _NUM},
        "sigma1_sq": {"type": "number", "minimum": 0},
        "sigma2_sq": {"type": "number", "minimum": 0},
        "rho": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1},
        "n_individuals": {"type": "integer", "minimum": 2},
        "n_times": {"type": "integer", "minimum": 2},
        "design": {"enum": ["single", "nt_grid", "rho_grid"]},
        "nt_grid": {
            "type": "array",
            "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "integer", "minimum": 2}},
        },
        "rho_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": -1, "exclusiveMaximum": 1}},
        "rho_sweep": {"enum": ["fixed_marginal", "fixed_innovation"]},
        "n_replicates": _COUNT,
        "r_x": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "flavor": {"enum": ["ridge", "sc"]},
        "fit": FIT_SCHEMA,
        "sc": SC_SCHEMA,
    },
}


def validate_config(doc, schema) -> dict:
    """Raise ConfigError unless ``doc`` satisfies ``schema``; returns ``doc``."""
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    return doc


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    family: FamilyLink
    intercept: bool
    fit: FitConfig
    sc: SCConfig
    seed: int


def run_config(doc: dict, seed: int | None = None) -> RunConfig:
    """Validated RunConfig from a JSON document; ``seed`` overrides the document's."""
    validate_config(doc, RUN_SCHEMA)
    try:
        fam = family_link(doc.get("family", "poisson"), doc.get("link"), doc.get("dispersion", 1.0))
        seed = int(doc.get("seed", 0) if seed is None else seed)
        mask = doc.get("penalty_mask")
        fit = FitConfig(**doc.get("fit", {}), penalize_all=doc.get("penalize_all", False),
                        penalty_mask=None if mask is None else tuple(float(m) for m in mask))
        sc = SCConfig(**doc.get("sc", {}), seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(family=fam, intercept=doc.get("intercept", True), fit=fit, sc=sc, seed=seed)


def sim_spec(doc: dict, seed: int | None = None) -> SimSpec:
    validate_config(doc, SIM_SCHEMA)
    try:
        return SimSpec(
            layout=PanelLayout(doc["n_individuals"], doc["n_times"]),
            true_params=ModelParams(np.asarray(doc["beta"], float), doc["sigma1_sq"], doc["sigma2_sq"], doc["rho"]),
            family=family_link(doc.get("family", "poisson"), doc.get("link"), doc.get("dispersion", 1.0)),
            intercept=doc.get("intercept", True),
            r_x=doc.get("r_x", 0.0),
            seed=int(doc.get("seed", 0) if seed is None else seed),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def study_spec(doc: dict, seed: int | None = None):
    """(StudySpec, FitConfig, SCConfig) from a validated study document."""
    validate_config(doc, STUDY_SCHEMA)
    kw = {k: v for k, v in doc.items() if k not in ("format_version", "fit", "sc", "link")}
    kw["beta"] = tuple(kw["beta"])
    kw["nt_grid"] = tuple(tuple(x) for x in kw.get("nt_grid", ()))
    kw["rho_grid"] = tuple(kw.get("rho_grid", ()))
    if seed is not None:
        kw["seed"] = int(seed)
    try:
        family_link(doc.get("family", "poisson"), doc.get("link"), doc.get("dispersion", 1.0))
        study = StudySpec(**kw)
        study.cells()
        fit = FitConfig(**doc.get("fit", {}))
        sc = SCConfig(**doc.get("sc", {}), seed=study.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return study, fit, sc


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


@dataclass
class PanelData:
    y: np.ndarray
    X: np.ndarray  # features only, rows in canonical order
    ids: list
    feature_names: list
    layout: PanelLayout

    def designs(self, intercept=True) -> DesignSet:
        if intercept:
            X = np.column_stack([np.ones(self.layout.n_rows), self.X])
            return build_designs(self.layout, X, intercept=0)
        return build_designs(self.layout, self.X, intercept=None)

    def column_names(self, intercept=True) -> list:
        return (["(intercept)"] if intercept else []) + list(self.feature_names)


def _id_order(ids):
    try:
        keys = [int(i) for i in ids]
    except ValueError:
        return sorted(ids)
    return [i for _, i in sorted(zip(keys, ids))]


def read_panel_frame(df: pd.DataFrame) -> PanelData:
    """Check the balanced-panel contract and return rows in (id, time) order."""
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise DataContractError(f"missing required columns: {', '.join(missing)}")
    features = [c for c in df.columns if c not in REQUIRED_COLUMNS]
    df = df.copy()
    df["id"] = df["id"].astype(str).str.strip()
    if (df["id"] == "").any() or df["id"].isin(["nan", "NaN"]).any():
        raise DataContractError("empty id label")
    for col in ["time", "y"] + features:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna() | ~np.isfinite(vals.to_numpy(dtype=float))
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataContractError(f"column {col!r}: missing or non-numeric value at data row {i + 1}")
        df[col] = vals.astype(float)
    t = df["time"].to_numpy()
    if np.any(t != np.round(t)) or np.any(t < 1):
        raise DataContractError("time must hold integers 1..T")
    df["time"] = df["time"].astype(int)
    dup = df.duplicated(["id", "time"])
    if dup.any():
        r = df[dup].iloc[0]
        raise DataContractError(f"duplicate row for (id={r['id']}, time={r['time']})")

    ids = _id_order(df["id"].unique().tolist())
    T = int(df["time"].max())
    present = set(zip(df["id"], df["time"]))
    for i in ids:
        for tt in range(1, T + 1):
            if (i, tt) not in present:
                raise DataContractError(f"unbalanced panel: missing (id={i}, time={tt})")
    if len(ids) < 2 or T < 2:
        raise DataContractError("need at least 2 individuals and 2 time points")

    rank = {i: k for k, i in enumerate(ids)}
    order = np.lexsort((df["time"].to_numpy(), df["id"].map(rank).to_numpy()))
    df = df.iloc[order]
    return PanelData(
        y=df["y"].to_numpy(dtype=float),
        X=df[features].to_numpy(dtype=float).reshape(len(df), len(features)),
        ids=ids,
        feature_names=features,
        layout=PanelLayout(len(ids), T),
    )


def read_panel_csv(path) -> PanelData:
    try:
        df = pd.read_csv(path, dtype={"id": str}, keep_default_na=True, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataContractError(f"cannot read dataset {path}: {exc}") from exc
    return read_panel_frame(df)


def panel_csv_text(y, X, layout: PanelLayout, feature_names=None) -> str:
    """Dataset file for rows in canonical order; ids and times start at 1."""
    X = np.asarray(X, dtype=float)
    names = feature_names or [f"x{j + 1}" for j in range(X.shape[1])]
    df = pd.DataFrame(X, columns=names)
    df.insert(0, "y", np.asarray(y, dtype=float))
    df.insert(0, "time", np.tile(np.arange(1, layout.n_times + 1), layout.n_individuals))
    df.insert(0, "id", np.repeat(np.arange(1, layout.n_individuals + 1), layout.n_times))
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Result documents
# ---------------------------------------------------------------------------


def dumps(doc) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def fit_document(result: FitResult, data: PanelData, cfg: RunConfig, kind="fit") -> dict:
    names = data.column_names(cfg.intercept)
    th = result.params
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "model": cfg.family.to_dict(),
        "seed": cfg.seed,
        "n_individuals": data.layout.n_individuals,
        "n_times": data.layout.n_times,
        "columns": names,
        "params": {
            "beta": dict(zip(names, th.beta.tolist())),
            "sigma1_sq": th.sigma1_sq,
            "sigma2_sq": th.sigma2_sq,
            "rho": th.rho,
        },
        "xi": {
            "individual": dict(zip(data.ids, result.xi_hat.xi1.tolist())),
            "time": result.xi_hat.xi2.tolist(),
        },
        "converged": bool(result.converged),
        "n_iter": int(result.n_iter),
        "deviance": result.deviance_path[-1] if result.deviance_path else None,
        "n_clipped": int(result.n_clipped),
        "trace": [_trace_entry(t, names) for t in result.trace],
    }
    if kind == "fit":
        doc.update(lambda_grid=list(result.lambda_grid), lambda_path=result.lambda_path,
                   gcv_path=result.gcv_path, gcv_curves=result.gcv_curves)
    return doc


def _trace_entry(t, names):
    out = {k: v for k, v in t.items() if k != "beta"}
    out["beta"] = dict(zip(names, np.asarray(t["beta"]).tolist()))
    return out


def fit_hd_document(result: FitResult, data: PanelData, cfg: RunConfig, selection: CVSelection) -> dict:
    doc = fit_document(result, data, cfg, kind="fit_hd")
    ex = result.extra
    feats = list(data.feature_names)
    doc["components"] = {
        "weights": np.asarray(ex["component_weights"]).tolist(),
        "variable_loadings": [dict(zip(feats, row)) for row in np.asarray(ex["variable_loadings"]).tolist()],
        "coefficients": np.asarray(ex["component_coefficients"]).tolist(),
        "basis_rank": ex["basis_rank"],
    }
    doc["selection"] = {"s": selection.s, "l": selection.l, "n_components": selection.n_components}
    doc["cv_table"] = selection.table
    return doc


def truth_document(spec: SimSpec, truth: dict) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "truth",
        "seed": spec.seed,
        "n_individuals": spec.layout.n_individuals,
        "n_times": spec.layout.n_times,
        "model": spec.family.to_dict(),
        "intercept": spec.intercept,
        "params": spec.true_params.to_dict(),
        "xi": {"individual": truth["xi1"], "time": truth["xi2"]},
    }
