"""Working response and working variance of the linearized model.

Around the current mean, ``g(y) ~ z = g(mu) + (y - mu) g'(mu)`` turns the
GLMM into ``z = X beta + U xi + e`` with ``Var(e | xi) = Gamma`` diagonal.
Gamma is kept as a vector; downstream code only ever uses ``1 / Gamma`` as
row weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LinearizationError
from .model import DesignSet, FamilyLink, ModelParams, linear_predictor


@dataclass(frozen=True)
class WorkingModel:
    z: np.ndarray
    gamma_diag: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    n_clipped: int = 0


def working_response(y, mu, family: FamilyLink) -> np.ndarray:
    mu = family.floor_mu(mu)
    y = np.asarray(y, dtype=float)
    z = family.link(mu) + (y - mu) * family.link_deriv(mu)
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise LinearizationError(f"non-finite working response at row {bad[0]}", row=int(bad[0]))
    return z


def working_variance(mu, family: FamilyLink) -> np.ndarray:
    mu = family.floor_mu(mu)
    d = family.link_deriv(mu)
    return d * d * family.variance(mu)


def linearize(y, designs: DesignSet, params: ModelParams, xi, family: FamilyLink) -> WorkingModel:
    eta_raw = linear_predictor(designs, params, xi)
    eta, n_clipped = family.clip_eta(eta_raw)
    mu = family.inverse_link(eta)
    z = working_response(y, mu, family)
    gamma = working_variance(mu, family)
    return WorkingModel(z=z, gamma_diag=gamma, mu=family.floor_mu(mu), eta=eta, n_clipped=n_clipped)
