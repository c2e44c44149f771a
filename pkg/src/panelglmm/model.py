"""Panel layout, parameters, family/link pairs and random-effect covariances.

Rows of every n-vector follow the layout contract: individual outer, time
inner, so row ``i * T + t`` holds individual ``i`` at time ``t`` (0-based).
With that order ``U1 = I_N kron 1_T`` and ``U2 = 1_N kron I_T`` exactly.

``sigma2_sq`` is always the AR(1) *innovation* variance. The stationary
marginal variance of the time effect is ``sigma2_sq / (1 - rho**2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import DimensionError, StationarityError

logger = logging.getLogger(__name__)

RHO_MARGIN = 1e-4
ETA_CLIP = 30.0
MU_FLOOR = 1e-8


@dataclass(frozen=True)
class PanelLayout:
    n_individuals: int
    n_times: int

    def __post_init__(self):
        if self.n_individuals < 2 or self.n_times < 2:
            raise DimensionError(
                f"balanced panel needs N >= 2 and T >= 2, got N={self.n_individuals}, T={self.n_times}"
            )

    @property
    def n_rows(self) -> int:
        return self.n_individuals * self.n_times

    @property
    def n_random(self) -> int:
        return self.n_individuals + self.n_times

    def row_index(self, individual: int, time: int) -> int:
        """Zero-based row of (individual, time), both zero-based: individuals outer, time inner."""
        return individual * self.n_times + time


@dataclass(frozen=True)
class ModelParams:
    beta: np.ndarray
    sigma1_sq: float
    sigma2_sq: float
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).copy())
        self.beta.setflags(write=False)
        if self.sigma1_sq < 0 or self.sigma2_sq < 0:
            raise ValueError("variance components must be non-negative")
        check_rho(self.rho)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.sigma1_sq, self.sigma2_sq, self.rho]])

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "sigma1_sq": float(self.sigma1_sq),
            "sigma2_sq": float(self.sigma2_sq),
            "rho": float(self.rho),
        }

    def replace(self, **changes) -> "ModelParams":
        kw = dict(beta=self.beta, sigma1_sq=self.sigma1_sq, sigma2_sq=self.sigma2_sq, rho=self.rho)
        kw.update(changes)
        return ModelParams(**kw)


def check_rho(rho: float) -> None:
    if not np.isfinite(rho) or abs(rho) > 1.0 - RHO_MARGIN + 1e-15:
        raise StationarityError(f"|rho| must be <= {1 - RHO_MARGIN}, got {rho}")


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FamilyLink:
    """Exponential family bundled with its link.

    Subclasses supply ``link``, ``link_deriv``, ``inverse_link``, ``variance``,
    ``deviance`` and ``sample``.
    """

    family: str = field(init=False)
    link_name: str = field(init=False)
    dispersion: float = 1.0

    def clip_eta(self, eta):
        return np.asarray(eta, dtype=float), 0

    def mean(self, eta):
        return self.inverse_link(self.clip_eta(eta)[0])

    def floor_mu(self, mu):
        return np.asarray(mu, dtype=float)

    def to_dict(self) -> dict:
        return {"family": self.family, "link": self.link_name, "dispersion": float(self.dispersion)}


@dataclass(frozen=True)
class PoissonLog(FamilyLink):
    family: str = field(default="poisson", init=False)
    link_name: str = field(default="log", init=False)

    def clip_eta(self, eta):
        eta = np.asarray(eta, dtype=float)
        n_clipped = int(np.count_nonzero(np.abs(eta) > ETA_CLIP))
        if n_clipped:
            logger.warning("clipped %d linear predictor values to [-%g, %g]", n_clipped, ETA_CLIP, ETA_CLIP)
            eta = np.clip(eta, -ETA_CLIP, ETA_CLIP)
        return eta, n_clipped

    def floor_mu(self, mu):
        return np.maximum(np.asarray(mu, dtype=float), MU_FLOOR)

    def link(self, mu):
        return np.log(mu)

    def link_deriv(self, mu):
        return 1.0 / mu

    def inverse_link(self, eta):
        return np.exp(eta)

    def variance(self, mu):
        return np.asarray(mu, dtype=float)

    def deviance(self, y, mu) -> float:
        y = np.asarray(y, dtype=float)
        mu = self.floor_mu(mu)
        return float(2.0 * np.sum(xlogy(y, y) - xlogy(y, mu) - (y - mu)))

    def loglik(self, y, mu) -> float:
        y = np.asarray(y, dtype=float)
        mu = self.floor_mu(mu)
        return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1.0)))

    def sample(self, mu, rng):
        return rng.poisson(mu).astype(float)

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise ValueError("poisson response must be non-negative integers")


@dataclass(frozen=True)
class GaussianIdentity(FamilyLink):
    family: str = field(default="gaussian", init=False)
    link_name: str = field(default="identity", init=False)

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def link_deriv(self, mu):
        return np.ones_like(np.asarray(mu, dtype=float))

    def inverse_link(self, eta):
        return np.asarray(eta, dtype=float)

    def variance(self, mu):
        return np.full_like(np.asarray(mu, dtype=float), self.dispersion)

    def deviance(self, y, mu) -> float:
        r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
        return float(np.sum(r * r) / self.dispersion)

    def loglik(self, y, mu) -> float:
        r = np.asarray(y, dtype=float) - np.asarray(mu, dtype=float)
        n = r.size
        return float(-0.5 * n * np.log(2 * np.pi * self.dispersion) - 0.5 * np.sum(r * r) / self.dispersion)

    def sample(self, mu, rng):
        return mu + np.sqrt(self.dispersion) * rng.standard_normal(np.shape(mu))

    def check_response(self, y):
        if not np.all(np.isfinite(y)):
            raise ValueError("gaussian response must be finite")


def family_link(family: str = "poisson", link: str | None = None, dispersion: float = 1.0) -> FamilyLink:
    family = family.lower()
    if family == "poisson" and link in (None, "log"):
        return PoissonLog(dispersion=1.0)
    if family == "gaussian" and link in (None, "identity"):
        if not dispersion > 0:
            raise ValueError("gaussian dispersion must be positive")
        return GaussianIdentity(dispersion=float(dispersion))
    raise ValueError(f"unsupported family/link pair: {family}/{link}")


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DesignSet:
    """Fixed-effect design plus the implicit random-effect incidences.

    ``U1``, ``U2`` and ``U`` are materialized on request only; the fitting
    code goes through :meth:`u_apply`, :meth:`ut_apply` and :meth:`utwu`,
    which use the Kronecker structure directly.
    """

    layout: PanelLayout
    X: np.ndarray
    intercept: int | None = None

    @property
    def n(self) -> int:
        return self.layout.n_rows

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.layout.n_random

    @cached_property
    def U1(self) -> np.ndarray:
        return np.kron(np.eye(self.layout.n_individuals), np.ones((self.layout.n_times, 1)))

    @cached_property
    def U2(self) -> np.ndarray:
        return np.kron(np.ones((self.layout.n_individuals, 1)), np.eye(self.layout.n_times))

    @cached_property
    def U(self) -> np.ndarray:
        return np.hstack([self.U1, self.U2])

    def u_apply(self, xi) -> np.ndarray:
        """U @ xi for a (q,) vector or (q, k) matrix."""
        N, T = self.layout.n_individuals, self.layout.n_times
        xi = np.asarray(xi, dtype=float)
        xi1, xi2 = xi[:N], xi[N:]
        if xi.ndim == 1:
            return (xi1[:, None] + xi2[None, :]).reshape(N * T)
        return (xi1[:, None, :] + xi2[None, :, :]).reshape(N * T, -1)

    def ut_apply(self, v) -> np.ndarray:
        """U.T @ v for an (n,) vector or (n, k) matrix."""
        N, T = self.layout.n_individuals, self.layout.n_times
        v = np.asarray(v, dtype=float)
        cube = v.reshape((N, T) + v.shape[1:])
        return np.concatenate([cube.sum(axis=1), cube.sum(axis=0)], axis=0)

    def utwu(self, w) -> np.ndarray:
        """U.T @ diag(w) @ U as a dense (q, q) matrix."""
        N, T = self.layout.n_individuals, self.layout.n_times
        W = np.asarray(w, dtype=float).reshape(N, T)
        out = np.zeros((N + T, N + T))
        out[np.arange(N), np.arange(N)] = W.sum(axis=1)
        out[N + np.arange(T), N + np.arange(T)] = W.sum(axis=0)
        out[:N, N:] = W
        out[N:, :N] = W.T
        return out

    def diag_ucu(self, C) -> np.ndarray:
        """diag(U @ C @ U.T) without forming the n x n product."""
        N, T = self.layout.n_individuals, self.layout.n_times
        d1 = np.diag(C)[:N]
        d2 = np.diag(C)[N:]
        cross = C[:N, N:]
        return (d1[:, None] + d2[None, :] + 2.0 * cross).reshape(N * T)


def build_designs(layout: PanelLayout, X_raw, intercept: int | None = None) -> DesignSet:
    X = np.array(X_raw, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != layout.n_rows:
        raise DimensionError(f"X has {X.shape[0] if X.ndim else 0} rows, layout needs {layout.n_rows}")
    if intercept is not None and not 0 <= intercept < X.shape[1]:
        raise DimensionError(f"intercept column {intercept} out of range")
    X.setflags(write=False)
    return DesignSet(layout=layout, X=X, intercept=intercept)


def default_penalty_mask(designs: DesignSet, penalize_all: bool = False) -> np.ndarray:
    mask = np.ones(designs.p)
    if designs.intercept is not None and not penalize_all:
        mask[designs.intercept] = 0.0
    return mask


# ---------------------------------------------------------------------------
# Random effects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomEffectState:
    xi1: np.ndarray
    xi2: np.ndarray

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.xi1, self.xi2])

    @classmethod
    def from_vector(cls, xi, layout: PanelLayout) -> "RandomEffectState":
        xi = np.asarray(xi, dtype=float)
        N = layout.n_individuals
        return cls(xi1=xi[:N].copy(), xi2=xi[N:].copy())

    @classmethod
    def zeros(cls, layout: PanelLayout) -> "RandomEffectState":
        return cls(np.zeros(layout.n_individuals), np.zeros(layout.n_times))


def ar1_covariance(T: int, rho: float, sigma2_sq: float) -> np.ndarray:
    """Stationary AR(1) covariance: sigma2_sq / (1 - rho^2) * rho^|t-s|."""
    check_rho(rho)
    if sigma2_sq < 0:
        raise ValueError("sigma2_sq must be non-negative")
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return sigma2_sq / (1.0 - rho * rho) * np.power(rho, lag)


def ar1_precision(T: int, rho: float, sigma2_sq: float) -> np.ndarray:
    """Closed-form tridiagonal inverse of :func:`ar1_covariance` (sigma2_sq > 0)."""
    check_rho(rho)
    if sigma2_sq <= 0:
        raise ValueError("precision undefined for sigma2_sq == 0")
    Q = np.zeros((T, T))
    idx = np.arange(T)
    Q[idx, idx] = 1.0 + rho * rho
    Q[0, 0] = Q[-1, -1] = 1.0
    Q[idx[:-1], idx[1:]] = -rho
    Q[idx[1:], idx[:-1]] = -rho
    return Q / sigma2_sq


def ar1_logdet(T: int, rho: float, sigma2_sq: float) -> float:
    return T * np.log(sigma2_sq) - np.log1p(-rho * rho)


def random_effect_covariance(layout: PanelLayout, params: ModelParams) -> np.ndarray:
    N, T = layout.n_individuals, layout.n_times
    D = np.zeros((N + T, N + T))
    D[:N, :N] = params.sigma1_sq * np.eye(N)
    D[N:, N:] = ar1_covariance(T, params.rho, params.sigma2_sq)
    return D


def active_blocks(layout: PanelLayout, params: ModelParams) -> np.ndarray:
    """Boolean mask over xi of the blocks with non-zero prior variance."""
    N, T = layout.n_individuals, layout.n_times
    return np.concatenate([np.full(N, params.sigma1_sq > 0), np.full(T, params.sigma2_sq > 0)])


def prior_precision(layout: PanelLayout, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """D^{-1} restricted to the active blocks, plus the active mask."""
    N, T = layout.n_individuals, layout.n_times
    blocks = []
    if params.sigma1_sq > 0:
        blocks.append(np.eye(N) / params.sigma1_sq)
    if params.sigma2_sq > 0:
        blocks.append(ar1_precision(T, params.rho, params.sigma2_sq))
    mask = active_blocks(layout, params)
    k = int(mask.sum())
    P = np.zeros((k, k))
    at = 0
    for b in blocks:
        m = b.shape[0]
        P[at:at + m, at:at + m] = b
        at += m
    return P, mask


# ---------------------------------------------------------------------------
# Predictor and complete-data likelihood
# ---------------------------------------------------------------------------


def linear_predictor(designs: DesignSet, params: ModelParams, xi) -> np.ndarray:
    xi = xi.xi if isinstance(xi, RandomEffectState) else np.asarray(xi, dtype=float)
    if params.beta.shape[0] != designs.p or xi.shape[0] != designs.q:
        raise DimensionError("beta/xi lengths do not match the designs")
    return designs.X @ params.beta + designs.u_apply(xi)


def mean_response(eta, family: FamilyLink) -> np.ndarray:
    return family.mean(eta)


def complete_loglik(z, designs: DesignSet, params: ModelParams, xi, gamma_diag) -> float:
    """log N(z; X beta + U xi, Gamma) + log N(xi1; 0, s1 I) + log N(xi2; 0, Sigma2).

    A zero variance component contributes nothing when its block of xi is
    zero and ``-inf`` otherwise.
    """
    N, T = designs.layout.n_individuals, designs.layout.n_times
    xi = xi.xi if isinstance(xi, RandomEffectState) else np.asarray(xi, dtype=float)
    g = np.asarray(gamma_diag, dtype=float)
    if np.any(g <= 0):
        raise ValueError("gamma_diag must be strictly positive")
    r = np.asarray(z, dtype=float) - linear_predictor(designs, params, xi)
    n = r.size
    out = -0.5 * (n * np.log(2 * np.pi) + np.sum(np.log(g)) + np.sum(r * r / g))

    xi1, xi2 = xi[:N], xi[N:]
    if params.sigma1_sq > 0:
        out += -0.5 * (N * np.log(2 * np.pi * params.sigma1_sq) + xi1 @ xi1 / params.sigma1_sq)
    elif np.any(xi1 != 0):
        logger.warning("nonzero xi1 under sigma1_sq == 0: complete log-likelihood is -inf")
        return -np.inf
    if params.sigma2_sq > 0:
        Q = ar1_precision(T, params.rho, params.sigma2_sq)
        out += -0.5 * (T * np.log(2 * np.pi) + ar1_logdet(T, params.rho, params.sigma2_sq) + xi2 @ Q @ xi2)
    elif np.any(xi2 != 0):
        logger.warning("nonzero xi2 under sigma2_sq == 0: complete log-likelihood is -inf")
        return -np.inf
    return float(out)
