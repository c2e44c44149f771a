"""Exact Gaussian computations on the linearized mixed model.

With ``V = U D U' + Gamma`` and the random-effect information matrix
``K = U' Gamma^{-1} U + D^{-1}``, every quantity used by the fit is written
through ``K`` (size N+T) instead of ``V`` (size n):

    V^{-1}      = Gamma^{-1} - Gamma^{-1} U K^{-1} U' Gamma^{-1}
    E[xi | z]   = K^{-1} U' Gamma^{-1} (z - X beta)
    Cov[xi | z] = K^{-1}

Blocks of xi whose variance component is exactly zero are dropped from
``U`` and ``K`` (their posterior is the point mass at zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import ConditioningError, SingularSystemError
from .model import DesignSet, ModelParams, default_penalty_mask, prior_precision, random_effect_covariance

SINGULAR_RCOND = 1e-13


@dataclass(frozen=True)
class PosteriorMoments:
    mean_xi: np.ndarray
    cov_xi: np.ndarray

    @property
    def second_moment_xi(self) -> np.ndarray:
        return self.cov_xi + np.outer(self.mean_xi, self.mean_xi)


def _cholesky(M, what="system"):
    try:
        c = linalg.cho_factor(M, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(f"{what} is not positive definite") from exc
    d = np.abs(np.diag(c[0]))
    if d.size and d.min() ** 2 <= SINGULAR_RCOND * d.max() ** 2:
        raise SingularSystemError(f"{what} is numerically singular")
    return c


class LinearizedLMM:
    """Absorbed form of ``z = X beta + U xi + e`` at fixed (D, Gamma)."""

    def __init__(self, designs: DesignSet, params: ModelParams, gamma_diag):
        self.designs = designs
        self.params = params
        self.gamma = np.asarray(gamma_diag, dtype=float)
        if self.gamma.shape != (designs.n,) or np.any(self.gamma <= 0):
            raise ValueError("gamma_diag must be a positive vector of length n")
        self.w = 1.0 / self.gamma
        Dinv, self.active = prior_precision(designs.layout, params)
        self.Dinv = Dinv
        self.k = int(self.active.sum())
        if self.k:
            K = designs.utwu(self.w)[np.ix_(self.active, self.active)] + Dinv
            try:
                self.K_chol = linalg.cho_factor(K, lower=True)
            except linalg.LinAlgError as exc:
                raise ConditioningError(
                    "random-effect information matrix is not positive definite",
                    min_eigenvalue=float(np.linalg.eigvalsh(K)[0]),
                ) from exc
        else:
            self.K_chol = None

    # -- structured operators -------------------------------------------------

    def _ut_active(self, v):
        return self.designs.ut_apply(v)[self.active]

    def _u_active(self, a):
        full = np.zeros((self.designs.q,) + np.shape(a)[1:])
        full[self.active] = a
        return self.designs.u_apply(full)

    def k_solve(self, rhs):
        return linalg.cho_solve(self.K_chol, rhs)

    def vinv_apply(self, M):
        M = np.asarray(M, dtype=float)
        wM = M * (self.w if M.ndim == 1 else self.w[:, None])
        if not self.k:
            return wM
        corr = self._u_active(self.k_solve(self._ut_active(wM)))
        return wM - corr * (self.w if M.ndim == 1 else self.w[:, None])

    def logdet_V(self) -> float:
        out = float(np.sum(np.log(self.gamma)))
        if self.k:
            logdet_K = 2.0 * np.sum(np.log(np.diag(self.K_chol[0])))
            _, logdet_Dinv = np.linalg.slogdet(self.Dinv)
            out += logdet_K - logdet_Dinv
        return out

    @cached_property
    def VinvX(self):
        return self.vinv_apply(self.designs.X)

    @cached_property
    def XtVinvX(self):
        A = self.designs.X.T @ self.VinvX
        return 0.5 * (A + A.T)

    @cached_property
    def trace_hu(self) -> float:
        if not self.k:
            return 0.0
        UtWU = self.designs.utwu(self.w)[np.ix_(self.active, self.active)]
        return float(np.trace(self.k_solve(UtWU)))

    # -- estimators -----------------------------------------------------------

    def ridge_beta(self, z, lam, penalty_mask):
        A = self.XtVinvX + lam * np.diag(penalty_mask)
        rhs = self.VinvX.T @ np.asarray(z, dtype=float)
        c = _cholesky(A, "X'V^-1 X + lambda P")
        return linalg.cho_solve(c, rhs)

    def posterior(self, z, beta) -> PosteriorMoments:
        q = self.designs.q
        mean = np.zeros(q)
        cov = np.zeros((q, q))
        if self.k:
            r = np.asarray(z, dtype=float) - self.designs.X @ beta
            mean[self.active] = self.k_solve(self._ut_active(self.w * r))
            Kinv = self.k_solve(np.eye(self.k))
            cov[np.ix_(self.active, self.active)] = 0.5 * (Kinv + Kinv.T)
        return PosteriorMoments(mean_xi=mean, cov_xi=cov)

    def posterior_mean(self, z, beta):
        mean = np.zeros(self.designs.q)
        if self.k:
            r = np.asarray(z, dtype=float) - self.designs.X @ beta
            mean[self.active] = self.k_solve(self._ut_active(self.w * r))
        return mean

    def hu_apply(self, M):
        """H_U M with H_U = U K^{-1} U' Gamma^{-1} (fitted random part)."""
        M = np.asarray(M, dtype=float)
        if not self.k:
            return np.zeros_like(M)
        wM = M * (self.w if M.ndim == 1 else self.w[:, None])
        return self._u_active(self.k_solve(self._ut_active(wM)))

    def marginal_loglik(self, z, beta) -> float:
        """log N(z; X beta, V)."""
        r = np.asarray(z, dtype=float) - self.designs.X @ beta
        n = r.size
        return float(-0.5 * (n * np.log(2 * np.pi) + self.logdet_V() + r @ self.vinv_apply(r)))


class GCVPath:
    """Fitted values, weighted residual norm and hat trace along a penalty grid.

    Uses ``S = H_U + Gamma V^{-1} X (A + lambda P)^{-1} X' V^{-1}`` with
    ``A = X' V^{-1} X``; each grid point costs one p x p factorization.
    """

    def __init__(self, lmm: LinearizedLMM, z, penalty_mask):
        self.lmm = lmm
        self.z = np.asarray(z, dtype=float)
        self.mask = np.asarray(penalty_mask, dtype=float)
        self.e = lmm.vinv_apply(self.z)
        self.E = lmm.VinvX
        self.c = self.E.T @ self.z
        self.B = self.E.T @ (lmm.gamma[:, None] * self.E)
        self.n = self.z.size

    def evaluate(self, lam):
        """Return (weighted rss, trace(S), beta) or raise SingularSystemError."""
        A = self.lmm.XtVinvX + lam * np.diag(self.mask)
        ch = _cholesky(A, "X'V^-1 X + lambda P")
        beta = linalg.cho_solve(ch, self.c)
        resid_scaled = self.e - self.E @ beta  # residual = Gamma * resid_scaled
        rss = float(np.sum(self.lmm.gamma * resid_scaled * resid_scaled))
        trace = self.lmm.trace_hu + float(np.trace(linalg.cho_solve(ch, self.B)))
        return rss, trace, beta


# ---------------------------------------------------------------------------
# Functional surface
# ---------------------------------------------------------------------------


def marginal_covariance(designs: DesignSet, params: ModelParams, gamma_diag) -> np.ndarray:
    D = random_effect_covariance(designs.layout, params)
    U = designs.U
    V = U @ D @ U.T + np.diag(np.asarray(gamma_diag, dtype=float))
    V = 0.5 * (V + V.T)
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            "marginal covariance is not positive definite", min_eigenvalue=float(np.linalg.eigvalsh(V)[0])
        ) from exc
    return V


def ridge_gls_beta(designs: DesignSet, params: ModelParams | None, gamma_diag, z, lam, penalty_mask=None, V=None):
    """(X'V^-1 X + lambda P)^-1 X'V^-1 z, with V given densely or through (D, Gamma)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    mask = default_penalty_mask(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    X = designs.X
    if V is not None:
        cV = linalg.cho_factor(V, lower=True)
        VinvX = linalg.cho_solve(cV, X)
        A = X.T @ VinvX + lam * np.diag(mask)
        rhs = VinvX.T @ np.asarray(z, dtype=float)
    else:
        lmm = LinearizedLMM(designs, params, gamma_diag)
        A = lmm.XtVinvX + lam * np.diag(mask)
        rhs = lmm.VinvX.T @ np.asarray(z, dtype=float)
    try:
        c = _cholesky(0.5 * (A + A.T), "X'V^-1 X + lambda P")
    except SingularSystemError as exc:
        raise SingularSystemError(f"{exc}; use lambda > 0 for collinear designs") from exc
    return linalg.cho_solve(c, rhs)


def posterior_xi(designs: DesignSet, params: ModelParams, gamma_diag, z, beta, method="henderson") -> PosteriorMoments:
    """Conditional moments of xi given z at fixed theta.

    ``method="henderson"`` solves with K (default); ``"marginal"`` uses the
    dense n x n marginal covariance and exists for cross-checking.
    """
    if method == "henderson":
        return LinearizedLMM(designs, params, gamma_diag).posterior(z, beta)
    if method != "marginal":
        raise ValueError(f"unknown method {method!r}")
    D = random_effect_covariance(designs.layout, params)
    V = marginal_covariance(designs, params, gamma_diag)
    cV = linalg.cho_factor(V, lower=True)
    DUt = D @ designs.U.T
    r = np.asarray(z, dtype=float) - designs.X @ beta
    mean = DUt @ linalg.cho_solve(cV, r)
    cov = D - DUt @ linalg.cho_solve(cV, DUt.T)
    return PosteriorMoments(mean_xi=mean, cov_xi=0.5 * (cov + cov.T))


def hat_matrix_apply(designs: DesignSet, params: ModelParams, gamma_diag, lam, penalty_mask=None):
    """Dense hat matrix S (z -> X beta_lambda + U xi_hat) and its trace."""
    mask = default_penalty_mask(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    lmm = LinearizedLMM(designs, params, gamma_diag)
    A = lmm.XtVinvX + lam * np.diag(mask)
    ch = _cholesky(A, "X'V^-1 X + lambda P")
    E = lmm.VinvX
    n = designs.n
    H_U = lmm.hu_apply(np.eye(n))
    S = H_U + (lmm.gamma[:, None] * E) @ linalg.cho_solve(ch, E.T)
    return S, float(np.trace(S))


def penalized_marginal_loglik(designs: DesignSet, params: ModelParams, gamma_diag, z, lam, penalty_mask=None) -> float:
    """log N(z; X beta, U D U' + Gamma) - lambda/2 beta' P beta."""
    mask = default_penalty_mask(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    lmm = LinearizedLMM(designs, params, gamma_diag)
    b = params.beta
    return lmm.marginal_loglik(z, b) - 0.5 * lam * float(b @ (mask * b))
