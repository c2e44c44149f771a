"""Supervised-component regularized EM for many redundant regressors.

Instead of a ridge penalty, the fixed-effect part of the predictor is built
from K components ``f_h = C w_h`` on the principal-component scores ``C``
of the standardized regressors. Each unit-norm ``w_h`` maximizes

    (1 - s) * Q(w) + s * phi(w)

where ``Q(w)`` is the expected complete log-likelihood of the linearized
model when the fixed part is an intercept, the previous components and
``gamma * f_h``, and ``phi(w) = (sum_j cor(x_j, f)^(2 l))^(1/l)`` measures
how strongly ``f`` is tied to the observed regressors. Components of rank
h > 1 are kept orthogonal to the earlier ones in the empirical inner
product.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DivergenceError, PanelGLMMError, RelevanceError
from .inference import LinearizedLMM
from .linearize import WorkingModel, linearize, working_response
from .model import DesignSet, FamilyLink, ModelParams, PanelLayout, RandomEffectState, build_designs
from .ridge_em import (
    FitConfig,
    FitResult,
    _DivergenceMonitor,
    _e_step,
    _expected_iid_prior,
    _snapshot,
    _variance_update,
    damp_step,
    expected_ar1_objective,
    glm_start,
    parameter_change_converged,
    snap_to_boundary,
)

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
SCREEN_ITER = 30  # ascent steps per start before the best one is polished


@dataclass(frozen=True)
class SCConfig:
    s: float = 0.5
    l: float = 1.0
    n_components: int = 2
    cv_folds: int = 5
    s_grid: tuple | None = None
    l_grid: tuple | None = None
    k_grid: tuple | None = None
    n_restarts: int = 20
    max_ascent_iter: int = 1000
    ascent_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.s <= 1.0:
            raise ValueError("s must lie in [0, 1]")
        if self.l < 1.0:
            raise ValueError("l must be >= 1")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        for name, lo, hi in (("s_grid", 0.0, 1.0), ("l_grid", 1.0, math.inf), ("k_grid", 1, math.inf)):
            g = getattr(self, name)
            if g is not None:
                if not len(g) or any(not lo <= v <= hi for v in g):
                    raise ValueError(f"{name} values out of range")
                object.__setattr__(self, name, tuple(g))

    def grids(self):
        return (self.s_grid or (self.s,), self.l_grid or (self.l,), self.k_grid or (self.n_components,))

    def with_choice(self, s, l, k) -> "SCConfig":
        kw = dict(self.__dict__)
        kw.update(s=float(s), l=float(l), n_components=int(k))
        return SCConfig(**kw)


# ---------------------------------------------------------------------------
# Component basis and structural relevance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ComponentBasis:
    C: np.ndarray  # (n, r) principal-component scores, orthogonal columns
    singular_values: np.ndarray  # (r,)
    loadings: np.ndarray  # (p_kept, r) right singular vectors
    center: np.ndarray  # (p,)
    scale: np.ndarray  # (p,), 0 for dropped constant columns
    kept: np.ndarray  # (p,) bool

    @property
    def r(self) -> int:
        return self.C.shape[1]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.kept.size

    @property
    def loadings_back_map(self) -> np.ndarray:
        """(r, p): component weights -> coefficients on standardized variables."""
        M = np.zeros((self.r, self.p))
        M[:, self.kept] = self.loadings.T
        return M

    @property
    def Xs(self) -> np.ndarray:
        return self.C @ self.loadings.T

    @property
    def corr_map(self) -> np.ndarray:
        """(p_kept, r) matrix G with X_s' C w = G w."""
        return self.loadings * self.singular_values ** 2

    def variable_coefficients(self, std_coef) -> tuple[np.ndarray, float]:
        """Map standardized-variable coefficients to raw-scale slopes and the intercept shift."""
        beta = np.zeros(self.p)
        beta[self.kept] = np.asarray(std_coef)[self.kept] / self.scale[self.kept]
        return beta, float(-beta @ self.center)


def build_component_basis(X_raw) -> ComponentBasis:
    X = np.asarray(X_raw, dtype=float)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two rows")
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    kept = scale > 1e-12 * (1.0 + np.abs(center))
    if not kept.all():
        warnings.warn(f"dropping {int((~kept).sum())} constant column(s) from the component basis", stacklevel=2)
    if not kept.any():
        raise RelevanceError("every column of X is constant")
    Xs = (X[:, kept] - center[kept]) / scale[kept]
    Us, sv, Vt = np.linalg.svd(Xs, full_matrices=False)
    keep = sv > RANK_TOL * sv[0]
    scale = np.where(kept, scale, 0.0)
    return ComponentBasis(
        C=Us[:, keep] * sv[keep],
        singular_values=sv[keep],
        loadings=Vt[keep].T,
        center=center,
        scale=scale,
        kept=kept,
    )


def _relevance_from_sq(q, l):
    m = q.max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(m > 0, q / np.where(m > 0, m, 1.0), 0.0)
    return m * np.sum(ratio ** l, axis=0) ** (1.0 / l)


def structural_relevance(w, basis: ComponentBasis, X=None, l: float = 1.0) -> float:
    """phi(w) for f = C w; from the raw columns of ``X`` when given, else from the basis."""
    w = np.asarray(w, dtype=float)
    f = basis.C @ w
    if np.std(f) <= 1e-14 * (1.0 + np.abs(f).max()):
        raise RelevanceError("component has zero variance")
    if X is not None:
        X = np.asarray(X, dtype=float)[:, basis.kept]
        Xc = X - X.mean(axis=0)
        fc = f - f.mean()
        cor = (Xc.T @ fc) / (np.linalg.norm(Xc, axis=0) * np.linalg.norm(fc))
        q = cor * cor
    else:
        q = (basis.corr_map @ w) ** 2 / (basis.n * np.sum((basis.singular_values * w) ** 2))
    return float(_relevance_from_sq(q[:, None], l)[0])


# ---------------------------------------------------------------------------
# Rank-h extraction problem
# ---------------------------------------------------------------------------


class ComponentProblem:
    """Objective and gradient for component h given the previous ones.

    Weights ``w`` live in a reduced coordinate ``v`` with ``w = Z v``, where
    the columns of ``Z`` span the weights whose components are orthogonal to
    every previous component; ``|w| = |v|`` because Z is orthonormal.
    """

    def __init__(self, basis: ComponentBasis, z_tilde, weights, previous=(), const=0.0):
        self.basis = basis
        self.W = np.asarray(weights, dtype=float)
        self.const = float(const)
        C = basis.C
        n = basis.n
        sw = np.sqrt(self.W)
        B = np.column_stack([np.ones(n)] + [C @ w for w in previous])
        # residuals in the sqrt-weighted space; orth() tolerates extreme weight ranges
        Q = linalg.orth(sw[:, None] * B)
        proj = lambda M: M - Q @ (Q.T @ M)
        Ct = proj(sw[:, None] * C)
        r = proj(sw * np.asarray(z_tilde, dtype=float))
        self.A = Ct.T @ Ct
        self.b = Ct.T @ r
        self.rss0 = float(r @ r)
        self.a_floor = 1e-14 * max(np.trace(self.A), 1e-300)
        self.G = basis.corr_map
        self.s2 = basis.singular_values ** 2
        if previous:
            Nc = np.column_stack([self.s2 * w for w in previous])
            Q, _ = np.linalg.qr(Nc, mode="complete")
            self.Z = Q[:, Nc.shape[1]:]
        else:
            self.Z = np.eye(basis.r)

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def q_value(self, Wm):
        """Expected complete log-likelihood at the best fit on each column's component."""
        num = self.b @ Wm
        den = np.sum(Wm * (self.A @ Wm), axis=0)
        gain = np.where(den > self.a_floor, num * num / np.where(den > self.a_floor, den, 1.0), 0.0)
        return self.const - 0.5 * (self.rss0 - gain)

    def evaluate(self, V, s, l, grad=True):
        """Objective (and reduced gradient) for each column of V."""
        Wm = self.Z @ V
        n = self.basis.n
        num = self.b @ Wm
        AW = self.A @ Wm
        den = np.sum(Wm * AW, axis=0)
        okA = den > self.a_floor
        safe_den = np.where(okA, den, 1.0)
        gain = np.where(okA, num * num / safe_den, 0.0)
        q_val = self.const - 0.5 * (self.rss0 - gain)

        GW = self.G @ Wm
        s2W = self.s2[:, None] * Wm
        var = np.sum(Wm * s2W, axis=0)
        if np.any(var <= 0):
            raise RelevanceError("component has zero variance")
        q = GW * GW / (n * var)
        phi = _relevance_from_sq(q, l)
        obj = (1.0 - s) * q_val + s * phi
        if not grad:
            return obj
        g_q = np.where(okA, num / safe_den, 0.0) * self.b[:, None] - np.where(okA, gain / safe_den, 0.0) * AW
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(phi > 0, q / np.where(phi > 0, phi, 1.0), 0.0)
        weight = ratio ** (l - 1.0) if l != 1.0 else np.ones_like(q)
        g_phi = 2.0 * self.G.T @ (weight * GW) / (n * var) - 2.0 * phi * s2W / var
        g = (1.0 - s) * g_q + s * g_phi
        return obj, self.Z.T @ g

    def analytic_starts(self):
        """Reduced-space maximizers of the two pure objectives (s=0 and s=1, l=1)."""
        starts = []
        Ar = self.Z.T @ self.A @ self.Z
        br = self.Z.T @ self.b
        try:
            v = np.linalg.lstsq(Ar, br, rcond=None)[0]
            if np.linalg.norm(v) > 0:
                starts.append(v / np.linalg.norm(v))
        except np.linalg.LinAlgError:
            pass
        starts.append(self.eigen_direction())
        return starts

    def eigen_direction(self):
        """Leading generalized eigenvector: maximizes phi for l = 1 under the constraints."""
        S2 = np.diag(self.s2)
        a = self.Z.T @ (S2 @ S2) @ self.Z
        b = self.Z.T @ S2 @ self.Z
        _, vecs = linalg.eigh(0.5 * (a + a.T), 0.5 * (b + b.T))
        v = vecs[:, -1]
        return v / np.linalg.norm(v)


def component_objective(w, problem: ComponentProblem, s: float, l: float) -> float:
    """(1 - s) Q(w) + s phi(w) for a full-length weight vector w (rank-1 problem)."""
    w = np.asarray(w, dtype=float)
    v = problem.Z.T @ w
    return float(problem.evaluate(v[:, None], s, l, grad=False)[0])


def _canonical_sign(w):
    k = int(np.argmax(np.abs(w)))
    return w if w[k] >= 0 else -w


def ascend(problem: ComponentProblem, V0, s, l, max_iter=1000, gtol=1e-8, history=False):
    """Batched projected-gradient ascent on the unit sphere.

    Each column moves along the geodesic in its tangent-gradient direction.
    The trial angle comes from a Barzilai-Borwein estimate and is cut by 4
    until the objective increases, so accepted moves are strictly ascending.
    A column stops when its tangent gradient norm falls below
    ``gtol * (1 + |objective|)`` or its step underflows.
    Returns (V, objective[, per-iteration objective history]).
    """
    V = V0 / np.linalg.norm(V0, axis=0)
    obj, g = problem.evaluate(V, s, l)
    d = g - V * np.sum(V * g, axis=0)
    k = V.shape[1]
    step = np.full(k, 0.1)  # step length along the unnormalized tangent gradient
    active = np.ones(k, dtype=bool)
    hist = [obj.copy()] if history else None
    for _ in range(max_iter):
        dn = np.linalg.norm(d, axis=0)
        active &= dn > gtol * (1.0 + np.abs(obj))
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        theta = np.minimum(step[idx] * dn[idx], math.pi / 2)
        trial = np.cos(theta) * V[:, idx] + np.sin(theta) * d[:, idx] / dn[idx]
        trial /= np.linalg.norm(trial, axis=0)
        t_obj, t_g = problem.evaluate(trial, s, l)
        up = t_obj > obj[idx]
        acc, rej = idx[up], idx[~up]
        if acc.size:
            t_d = t_g[:, up] - trial[:, up] * np.sum(trial[:, up] * t_g[:, up], axis=0)
            sv = trial[:, up] - V[:, acc]
            yv = t_d - d[:, acc]
            sy = -np.sum(sv * yv, axis=0)
            ss = np.sum(sv * sv, axis=0)
            bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), step[acc] * 4.0)
            step[acc] = np.clip(bb, 1e-12, 1e12)
            V[:, acc] = trial[:, up]
            obj[acc] = t_obj[up]
            g[:, acc] = t_g[:, up]
            d[:, acc] = t_d
        step[rej] *= 0.25
        active[rej[step[rej] * dn[rej] < 1e-15]] = False
        if history:
            hist.append(obj.copy())
    return (V, obj, hist) if history else (V, obj)


def newton_polish(problem: ComponentProblem, v, s, l, gtol=1e-8, max_iter=25, h=1e-5):
    """Riemannian Newton refinement of one reduced weight vector.

    The objective is invariant to the scale of w, so its Hessian restricted
    to the tangent space is the Riemannian Hessian. It is built by central
    differences of the gradient in one batched evaluation. Steps are kept
    only when the objective does not decrease. Returns (v, objective).
    """
    v = v / np.linalg.norm(v)
    obj, g = problem.evaluate(v[:, None], s, l)
    obj, g = float(obj[0]), g[:, 0]
    m = v.size
    for _ in range(max_iter):
        if np.linalg.norm(g) <= gtol * (1.0 + abs(obj)):
            break
        P = linalg.null_space(v[None, :])
        E = h * P
        _, gp = problem.evaluate(v[:, None] + E, s, l)
        _, gm = problem.evaluate(v[:, None] - E, s, l)
        H = P.T @ (gp - gm) / (2.0 * h)
        H = 0.5 * (H + H.T)
        try:
            delta = linalg.solve(H, -(P.T @ g), assume_a="sym")
        except linalg.LinAlgError:
            break
        if np.linalg.eigvalsh(H)[-1] >= 0 or not np.all(np.isfinite(delta)):
            break
        trial = v + P @ delta
        trial /= np.linalg.norm(trial)
        t_obj, t_g = problem.evaluate(trial[:, None], s, l)
        if not t_obj[0] >= obj:
            break
        v, obj, g = trial, float(t_obj[0]), t_g[:, 0]
    return v, obj


def solve_component(problem: ComponentProblem, s, l, n_restarts=20, rng=None, max_iter=1000, tol=1e-8,
                    use_shortcut=True, warm=None):
    """Best unit weight vector for one rank; returns full-length w.

    All starts (``n_restarts`` random, the two analytic ones and an optional
    warm start) are ascended to a loose tolerance; the best is then polished
    to ``tol``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    m = problem.dim
    if m == 0:
        raise ValueError("no directions left: rank exceeds the component basis")
    if m == 1:
        return _canonical_sign(problem.Z[:, 0].copy())
    if use_shortcut and s == 1.0 and l == 1.0:
        return _canonical_sign(problem.Z @ problem.eigen_direction())
    R = rng.standard_normal((m, n_restarts))
    R /= np.linalg.norm(R, axis=0)
    extra = problem.analytic_starts()
    if warm is not None:
        v = problem.Z.T @ warm
        if np.linalg.norm(v) > 1e-12:
            extra.append(v / np.linalg.norm(v))
    starts = np.column_stack([R] + extra)
    start_obj = problem.evaluate(starts, s, l, grad=False)
    V, obj = ascend(problem, starts.copy(), s, l, max_iter=min(max_iter, SCREEN_ITER), gtol=max(tol, 1e-4))
    best = int(np.argmax(obj))
    v1, obj1 = newton_polish(problem, V[:, best], s, l, gtol=tol)
    V1, obj1 = ascend(problem, v1[:, None], s, l, max_iter=max_iter, gtol=tol)
    if obj1[0] <= float(np.max(start_obj[:n_restarts])) + tol:
        _, g = problem.evaluate(V1, s, l)
        d = g[:, 0] - V1[:, 0] * float(V1[:, 0] @ g[:, 0])
        if np.linalg.norm(d) > math.sqrt(tol) * (1.0 + abs(obj1[0])):
            warnings.warn("component ascent did not improve on the best random start", stacklevel=2)
    return _canonical_sign(problem.Z @ V1[:, 0])


def _q_constant(qstats, designs: DesignSet):
    """Terms of the expected complete log-likelihood that do not depend on w."""
    g = qstats.gamma_diag
    n = g.size
    N = designs.layout.n_individuals
    th = qstats.params
    out = -0.5 * (n * math.log(2 * math.pi) + np.sum(np.log(g)) + np.sum(qstats.diag_ucu / g))
    out += _expected_iid_prior(th.sigma1_sq, qstats.xi1_sq, N)
    out += expected_ar1_objective(th.rho, th.sigma2_sq, qstats.xi2_outer)
    out -= 0.5 * designs.layout.n_times * math.log(2 * math.pi)
    return float(out)


def extract_components(basis: ComponentBasis, qstats, designs: DesignSet, config: SCConfig, K=None, warm=None):
    """Greedy rank-by-rank extraction of K weight vectors (rows of the result)."""
    K = min(config.n_components if K is None else K, basis.r)
    const = _q_constant(qstats, designs)
    weights = 1.0 / qstats.gamma_diag
    out = []
    for h in range(K):
        rng = np.random.default_rng([config.seed, h])
        prob = ComponentProblem(basis, qstats.z_tilde, weights, out, const)
        w0 = warm[h] if warm is not None and h < len(warm) else None
        out.append(solve_component(prob, config.s, config.l, config.n_restarts, rng,
                                   config.max_ascent_iter, config.ascent_tol, warm=w0))
    return np.array(out)


def extract_component(h, previous_components, working_model: WorkingModel, designs: DesignSet,
                      params: ModelParams, config: SCConfig, basis: ComponentBasis | None = None):
    """Weight vector and component of rank h (1-based) given the earlier weights."""
    basis = basis or build_component_basis(_feature_matrix(designs))
    qstats = _e_step(LinearizedLMM(designs, params, working_model.gamma_diag), working_model.z, 0.0)
    prev = list(previous_components)[: h - 1]
    if len(prev) != h - 1:
        raise ValueError(f"rank {h} needs {h - 1} previous components")
    prob = ComponentProblem(basis, qstats.z_tilde, 1.0 / qstats.gamma_diag, prev, _q_constant(qstats, designs))
    rng = np.random.default_rng([config.seed, h - 1])
    w = solve_component(prob, config.s, config.l, config.n_restarts, rng, config.max_ascent_iter, config.ascent_tol)
    return w, basis.C @ w


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _feature_matrix(designs: DesignSet):
    if designs.intercept is None:
        return designs.X
    return np.delete(designs.X, designs.intercept, axis=1)


def _feature_index(designs: DesignSet):
    idx = np.arange(designs.p)
    return idx if designs.intercept is None else np.delete(idx, designs.intercept)


def _component_design(basis: ComponentBasis, Wmat):
    n = basis.n
    return np.column_stack([np.ones(n), basis.C @ Wmat.T]) if len(Wmat) else np.ones((n, 1))


def _coefficients(basis, designs, Wmat, coef):
    """Map (intercept, gammas) on [1, C W'] to a full beta over the columns of X."""
    std = basis.loadings_back_map.T @ (Wmat.T @ coef[1:]) if len(Wmat) else np.zeros(basis.p)
    slopes, shift = basis.variable_coefficients(std)
    beta = np.zeros(designs.p)
    beta[_feature_index(designs)] = slopes
    alpha = coef[0] + shift
    if designs.intercept is not None:
        beta[designs.intercept] = alpha
    return beta, alpha


def _augmented(designs: DesignSet) -> DesignSet:
    """Design with the intercept in column 0 followed by the feature columns."""
    F = _feature_matrix(designs)
    return build_designs(designs.layout, np.column_stack([np.ones(designs.n), F]), intercept=0)


def _to_user_beta(designs: DesignSet, beta_aug):
    beta = np.zeros(designs.p)
    beta[_feature_index(designs)] = beta_aug[1:]
    if designs.intercept is not None:
        beta[designs.intercept] = beta_aug[0]
    return beta


def _from_user_beta(designs: DesignSet, beta):
    a = beta[designs.intercept] if designs.intercept is not None else 0.0
    return np.concatenate([[a], np.asarray(beta)[_feature_index(designs)]])


def fit_hd(y, designs: DesignSet, family: FamilyLink, sc_config: SCConfig | None = None,
           fit_config: FitConfig | None = None, init: ModelParams | None = None) -> FitResult:
    """Outer linearization loop with the beta M-step replaced by component extraction.

    An unpenalized intercept is always part of the predictor; when ``designs``
    declares no intercept column it is reported in ``extra["intercept"]``.
    """
    sc = sc_config or SCConfig()
    cfg = fit_config or FitConfig()
    y = np.asarray(y, dtype=float)
    if y.shape != (designs.n,):
        raise ValueError("y length must equal the number of panel rows")
    family.check_response(y)
    aug = _augmented(designs)
    basis = build_component_basis(aug.X[:, 1:])
    K = min(sc.n_components, basis.r)
    if K < sc.n_components:
        logger.warning("n_components=%d exceeds basis rank %d; using %d", sc.n_components, basis.r, K)

    if init is None:
        a0 = glm_start(y, aug.X[:, :1], family)[0]
        mu0 = family.floor_mu(family.mean(np.full(aug.n, a0)))
        v = 0.1 * float(np.var(working_response(y, mu0, family) - a0))
        beta0 = np.zeros(aug.p)
        beta0[0] = a0
        params = ModelParams(beta0, v, v, 0.0)
    else:
        params = init.replace(beta=_from_user_beta(designs, init.beta))

    xi = np.zeros(aug.q)
    trace, dev_path = [], []
    monitor = _DivergenceMonitor(cfg.divergence_window)
    converged = False
    Wmat = np.zeros((0, basis.r))
    coef = np.array([params.beta[0]])
    n_clipped = 0
    it = 0
    dev_prev = family.deviance(y, family.mean(aug.X @ params.beta))
    for it in range(1, cfg.max_outer_iter + 1):
        wm = linearize(y, aug, params, xi, family)
        n_clipped += wm.n_clipped
        lmm = LinearizedLMM(aug, params, wm.gamma_diag)
        qs = _e_step(lmm, wm.z, 0.0)
        Wmat = extract_components(basis, qs, aug, sc, K, warm=Wmat if len(Wmat) else None)
        D = _component_design(basis, Wmat)

        def deviance_of(cand, D=D):
            return family.deviance(y, family.mean(D @ cand[0] + aug.u_apply(cand[1])))

        w = 1.0 / wm.gamma_diag
        coef = linalg.lstsq(D.T @ (w[:, None] * D), D.T @ (w * qs.z_tilde))[0]
        s1, s2, rho = _variance_update(aug, qs, cfg)
        new = ModelParams(_coefficients(basis, aug, Wmat, coef)[0], s1, s2, rho)

        def refit(cand, lmm_c):
            if cfg.beta_step != "ecme":
                return cand
            VD = lmm_c.vinv_apply(D)
            c = linalg.lstsq(D.T @ VD, VD.T @ wm.z)[0]
            return cand.replace(beta=_coefficients(basis, aug, Wmat, c)[0])

        lmm_new = LinearizedLMM(aug, new, wm.gamma_diag)
        new = refit(new, lmm_new)
        new, lmm_new = snap_to_boundary(
            new, lmm_new, lambda m, c: m.marginal_loglik(wm.z, c.beta), refit, cfg.boundary_ratio
        )
        # damping moves along span(D) so X beta stays representable by the components
        c0 = linalg.lstsq(D, aug.X @ params.beta)[0]
        c1 = linalg.lstsq(D, aug.X @ new.beta)[0]  # exact: X beta lies in span(D)
        x0, x1 = xi, lmm_new.posterior_mean(wm.z, new.beta)
        (coef, xi), dev = damp_step(lambda t: (c0 + t * (c1 - c0), x0 + t * (x1 - x0)), deviance_of, dev_prev)
        dev_prev = dev
        beta = _coefficients(basis, aug, Wmat, coef)[0]
        new = new.replace(beta=beta)
        dev_path.append(dev)
        trace.append(_snapshot(it, new.replace(beta=_to_user_beta(designs, beta)), 0.0, float("nan"), dev))
        done = parameter_change_converged(params, new, cfg.tol, cfg.atol)
        params = new
        if done:
            converged = True
            break
        if monitor.update(dev):
            raise DivergenceError(
                f"deviance increased for {cfg.divergence_window} consecutive outer iterations", trace=trace
            )

    eta = aug.X @ params.beta + aug.u_apply(xi)
    loadings = Wmat @ basis.loadings_back_map
    return FitResult(
        params=params.replace(beta=_to_user_beta(designs, params.beta)),
        xi_hat=RandomEffectState.from_vector(xi, designs.layout),
        lambda_path=[],
        gcv_path=[],
        n_iter=it,
        converged=converged,
        trace=trace,
        deviance_path=dev_path,
        eta=eta,
        mu=family.mean(eta),
        n_clipped=n_clipped,
        extra={
            "component_weights": Wmat,
            "variable_loadings": loadings,
            "component_coefficients": coef,
            "intercept": float(params.beta[0]),
            "basis_rank": basis.r,
            "s": sc.s,
            "l": sc.l,
            "n_components": K,
        },
    )


# ---------------------------------------------------------------------------
# Cross-validation over whole individuals
# ---------------------------------------------------------------------------


def individual_folds(n_individuals: int, n_folds: int, seed: int = 0) -> list:
    """Seeded partition of individual indices into ``n_folds`` sorted groups."""
    if not 2 <= n_folds <= n_individuals:
        raise ValueError("need 2 <= n_folds <= number of individuals")
    perm = np.random.default_rng(seed).permutation(n_individuals)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def subset_individuals(designs: DesignSet, individuals) -> DesignSet:
    """Designs restricted to the rows of the given individuals (order kept)."""
    idx = np.asarray(individuals, dtype=int)
    layout = PanelLayout(idx.size, designs.layout.n_times)
    return DesignSet(layout=layout, X=designs.X[_rows_of(designs, idx)], intercept=designs.intercept)


def _rows_of(designs: DesignSet, individuals):
    T = designs.layout.n_times
    return (np.asarray(individuals, dtype=int)[:, None] * T + np.arange(T)).ravel()


def predict_new_individuals(result: FitResult, X_new, n_times: int):
    """Conditional mean for unseen individuals: xi1 at its prior mean 0, xi2 at its posterior mean."""
    X_new = np.asarray(X_new, dtype=float)
    xi2 = result.xi_hat.xi2
    if xi2.size != n_times:
        xi2 = np.zeros(n_times)
    eta = X_new @ result.params.beta + np.tile(xi2, X_new.shape[0] // n_times)
    return eta


@dataclass
class OOFResult:
    deviance: float
    fold_deviance: list
    mu: np.ndarray  # out-of-fold predicted means, aligned with y
    folds: list


def oof_deviance(y, designs: DesignSet, family: FamilyLink, fitter, n_folds=5, seed=0, n_jobs=1) -> OOFResult:
    """Out-of-fold deviance of ``fitter(y_train, designs_train) -> FitResult``.

    Whole individuals are held out; predictions follow
    :func:`predict_new_individuals`.
    """
    y = np.asarray(y, dtype=float)
    folds = individual_folds(designs.layout.n_individuals, n_folds, seed)
    T = designs.layout.n_times

    def run(k):
        test = folds[k]
        train = np.setdiff1d(np.arange(designs.layout.n_individuals), test)
        tr_rows = _rows_of(designs, train)
        te_rows = _rows_of(designs, test)
        res = fitter(y[tr_rows], subset_individuals(designs, train))
        eta, _ = family.clip_eta(predict_new_individuals(res, designs.X[te_rows], T))
        return te_rows, family.mean(eta)

    outs = _map(run, range(n_folds), n_jobs)
    mu = np.empty_like(y)
    fold_dev = []
    for te_rows, m in outs:
        mu[te_rows] = m
        fold_dev.append(family.deviance(y[te_rows], m))
    return OOFResult(deviance=float(sum(fold_dev)), fold_deviance=fold_dev, mu=mu, folds=folds)


def _map(fn, items, n_jobs):
    items = list(items)
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))  # map keeps input order


@dataclass
class CVSelection:
    s: float
    l: float
    n_components: int
    table: list  # one dict per (s, l, K, fold)

    def __iter__(self):
        return iter((self.s, self.l, self.n_components))

    def scores(self) -> dict:
        out = {}
        for row in self.table:
            key = (row["s"], row["l"], row["n_components"])
            out[key] = out.get(key, 0.0) + row["deviance"]
        return out


def cv_tune(y, designs: DesignSet, family: FamilyLink, sc_config: SCConfig | None = None,
            fit_config: FitConfig | None = None, n_jobs=1) -> CVSelection:
    """Grid search of (s, l, K) by out-of-fold deviance over whole individuals.

    The lowest summed deviance wins; ties go to the smallest K, then the
    smallest s and l. A failed fold fit scores the candidate as +inf.
    """
    sc = sc_config or SCConfig()
    s_grid, l_grid, k_grid = sc.grids()
    cands = [(float(s), float(l), int(k)) for k in sorted(set(k_grid)) for s in sorted(set(s_grid))
             for l in sorted(set(l_grid))]
    if len(cands) == 1:
        s, l, k = cands[0]
        return CVSelection(s, l, k, [])
    y = np.asarray(y, dtype=float)
    folds = individual_folds(designs.layout.n_individuals, sc.cv_folds, sc.seed)
    T = designs.layout.n_times
    N = designs.layout.n_individuals
    tasks = [(c, k) for c in cands for k in range(len(folds))]

    def run(task):
        (s, l, K), k = task
        test = folds[k]
        train = np.setdiff1d(np.arange(N), test)
        tr_rows, te_rows = _rows_of(designs, train), _rows_of(designs, test)
        row = {"s": s, "l": l, "n_components": K, "fold": k}
        try:
            res = fit_hd(y[tr_rows], subset_individuals(designs, train), family, sc.with_choice(s, l, K), fit_config)
        except (PanelGLMMError, np.linalg.LinAlgError) as exc:
            row.update(deviance=math.inf, converged=False, error=f"{type(exc).__name__}: {exc}")
            return row
        eta, _ = family.clip_eta(predict_new_individuals(res, designs.X[te_rows], T))
        row.update(deviance=float(family.deviance(y[te_rows], family.mean(eta))), converged=bool(res.converged),
                   error=None)
        return row

    table = _map(run, tasks, n_jobs)
    sel = CVSelection(0.0, 1.0, 1, table)
    scores = sel.scores()
    best = min(cands, key=lambda c: (scores[c], c[2], c[0], c[1]))
    sel.s, sel.l, sel.n_components = best
    return sel
