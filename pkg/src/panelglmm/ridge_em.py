"""Ridge-penalized EM inside a Schall-type linearization loop.

Each outer iteration linearizes the GLMM at the current (beta, xi), picks
the ridge penalty by heteroscedastic GCV on the linearized model, runs one
(or ``inner_em_iter``) E/M sweep on ``theta = (beta, sigma1_sq, sigma2_sq,
rho)`` and refreshes xi, z and Gamma from the updated parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateFitError,
    DivergenceError,
    MStepError,
    SelectionError,
    SingularSystemError,
)
from .inference import GCVPath, LinearizedLMM, PosteriorMoments, _cholesky
from .linearize import WorkingModel, linearize, working_response, working_variance
from .model import (
    RHO_MARGIN,
    DesignSet,
    FamilyLink,
    ModelParams,
    RandomEffectState,
    ar1_logdet,
    ar1_precision,
    default_penalty_mask,
)

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def default_lambda_grid() -> tuple:
    return (0.0,) + tuple(float(v) for v in np.logspace(-4, 4, 50))


@dataclass(frozen=True)
class FitConfig:
    lambda_grid: tuple = field(default_factory=default_lambda_grid)
    max_outer_iter: int = 200
    inner_em_iter: int = 1
    tol: float = 1e-6
    atol: float = 1e-8
    rho_grid_size: int = 201
    rho_tol: float = 1e-6
    penalize_all: bool = False
    penalty_mask: tuple | None = None
    divergence_window: int = 10
    beta_step: str = "ecme"
    boundary_ratio: float = 1e-2

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid or any(v < 0 or not math.isfinite(v) for v in grid):
            raise ValueError("lambda_grid must be a nonempty set of finite non-negative values")
        object.__setattr__(self, "lambda_grid", tuple(sorted(set(grid))))
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iter < 1 or self.inner_em_iter < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rho_grid_size < 3:
            raise ValueError("rho_grid_size must be >= 3")
        if self.boundary_ratio < 0:
            raise ValueError("boundary_ratio must be non-negative")
        if self.beta_step not in ("ecme", "em"):
            raise ValueError("beta_step must be 'ecme' or 'em'")

    def mask_for(self, designs: DesignSet) -> np.ndarray:
        if self.penalty_mask is not None:
            mask = np.asarray(self.penalty_mask, dtype=float)
            if mask.shape != (designs.p,):
                raise ValueError("penalty_mask length must equal the number of columns of X")
            return mask
        return default_penalty_mask(designs, penalize_all=self.penalize_all)


@dataclass
class FitResult:
    params: ModelParams
    xi_hat: RandomEffectState
    lambda_path: list
    gcv_path: list
    n_iter: int
    converged: bool
    trace: list
    gcv_curves: list = field(default_factory=list)
    lambda_grid: tuple = ()
    deviance_path: list = field(default_factory=list)
    eta: np.ndarray | None = None
    mu: np.ndarray | None = None
    n_clipped: int = 0
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# GCV
# ---------------------------------------------------------------------------


def _gcv_from_parts(rss_weighted, trace, n):
    if trace >= n:
        raise DegenerateFitError(f"trace(S)={trace:.6g} >= n={n}")
    return (rss_weighted / n) / (1.0 - trace / n) ** 2


def gcv_score(z, S_lambda, gamma_diag) -> float:
    z = np.asarray(z, dtype=float)
    r = z - S_lambda @ z
    n = z.size
    return _gcv_from_parts(float(np.sum(r * r / np.asarray(gamma_diag, dtype=float))), float(np.trace(S_lambda)), n)


def _gcv_curve(lmm: LinearizedLMM, z, mask, grid):
    path = GCVPath(lmm, z, mask)
    curve = np.full(len(grid), np.inf)
    for i, lam in enumerate(grid):
        try:
            rss, tr, _ = path.evaluate(lam)
            curve[i] = _gcv_from_parts(rss, tr, path.n)
        except (SingularSystemError, DegenerateFitError):
            continue
    return curve


def argmin_prefer_larger(grid, curve):
    """Grid argmin with exact ties resolved toward the larger lambda."""
    curve = np.asarray(curve, dtype=float)
    finite = np.isfinite(curve)
    if not finite.any():
        raise SelectionError("every lambda on the grid is degenerate")
    best = np.min(curve[finite])
    idx = int(np.flatnonzero(finite & (curve == best))[-1])
    return float(grid[idx]), idx


def select_lambda(working_model: WorkingModel, designs: DesignSet, params: ModelParams, config: FitConfig):
    lmm = LinearizedLMM(designs, params, working_model.gamma_diag)
    grid = np.asarray(config.lambda_grid)
    curve = _gcv_curve(lmm, working_model.z, config.mask_for(designs), grid)
    lam, _ = argmin_prefer_larger(grid, curve)
    return lam, curve


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QPenStats:
    """Sufficient statistics of the expected penalized complete log-likelihood."""

    params: ModelParams
    moments: PosteriorMoments
    z: np.ndarray
    gamma_diag: np.ndarray
    z_tilde: np.ndarray  # z - U E[xi | z]
    diag_ucu: np.ndarray  # diag(U Cov[xi | z] U')
    xi1_sq: float  # E[xi1' xi1 | z]
    xi2_outer: np.ndarray  # E[xi2 xi2' | z]
    lam: float = 0.0


def _e_step(lmm: LinearizedLMM, z, lam) -> QPenStats:
    designs = lmm.designs
    N = designs.layout.n_individuals
    mom = lmm.posterior(z, lmm.params.beta)
    m, C = mom.mean_xi, mom.cov_xi
    return QPenStats(
        params=lmm.params,
        moments=mom,
        z=np.asarray(z, dtype=float),
        gamma_diag=lmm.gamma,
        z_tilde=np.asarray(z, dtype=float) - designs.u_apply(m),
        diag_ucu=designs.diag_ucu(C),
        xi1_sq=float(m[:N] @ m[:N] + np.trace(C[:N, :N])),
        xi2_outer=C[N:, N:] + np.outer(m[N:], m[N:]),
        lam=float(lam),
    )


def penalized_e_step(working_model: WorkingModel, designs: DesignSet, params: ModelParams, lam) -> QPenStats:
    return _e_step(LinearizedLMM(designs, params, working_model.gamma_diag), working_model.z, lam)


def q_pen(params: ModelParams, qstats: QPenStats, designs: DesignSet, lam=None, penalty_mask=None) -> float:
    """Expected penalized complete log-likelihood at ``params`` under ``qstats``."""
    lam = qstats.lam if lam is None else lam
    mask = default_penalty_mask(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    N, T = designs.layout.n_individuals, designs.layout.n_times
    g = qstats.gamma_diag
    r = qstats.z_tilde - designs.X @ params.beta
    n = r.size
    out = -0.5 * (n * np.log(2 * np.pi) + np.sum(np.log(g)) + np.sum((r * r + qstats.diag_ucu) / g))
    out += _expected_iid_prior(params.sigma1_sq, qstats.xi1_sq, N)
    out += expected_ar1_objective(params.rho, params.sigma2_sq, qstats.xi2_outer) - 0.5 * T * np.log(2 * np.pi)
    out -= 0.5 * lam * float(params.beta @ (mask * params.beta))
    return float(out)


def _expected_iid_prior(s1, xi1_sq, N):
    if s1 > 0:
        return -0.5 * (N * np.log(2 * np.pi * s1) + xi1_sq / s1)
    return 0.0 if xi1_sq == 0 else -np.inf


def expected_ar1_objective(rho, sigma2_sq, xi2_outer) -> float:
    """-1/2 log det Sigma2 - 1/2 tr(Sigma2^{-1} E[xi2 xi2'])."""
    T = xi2_outer.shape[0]
    if sigma2_sq <= 0:
        return 0.0 if not np.any(xi2_outer) else -np.inf
    Q = ar1_precision(T, rho, sigma2_sq)
    return float(-0.5 * ar1_logdet(T, rho, sigma2_sq) - 0.5 * np.sum(Q * xi2_outer))


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------


def _ar1_moment_sums(S2):
    d = np.diag(S2)
    s_end = d[0] + d[-1]
    s_in = float(np.sum(d[1:-1]))
    s_off = float(np.sum(np.diag(S2, 1)))
    return float(s_end), s_in, s_off


def profiled_ar1_objective(rho, S2):
    """Expected AR(1) log-density with sigma2_sq profiled out (up to a constant)."""
    T = S2.shape[0]
    s_end, s_in, s_off = _ar1_moment_sums(S2)
    rho = np.asarray(rho, dtype=float)
    a = s_end + (1.0 + rho * rho) * s_in - 2.0 * rho * s_off
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -0.5 * T * np.log(a / T) + 0.5 * np.log1p(-rho * rho)
    return np.where(a > 0, val, -np.inf)


def _profiled_sigma2(rho, S2):
    T = S2.shape[0]
    s_end, s_in, s_off = _ar1_moment_sums(S2)
    return max((s_end + (1.0 + rho * rho) * s_in - 2.0 * rho * s_off) / T, 0.0)


def _golden_max(f, a, b, tol):
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def profile_rho(xi2_outer, grid_size=201, tol=1e-6, current_rho=None):
    """Maximize the expected stationary AR(1) log-density over (rho, sigma2_sq).

    Grid search over ``grid_size`` points in [-1+eps, 1-eps], golden-section
    refinement inside the winning bracket. When ``current_rho`` is given the
    result never scores below it, which keeps EM monotone.
    """
    S2 = np.asarray(xi2_outer, dtype=float)
    if not np.any(np.diag(S2) > 0):
        return (0.0 if current_rho is None else float(current_rho)), 0.0
    lo, hi = -1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN
    grid = np.linspace(lo, hi, grid_size)
    vals = profiled_ar1_objective(grid, S2)
    if not np.any(np.isfinite(vals)):
        raise MStepError("profiled AR(1) objective is non-finite on the whole rho grid",
                         diagnostics={"diag": np.diag(S2).tolist()})
    k = int(np.nanargmax(vals))
    f = lambda r: float(profiled_ar1_objective(r, S2))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid_size - 1)]
    cands = [(grid[k], vals[k]), _golden_max(f, a, b, tol)]
    if current_rho is not None:
        cands.append((float(current_rho), f(float(current_rho))))
    rho, best = max(cands, key=lambda c: c[1])
    if not np.isfinite(best):
        raise MStepError("non-finite profiled AR(1) objective at optimum", diagnostics={"rho": rho})
    rho = float(np.clip(rho, lo, hi))
    return rho, _profiled_sigma2(rho, S2)


def _beta_update(designs: DesignSet, qstats: QPenStats, lam, mask):
    X = designs.X
    w = 1.0 / qstats.gamma_diag
    A = X.T @ (w[:, None] * X) + lam * np.diag(mask)
    rhs = X.T @ (w * qstats.z_tilde)
    ch = _cholesky(0.5 * (A + A.T), "X' Gamma^-1 X + lambda P")
    return linalg.cho_solve(ch, rhs)


def _variance_update(designs: DesignSet, qstats: QPenStats, config: FitConfig):
    N = designs.layout.n_individuals
    s1 = qstats.xi1_sq / N if qstats.params.sigma1_sq > 0 else 0.0
    if qstats.params.sigma2_sq > 0:
        rho, s2 = profile_rho(qstats.xi2_outer, config.rho_grid_size, config.rho_tol, qstats.params.rho)
    else:
        rho, s2 = qstats.params.rho, 0.0
    return s1, s2, rho


def m_step(qstats: QPenStats, designs: DesignSet, working_model: WorkingModel | None, lam,
           config: FitConfig | None = None, penalty_mask=None) -> ModelParams:
    """Exact maximizer of Q_pen in beta and sigma1_sq, grid+golden in rho."""
    config = config or FitConfig()
    mask = config.mask_for(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    beta = _beta_update(designs, qstats, lam, mask)
    s1, s2, rho = _variance_update(designs, qstats, config)
    return ModelParams(beta=beta, sigma1_sq=s1, sigma2_sq=s2, rho=rho)


def _sweep(lmm: LinearizedLMM, z, lam, config: FitConfig, mask):
    """One E/M sweep; returns (new params, LinearizedLMM at the new variances).

    With ``beta_step="ecme"`` beta is then re-solved as the ridge-GLS
    maximizer of the penalized marginal likelihood at the new variance
    components. Both variants share fixed points and are monotone; ECME
    avoids the near-unit EM rate along the intercept / random-effect-mean
    direction.
    """
    qs = _e_step(lmm, z, lam)
    new = m_step(qs, lmm.designs, None, lam, config, mask)
    lmm_new = LinearizedLMM(lmm.designs, new, lmm.gamma)
    if config.beta_step == "ecme":
        new = new.replace(beta=lmm_new.ridge_beta(z, lam, mask))

    def refit(cand, lmm_c):
        return cand.replace(beta=lmm_c.ridge_beta(z, lam, mask)) if config.beta_step == "ecme" else cand

    def objective(lmm_c, cand):
        b = cand.beta
        return lmm_c.marginal_loglik(z, b) - 0.5 * lam * float(b @ (mask * b))

    return snap_to_boundary(new, lmm_new, objective, refit, config.boundary_ratio)


def snap_to_boundary(params: ModelParams, lmm: LinearizedLMM, objective, refit, ratio):
    """Try sigma^2 = 0 for variance components below ``ratio * mean(Gamma)``.

    EM approaches a zero variance component only sublinearly. The candidate
    with the component set to zero (and beta refitted by ``refit``) is
    accepted when ``objective`` does not decrease, so the step keeps the
    ascent property. Returns (params, LinearizedLMM).
    """
    if ratio <= 0:
        return params, lmm
    threshold = ratio * float(np.mean(lmm.gamma))
    for name in ("sigma1_sq", "sigma2_sq"):
        value = getattr(params, name)
        if not 0.0 < value < threshold:
            continue
        cand = params.replace(**{name: 0.0})
        try:
            lmm_c = LinearizedLMM(lmm.designs, cand, lmm.gamma)
            cand = refit(cand, lmm_c)
            accept = objective(lmm_c, cand) >= objective(lmm, params)
        except SingularSystemError:
            accept = False
        if accept:
            params, lmm = cand, lmm_c
    return params, lmm


def em_sweeps(z, gamma_diag, designs: DesignSet, params: ModelParams, lam, n_sweeps=1, config=None, penalty_mask=None):
    """Run ``n_sweeps`` sweeps at fixed linearization; returns every iterate."""
    config = config or FitConfig()
    mask = config.mask_for(designs) if penalty_mask is None else np.asarray(penalty_mask, dtype=float)
    out = [params]
    for _ in range(n_sweeps):
        new, _ = _sweep(LinearizedLMM(designs, out[-1], gamma_diag), z, lam, config, mask)
        out.append(new)
    return out


# ---------------------------------------------------------------------------
# Initialization and driver
# ---------------------------------------------------------------------------


def glm_start(y, X, family: FamilyLink, mask=None, max_iter=50, tol=1e-10):
    """IRLS for the fixed-effects GLM; falls back to a tiny ridge if X'WX is singular."""
    y = np.asarray(y, dtype=float)
    p = X.shape[1]
    mask = np.ones(p) if mask is None else mask
    mu = family.floor_mu(y + 0.1) if family.family == "poisson" else y.copy()
    beta = np.zeros(p)
    ridge = 0.0
    for _ in range(max_iter):
        z = working_response(y, mu, family)
        w = 1.0 / working_variance(mu, family)
        A = X.T @ (w[:, None] * X)
        rhs = X.T @ (w * z)
        while True:
            try:
                new = linalg.cho_solve(_cholesky(A + ridge * np.diag(mask), "X'WX"), rhs)
                break
            except SingularSystemError:
                ridge = 1e-4 if ridge == 0 else ridge * 10
                if ridge > 1e6:
                    raise
        done = np.max(np.abs(new - beta)) <= tol * (1 + np.max(np.abs(beta)))
        beta = new
        mu = family.floor_mu(family.mean(X @ beta))
        if done:
            break
    return beta


def initial_params(y, designs: DesignSet, family: FamilyLink, mask=None) -> ModelParams:
    beta0 = glm_start(y, designs.X, family, mask)
    mu0 = family.floor_mu(family.mean(designs.X @ beta0))
    z0 = working_response(y, mu0, family)
    v = 0.1 * float(np.var(z0 - designs.X @ beta0))
    return ModelParams(beta=beta0, sigma1_sq=v, sigma2_sq=v, rho=0.0)


def parameter_change_converged(old: ModelParams, new: ModelParams, tol, atol) -> bool:
    db = np.max(np.abs(new.beta - old.beta)) if old.beta.size else 0.0
    if db > tol * np.max(np.abs(old.beta), initial=0.0) + atol:
        return False
    for a, b in ((old.sigma1_sq, new.sigma1_sq), (old.sigma2_sq, new.sigma2_sq), (old.rho, new.rho)):
        if abs(b - a) > tol * abs(a) + atol:
            return False
    return True


class _DivergenceMonitor:
    """Flags ``window`` consecutive deviance increases that at least double it.

    Slow monotone drift (variance components shrinking toward zero makes the
    conditional deviance creep up) is not treated as divergence.
    """

    def __init__(self, window, factor=2.0):
        self.window = window
        self.factor = factor
        self.history = []

    def update(self, deviance):
        self.history.append(deviance)
        h = self.history[-(self.window + 1):]
        if len(h) <= self.window:
            return False
        rising = all(b > a + 1e-8 * (1.0 + abs(a)) for a, b in zip(h, h[1:]))
        return rising and h[-1] >= self.factor * max(h[0], 1e-12)


def damp_step(step, deviance_of, dev_old, factor=2.0, max_halvings=30):
    """Halves a blown-up outer step until the conditional deviance stays bounded.

    ``step(t)`` returns the candidate at fraction ``t`` of the full update and
    ``deviance_of`` scores it. Moderate increases are left alone since the
    linearized scheme is not monotone in the deviance.
    """
    bound = factor * dev_old + 1.0 if np.isfinite(dev_old) else np.inf
    t = 1.0
    cand = step(t)
    dev = deviance_of(cand)
    halvings = 0
    while not (np.isfinite(dev) and dev <= bound) and halvings < max_halvings:
        t *= 0.5
        halvings += 1
        cand = step(t)
        dev = deviance_of(cand)
    if halvings:
        logger.info("outer step halved %d times (deviance %.6g -> %.6g)", halvings, dev_old, dev)
    return cand, dev


def _snapshot(it, params, lam, gcv, deviance):
    d = params.to_dict()
    d.update(iteration=it, lam=float(lam), gcv=float(gcv), deviance=float(deviance))
    return d


def fit(y, designs: DesignSet, family: FamilyLink, config: FitConfig | None = None,
        init: ModelParams | None = None) -> FitResult:
    config = config or FitConfig()
    y = np.asarray(y, dtype=float)
    if y.shape != (designs.n,):
        raise ValueError("y length must equal the number of panel rows")
    family.check_response(y)
    mask = config.mask_for(designs)
    grid = np.asarray(config.lambda_grid)

    params = init if init is not None else initial_params(y, designs, family, mask)
    xi = np.zeros(designs.q)
    lambda_path, gcv_path, curves, trace, dev_path = [], [], [], [], []
    monitor = _DivergenceMonitor(config.divergence_window)
    converged = False
    n_clipped = 0
    it = 0

    def deviance_of(cand):
        return family.deviance(y, family.mean(designs.X @ cand[0] + designs.u_apply(cand[1])))

    dev_prev = deviance_of((params.beta, xi))
    for it in range(1, config.max_outer_iter + 1):
        wm = linearize(y, designs, params, xi, family)
        n_clipped += wm.n_clipped
        lmm = LinearizedLMM(designs, params, wm.gamma_diag)
        curve = _gcv_curve(lmm, wm.z, mask, grid)
        lam, k = argmin_prefer_larger(grid, curve)

        new = params
        for _ in range(config.inner_em_iter):
            new, lmm = _sweep(lmm, wm.z, lam, config, mask)
        b0, x0, b1, x1 = params.beta, xi, new.beta, lmm.posterior_mean(wm.z, new.beta)
        (beta, xi), dev = damp_step(lambda t: (b0 + t * (b1 - b0), x0 + t * (x1 - x0)), deviance_of, dev_prev)
        new = new.replace(beta=beta)
        dev_prev = dev
        lambda_path.append(lam)
        gcv_path.append(float(curve[k]))
        curves.append(curve.tolist())
        dev_path.append(dev)
        trace.append(_snapshot(it, new, lam, curve[k], dev))

        done = parameter_change_converged(params, new, config.tol, config.atol)
        params = new
        if done:
            converged = True
            break
        if monitor.update(dev):
            raise DivergenceError(
                f"deviance increased for {config.divergence_window} consecutive outer iterations", trace=trace
            )

    eta = designs.X @ params.beta + designs.u_apply(xi)
    return FitResult(
        params=params,
        xi_hat=RandomEffectState.from_vector(xi, designs.layout),
        lambda_path=lambda_path,
        gcv_path=gcv_path,
        n_iter=it,
        converged=converged,
        trace=trace,
        gcv_curves=curves,
        lambda_grid=tuple(float(v) for v in grid),
        deviance_path=dev_path,
        eta=eta,
        mu=family.mean(eta),
        n_clipped=n_clipped,
    )
