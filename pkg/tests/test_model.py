import logging

import numpy as np
import pytest

from panelglmm.errors import DimensionError, StationarityError
from panelglmm.model import (
    ModelParams,
    PanelLayout,
    RandomEffectState,
    ar1_covariance,
    ar1_logdet,
    ar1_precision,
    build_designs,
    complete_loglik,
    family_link,
    linear_predictor,
    mean_response,
    random_effect_covariance,
)
from panelglmm.simulate import gen_ar1_path

from conftest import random_designs, random_params


def test_layout_counts():
    lay = PanelLayout(3, 4)
    assert lay.n_rows == 12 and lay.n_random == 7
    assert lay.row_index(1, 2) == 6
    assert [lay.row_index(i, t) for i in range(3) for t in range(4)] == list(range(12))


@pytest.mark.parametrize("N,T", [(1, 3), (3, 1), (0, 0)])
def test_layout_rejects_degenerate(N, T):
    with pytest.raises(DimensionError):
        PanelLayout(N, T)


def test_incidences_2x2():
    d = build_designs(PanelLayout(2, 2), np.ones((4, 1)))
    np.testing.assert_array_equal(d.U1, [[1, 0], [1, 0], [0, 1], [0, 1]])
    np.testing.assert_array_equal(d.U2, [[1, 0], [0, 1], [1, 0], [0, 1]])
    np.testing.assert_array_equal(d.U, np.hstack([d.U1, d.U2]))


def test_incidence_gram_matrices():
    d = build_designs(PanelLayout(3, 4), np.ones((12, 1)))
    np.testing.assert_array_equal(d.U1.T @ d.U1, 4 * np.eye(3))
    np.testing.assert_array_equal(d.U2.T @ d.U2, 3 * np.eye(4))
    assert np.all(d.U1.sum(axis=1) == 1) and np.all(d.U2.sum(axis=1) == 1)


def test_structured_operators_match_dense(rng):
    d = random_designs(rng, 5, 4, 2)
    xi = rng.standard_normal(d.q)
    v = rng.standard_normal(d.n)
    w = rng.uniform(0.5, 2.0, d.n)
    M = rng.standard_normal((d.q, d.q))
    C = M @ M.T
    np.testing.assert_allclose(d.u_apply(xi), d.U @ xi, atol=1e-13)
    np.testing.assert_allclose(d.ut_apply(v), d.U.T @ v, atol=1e-13)
    np.testing.assert_allclose(d.utwu(w), d.U.T @ (w[:, None] * d.U), atol=1e-12)
    np.testing.assert_allclose(d.diag_ucu(C), np.diag(d.U @ C @ d.U.T), atol=1e-12)


def test_build_designs_dimension_mismatch():
    with pytest.raises(DimensionError):
        build_designs(PanelLayout(2, 2), np.ones((5, 1)))


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(1), -0.1, 1.0, 0.0)
    with pytest.raises(StationarityError):
        ModelParams(np.zeros(1), 1.0, 1.0, 0.99995)
    ModelParams(np.zeros(1), 0.0, 0.0, 1 - 1e-4)


def test_ar1_covariance_independence():
    np.testing.assert_allclose(ar1_covariance(3, 0.0, 2.0), 2 * np.eye(3))


@pytest.mark.parametrize("rho,s2,expected", [(0.5, 0.75, [[1, 0.5], [0.5, 1]]), (-0.9, 0.19, [[1, -0.9], [-0.9, 1]])])
def test_ar1_covariance_monte_carlo(rho, s2, expected):
    np.testing.assert_allclose(ar1_covariance(2, rho, s2), expected, atol=1e-12)
    # stationary start: x1 ~ N(0, s2/(1-rho^2)), x2 = rho x1 + nu
    gen = np.random.default_rng(7)
    x1 = gen.standard_normal(10**6) * np.sqrt(s2 / (1 - rho**2))
    x2 = rho * x1 + gen.standard_normal(10**6) * np.sqrt(s2)
    emp = np.cov(np.vstack([x1, x2]), bias=True)
    np.testing.assert_allclose(emp, expected, atol=1e-2)


def test_ar1_covariance_matches_generated_paths():
    gen = np.random.default_rng(11)
    T, rho, s2 = 5, 0.6, 0.4
    paths = np.array([gen_ar1_path(T, rho, s2, gen) for _ in range(200_000)])
    np.testing.assert_allclose(np.cov(paths.T, bias=True), ar1_covariance(T, rho, s2), atol=1e-2)


def test_ar1_covariance_near_unit_root_rejected():
    with pytest.raises(StationarityError):
        ar1_covariance(3, 0.99999, 1.0)


@pytest.mark.parametrize("rho", [-0.95, -0.3, 0.0, 0.4, 0.9999])
def test_ar1_precision_and_logdet(rho):
    S = ar1_covariance(6, rho, 0.7)
    np.testing.assert_allclose(ar1_precision(6, rho, 0.7) @ S, np.eye(6), atol=1e-6)
    assert ar1_logdet(6, rho, 0.7) == pytest.approx(np.linalg.slogdet(S)[1], rel=1e-10)
    assert np.linalg.eigvalsh(S).min() >= -1e-10


def test_random_effect_covariance_blocks():
    lay = PanelLayout(2, 2)
    D = random_effect_covariance(lay, ModelParams(np.zeros(1), 2.0, 0.75, 0.5))
    expected = np.zeros((4, 4))
    expected[:2, :2] = 2 * np.eye(2)
    expected[2:, 2:] = [[1, 0.5], [0.5, 1]]
    np.testing.assert_allclose(D, expected, atol=1e-14)
    np.testing.assert_allclose(random_effect_covariance(PanelLayout(3, 2), ModelParams(np.zeros(1), 1, 1, 0)), np.eye(5))
    D0 = random_effect_covariance(PanelLayout(3, 4), ModelParams(np.zeros(1), 0.0, 1.0, 0.3))
    assert np.all(D0[:3, :] == 0) and np.linalg.matrix_rank(D0) <= 4
    assert np.all(D0[:3, 3:] == 0) and np.all(D0[3:, :3] == 0)


def test_linear_predictor_examples():
    d = build_designs(PanelLayout(2, 2), np.column_stack([np.ones(4), np.arange(4.0)]))
    th = ModelParams(np.zeros(2), 1.0, 1.0, 0.0)
    eta = linear_predictor(d, th, np.zeros(4))
    np.testing.assert_array_equal(eta, 0.0)
    np.testing.assert_array_equal(mean_response(eta, family_link("poisson")), 1.0)
    g = family_link("gaussian")
    np.testing.assert_array_equal(mean_response(np.array([0.3, -2.0]), g), [0.3, -2.0])

    X = np.array([[1.0, 2.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    d = build_designs(PanelLayout(2, 2), X)
    xi = RandomEffectState(np.array([0.1, 0.0]), np.array([-0.1, 0.0]))
    eta = linear_predictor(d, ModelParams(np.array([0.5, 0.5]), 1, 1, 0), xi.xi)
    assert eta[0] == pytest.approx(1.5, abs=1e-15)
    np.testing.assert_allclose(eta, X @ [0.5, 0.5] + d.U @ xi.xi)


def test_link_round_trip_and_variance():
    eta = np.linspace(-30, 30, 101)
    for fam in (family_link("poisson"), family_link("gaussian", dispersion=2.0)):
        np.testing.assert_allclose(fam.link(fam.inverse_link(eta)), eta, atol=1e-12)
    p = family_link("poisson")
    mu = np.array([0.5, 2.0])
    np.testing.assert_allclose(p.variance(mu), mu)
    np.testing.assert_allclose(p.link_deriv(mu), 1 / mu)
    g = family_link("gaussian", dispersion=2.0)
    np.testing.assert_allclose(g.variance(mu), 2.0)
    np.testing.assert_allclose(g.link_deriv(mu), 1.0)


def test_eta_clipping_is_logged(caplog):
    p = family_link("poisson")
    with caplog.at_level(logging.WARNING):
        eta, n = p.clip_eta(np.array([0.0, 40.0, -35.0]))
    assert n == 2 and eta[1] == 30 and eta[2] == -30
    assert "clip" in caplog.text


def _dense_loglik(z, d, th, xi, g):
    from scipy.stats import multivariate_normal as mvn

    N = d.layout.n_individuals
    out = mvn(d.X @ th.beta + d.U @ xi, np.diag(g)).logpdf(z)
    out += mvn(np.zeros(N), th.sigma1_sq * np.eye(N)).logpdf(xi[:N])
    out += mvn(np.zeros(d.layout.n_times), ar1_covariance(d.layout.n_times, th.rho, th.sigma2_sq)).logpdf(xi[N:])
    return out


def test_complete_loglik_density_oracle(rng):
    d = random_designs(rng, 4, 3, 2)
    th = random_params(rng, 2)
    xi = rng.standard_normal(d.q) * 0.3
    z = rng.standard_normal(d.n)
    g = rng.uniform(0.5, 2, d.n)
    assert complete_loglik(z, d, th, xi, g) == pytest.approx(_dense_loglik(z, d, th, xi, g), rel=1e-12)


def test_complete_loglik_zero_effects_and_gamma_doubling(rng):
    d = random_designs(rng, 3, 3, 2)
    th = random_params(rng, 2)
    z = d.X @ th.beta
    L = complete_loglik(z, d, th, np.zeros(d.q), np.ones(d.n))
    N, T = 3, 3
    prior1 = -0.5 * N * np.log(2 * np.pi * th.sigma1_sq)
    prior2 = -0.5 * (T * np.log(2 * np.pi) + np.linalg.slogdet(ar1_covariance(T, th.rho, th.sigma2_sq))[1])
    assert L == pytest.approx(-0.5 * d.n * np.log(2 * np.pi) + prior1 + prior2, rel=1e-12)
    L2 = complete_loglik(z, d, th, np.zeros(d.q), 2 * np.ones(d.n))
    assert L - L2 == pytest.approx(0.5 * d.n * np.log(2), rel=1e-12)


def test_complete_loglik_permutation_invariance(rng):
    d = random_designs(rng, 4, 3, 2)
    th = random_params(rng, 2)
    xi = rng.standard_normal(d.q)
    z = rng.standard_normal(d.n)
    g = rng.uniform(0.5, 2, d.n)
    perm = np.array([2, 0, 3, 1])
    rows = (perm[:, None] * 3 + np.arange(3)).ravel()
    dp = build_designs(d.layout, d.X[rows], intercept=0)
    xip = np.concatenate([xi[:4][perm], xi[4:]])
    assert complete_loglik(z[rows], dp, th, xip, g[rows]) == pytest.approx(complete_loglik(z, d, th, xi, g), rel=1e-13)


def test_complete_loglik_degenerate_sentinel(rng, caplog):
    d = random_designs(rng, 3, 3, 1)
    th = ModelParams(np.zeros(1), 0.0, 0.5, 0.2)
    xi = np.zeros(d.q)
    assert np.isfinite(complete_loglik(np.zeros(d.n), d, th, xi, np.ones(d.n)))
    xi[0] = 0.1
    with caplog.at_level(logging.WARNING):
        assert complete_loglik(np.zeros(d.n), d, th, xi, np.ones(d.n)) == -np.inf
    assert caplog.records
