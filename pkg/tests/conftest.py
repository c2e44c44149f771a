import sys

import numpy as np
import pytest

from panelglmm.model import ModelParams, PanelLayout, build_designs


def random_designs(rng, N, T, p, intercept=True):
    layout = PanelLayout(N, T)
    X = rng.standard_normal((N * T, p))
    if intercept:
        X[:, 0] = 1.0
    return build_designs(layout, X, intercept=0 if intercept else None)


def random_params(rng, p, sigma1_sq=None, sigma2_sq=None, rho=None):
    return ModelParams(
        beta=rng.standard_normal(p) * 0.5,
        sigma1_sq=rng.uniform(0.1, 1.0) if sigma1_sq is None else sigma1_sq,
        sigma2_sq=rng.uniform(0.1, 1.0) if sigma2_sq is None else sigma2_sq,
        rho=rng.uniform(-0.9, 0.9) if rho is None else rho,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
