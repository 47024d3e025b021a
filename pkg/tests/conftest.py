import math

import numpy as np
import pytest
from scipy import integrate

from sosvi.family import gaussian_family
from sosvi.models import (
    UNIT_ENTROPY_NOISE_VAR,
    bayes_linreg,
    conjugate_gaussian,
    synthetic_gaussian_data,
    synthetic_linreg_data,
)


def make_conjugate():
    nv = UNIT_ENTROPY_NOISE_VAR
    return conjugate_gaussian(synthetic_gaussian_data(20, 1.0, nv, 123), 0.0, 1.0, nv)


def make_linreg():
    nv = UNIT_ENTROPY_NOISE_VAR
    ds = synthetic_linreg_data(50, 5, nv, 7)
    return bayes_linreg(ds.observations, ds.targets, 1.0, nv)


def quad_elbo_1d(model, mu, rho):
    """ELBO of N(mu, exp(rho)^2) by adaptive quadrature over theta."""
    s = math.exp(rho)

    def integrand(t):
        q = math.exp(-0.5 * ((t - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
        return q * model.log_joint(np.array([t]))

    val, _ = integrate.quad(integrand, mu - 12 * s, mu + 12 * s, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val + rho + 0.5 * math.log(2 * math.pi * math.e)


def quad_grad_1d(model, p, h=1e-5):
    p = np.asarray(p, dtype=float)
    out = np.empty(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        out[i] = (quad_elbo_1d(model, *(p + e)) - quad_elbo_1d(model, *(p - e))) / (2 * h)
    return out


def quad_hessian_1d(model, p, h=1e-4):
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        cols.append((quad_grad_1d(model, p + e) - quad_grad_1d(model, p - e)) / (2 * h))
    H = np.column_stack(cols)
    return 0.5 * (H + H.T)


@pytest.fixture(scope="session")
def conj():
    return make_conjugate()


@pytest.fixture(scope="session")
def linreg():
    return make_linreg()


@pytest.fixture
def fam1():
    return gaussian_family(1)


# one (criterion, passed, detail) entry per acceptance criterion, printed at the end of the session
ACCEPTANCE_RESULTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
