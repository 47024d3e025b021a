"""Deterministic reference values for the check suite.

Gauss-Hermite quadrature gives the ELBO of a low-dimensional model to near
machine precision (exactly, for a quadratic log-joint), and central finite
differences of it give reference gradients and Hessians.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from sosvi import family as fam
from sosvi.family import FamilyDescriptor
from sosvi.models import LogJointModel

MAX_QUADRATURE_DIM = 3


def quadrature_elbo(model: LogJointModel, family: FamilyDescriptor, params, order: int = 40) -> float:
    """``E_q[log p(theta, X)] + H(q)`` by a tensor Gauss-Hermite rule."""
    d = family.factor_count
    if d > MAX_QUADRATURE_DIM:
        raise ValueError(f"tensor quadrature limited to {MAX_QUADRATURE_DIM} dimensions, got {d}")
    mu, rho = family.unpack(params)
    nodes, weights = hermegauss(order)
    weights = weights / np.sqrt(2.0 * np.pi)
    z = np.array(list(itertools.product(nodes, repeat=d)))
    w = np.prod(np.array(list(itertools.product(weights, repeat=d))), axis=1)
    ell = np.asarray(model.log_joint(mu + np.exp(rho) * z), dtype=float)
    return float(w @ ell) + fam.entropy(family, params)


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a vector function, symmetrized when square."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    J = np.column_stack(cols)
    if J.shape[0] == J.shape[1]:
        J = 0.5 * (J + J.T)
    return J


def quadrature_gradient(model, family, params, h: float = 1e-5) -> np.ndarray:
    return fd_gradient(lambda p: quadrature_elbo(model, family, p), params, h)


def quadrature_hessian(model, family, params, h: float = 1e-4) -> np.ndarray:
    """Finite differences of the quadrature gradient."""
    return fd_jacobian(lambda p: quadrature_gradient(model, family, p), params, h)
