"""Monte Carlo estimators of the ELBO and its first two derivatives.

All estimators use the score-function (log-derivative) form, so the model is
only ever queried through ``log_joint``.  Every estimator accepts either an
explicit ``rng`` or falls back to ``np.random.default_rng(cfg.seed)``; the
optimizer passes one generator per step so that the gradient draws come first
and the Hessian draws second.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from sosvi import family as fam
from sosvi.family import DimensionError, FamilyDescriptor
from sosvi.models import LogJointModel

DENSE_DIM_LIMIT = 2000


class NonFiniteLogJointError(FloatingPointError):
    """The model returned a non-finite log-joint at a sampled point."""

    def __init__(self, sample: np.ndarray, value: float) -> None:
        self.sample = np.asarray(sample)
        self.value = value
        super().__init__(f"log_joint returned {value} at theta={self.sample.tolist()}")


@dataclass(frozen=True)
class EstimatorConfig:
    grad_samples: int = 1000
    hess_samples: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grad_samples < 1 or self.hess_samples < 1:
            raise ValueError("grad_samples and hess_samples must be >= 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    per_sample_logjoint: np.ndarray
    per_sample_terms: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class StructuredHessian:
    """``blockdiag(diag_blocks) + sum_i weights[i] * outer(directions[i], directions[i])``.

    ``weights`` are signed; a negative log-joint simply gives a negative weight.
    """

    diag_blocks: np.ndarray
    weights: np.ndarray
    directions: np.ndarray

    @property
    def dim(self) -> int:
        return self.diag_blocks.shape[0] * self.diag_blocks.shape[1]

    @property
    def rank_terms(self) -> list[tuple[float, np.ndarray]]:
        return [(float(w), u) for w, u in zip(self.weights, self.directions)]


@dataclass(frozen=True)
class PerSampleCurvature:
    """One unbiased Hessian sample in factored form.

    ``log_joint * outer(direction, direction) + blockdiag(diag_blocks)`` where
    ``diag_blocks`` already carries the log-joint factor and the entropy term.
    """

    log_joint: float
    direction: np.ndarray
    diag_blocks: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.log_joint])

    @property
    def directions(self) -> np.ndarray:
        return self.direction[None, :]

    @property
    def dim(self) -> int:
        return self.direction.shape[0]


Curvature = Union[StructuredHessian, PerSampleCurvature]


def _rng(cfg: EstimatorConfig, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return cfg.rng() if rng is None else rng


def _log_joint(model: LogJointModel, family: FamilyDescriptor, theta: np.ndarray) -> np.ndarray:
    if model.latent_dim != family.factor_count:
        raise DimensionError(
            f"model latent_dim {model.latent_dim} != family factor_count {family.factor_count}"
        )
    ell = np.asarray(model.log_joint(theta), dtype=float).reshape(theta.shape[0])
    bad = ~np.isfinite(ell)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteLogJointError(theta[i], float(ell[i]))
    return ell


def estimate_elbo(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
    n_samples: Optional[int] = None,
) -> float:
    """Mean log-joint over ``cfg.grad_samples`` draws plus the exact entropy."""
    params = family.check_params(params)
    theta = fam.sample(family, params, _rng(cfg, rng), n_samples or cfg.grad_samples)
    ell = _log_joint(model, family, theta)
    return float(np.mean(ell)) + fam.entropy(family, params)


def estimate_gradient(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
) -> GradientEstimate:
    params = family.check_params(params)
    theta = fam.sample(family, params, _rng(cfg, rng), cfg.grad_samples)
    ell = _log_joint(model, family, theta)
    terms = fam.score(family, params, theta) * ell[:, None]
    value = terms.mean(axis=0) + fam.entropy_grad(family, params)
    return GradientEstimate(value=value, per_sample_logjoint=ell, per_sample_terms=terms, sample_count=cfg.grad_samples)


def estimate_hessian_structured(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
) -> StructuredHessian:
    params = family.check_params(params)
    S = cfg.hess_samples
    theta = fam.sample(family, params, _rng(cfg, rng), S)
    ell = _log_joint(model, family, theta)
    u = fam.score(family, params, theta)
    hq = fam.score_hessian_blocks(family, params, theta)
    diag = np.einsum("s,sdij->dij", ell, hq) / S + fam.entropy_hessian_blocks(family, params)
    return StructuredHessian(diag_blocks=diag, weights=ell / S, directions=u)


def densify(H: Curvature) -> np.ndarray:
    """Dense symmetric rendering of a factored curvature.  Test and small-d use only."""
    blocks = H.diag_blocks
    d, b, _ = blocks.shape
    P = d * b
    M = np.zeros((P, P))
    for i in range(d):
        M[i * b:(i + 1) * b, i * b:(i + 1) * b] = blocks[i]
    U = H.directions
    M += (U.T * H.weights) @ U
    return 0.5 * (M + M.T)


def estimate_hessian_dense(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    cfg: EstimatorConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    if family.param_dim > DENSE_DIM_LIMIT:
        raise ValueError(
            f"parameter dimension {family.param_dim} exceeds dense limit {DENSE_DIM_LIMIT}"
        )
    return densify(estimate_hessian_structured(model, family, params, cfg, rng))


def sample_curvatures(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    rng: np.random.Generator,
    n: int,
) -> list[PerSampleCurvature]:
    """``n`` independent per-sample curvatures from one batched draw."""
    params = family.check_params(params)
    theta = fam.sample(family, params, rng, n)
    ell = _log_joint(model, family, theta)
    u = fam.score(family, params, theta)
    diag = fam.score_hessian_blocks(family, params, theta) * ell[:, None, None, None]
    diag = diag + fam.entropy_hessian_blocks(family, params)
    return [
        PerSampleCurvature(log_joint=float(ell[i]), direction=u[i], diag_blocks=diag[i])
        for i in range(n)
    ]


def sample_curvature(
    model: LogJointModel,
    family: FamilyDescriptor,
    params,
    rng: np.random.Generator,
) -> PerSampleCurvature:
    """One draw ``theta ~ q`` and its Hessian sample in factored form."""
    return sample_curvatures(model, family, params, rng, 1)[0]


def blockdiag_matvec(blocks: np.ndarray, v: np.ndarray) -> np.ndarray:
    d, b, _ = blocks.shape
    return np.einsum("dij,dj->di", blocks, v.reshape(d, b)).ravel()


def structured_matvec(H: Curvature, v) -> np.ndarray:
    """Apply a factored curvature to ``v`` in O(S * dim) without forming a matrix."""
    v = np.asarray(v, dtype=float)
    if v.shape != (H.dim,):
        raise DimensionError(f"vector has shape {v.shape}, operator dimension is {H.dim}")
    U = H.directions
    return blockdiag_matvec(H.diag_blocks, v) + U.T @ (H.weights * (U @ v))
