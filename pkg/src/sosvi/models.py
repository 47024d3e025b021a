"""Black-box log-joint models, with exact posteriors where conjugacy allows.

``log_joint`` callables are vectorized: a ``(d,)`` input gives a float, an
``(n, d)`` batch gives an ``(n,)`` array.  All densities keep their
normalizing constants, so ``log_evidence - KL(q || posterior)`` equals the ELBO.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla

from sosvi.family import FamilyDescriptor

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dataset:
    observations: np.ndarray
    targets: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        obs = np.atleast_2d(np.asarray(self.observations, dtype=float))
        object.__setattr__(self, "observations", obs)
        if self.targets is not None:
            t = np.asarray(self.targets, dtype=float).ravel()
            if t.shape[0] != obs.shape[0]:
                raise ValueError(
                    f"{obs.shape[0]} observation rows but {t.shape[0]} targets"
                )
            object.__setattr__(self, "targets", t)

    @classmethod
    def from_csv(cls, path, has_target: bool = True) -> "Dataset":
        """Read comma-separated reals; the last column is the target if ``has_target``.

        A first row that does not parse as numbers is treated as a header.
        """
        rows = []
        with open(Path(path), newline="") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError:
                    if i == 0 and not rows:
                        continue
                    raise ValueError(f"{path}: non-numeric value on line {i + 1}")
        if not rows:
            raise ValueError(f"{path}: no data rows")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ValueError(f"{path}: ragged rows (widths {sorted(widths)})")
        data = np.array(rows)
        if has_target:
            if data.shape[1] < 2:
                raise ValueError(f"{path}: need at least one feature column and a target")
            return cls(data[:, :-1], data[:, -1])
        return cls(data)


@dataclass(frozen=True)
class LogJointModel:
    name: str
    latent_dim: int
    log_joint: Callable[[np.ndarray], np.ndarray]
    exact_posterior: Optional[tuple[np.ndarray, np.ndarray]] = None
    log_evidence: Optional[float] = None

    def __call__(self, theta):
        return self.log_joint(theta)


def _gauss_logpdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def conjugate_gaussian(data, prior_mean: float, prior_var: float, noise_var: float) -> LogJointModel:
    """Unknown mean of Gaussian observations with known noise variance."""
    if prior_var <= 0 or noise_var <= 0:
        raise ValueError("prior_var and noise_var must be positive")
    x = np.asarray(data, dtype=float).ravel()
    n = x.size
    post_prec = 1.0 / prior_var + n / noise_var
    post_var = 1.0 / post_prec
    post_mean = post_var * (prior_mean / prior_var + x.sum() / noise_var)

    sum_x = x.sum()
    sum_x2 = float(x @ x)

    def log_joint(theta):
        theta = np.asarray(theta, dtype=float)
        t = theta[..., 0]
        # sum_j (x_j - t)^2 expanded so a batch of t costs O(1) per sample
        sq = sum_x2 - 2.0 * t * sum_x + n * t * t
        out = (
            _gauss_logpdf(t, prior_mean, prior_var)
            - 0.5 * n * (_LOG_2PI + math.log(noise_var))
            - 0.5 * sq / noise_var
        )
        return float(out) if np.ndim(out) == 0 else out

    # ln p(X) = ln p(theta, X) - ln p(theta | X) at any theta; use the posterior mean
    log_ev = float(log_joint(np.array([post_mean]))) + 0.5 * (_LOG_2PI + math.log(post_var))
    return LogJointModel(
        name="conjugate_gaussian",
        latent_dim=1,
        log_joint=log_joint,
        exact_posterior=(np.array([post_mean]), np.array([[post_var]])),
        log_evidence=log_ev,
    )


def bayes_linreg(design, targets, prior_precision: float, noise_var: float) -> LogJointModel:
    """Linear regression with an isotropic Gaussian prior on the weights."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("design must be a 2-d array with at least one column")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"design has {X.shape[0]} rows but {y.shape[0]} targets")
    if prior_precision <= 0 or noise_var <= 0:
        raise ValueError("prior_precision and noise_var must be positive")
    n, d = X.shape

    precision = prior_precision * np.eye(d) + X.T @ X / noise_var
    chol = sla.cho_factor(precision, lower=True)
    mean = sla.cho_solve(chol, X.T @ y / noise_var)
    cov = sla.cho_solve(chol, np.eye(d))
    cov = 0.5 * (cov + cov.T)
    logdet_prec = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))

    const = 0.5 * d * (math.log(prior_precision) - _LOG_2PI) - 0.5 * n * (_LOG_2PI + math.log(noise_var))

    # |y - X w|^2 = y^T y - 2 w^T X^T y + w^T X^T X w, so a batch costs O(d^2) per sample
    xtx = X.T @ X
    xty = X.T @ y
    yty = float(y @ y)

    def log_joint(w):
        w = np.asarray(w, dtype=float)
        sq = yty - 2.0 * (w @ xty) + np.sum((w @ xtx) * w, axis=-1)
        out = const - 0.5 * prior_precision * np.sum(w * w, axis=-1) - 0.5 * sq / noise_var
        return float(out) if np.ndim(out) == 0 else out

    log_ev = float(log_joint(mean)) + 0.5 * (d * _LOG_2PI - logdet_prec)
    return LogJointModel(
        name="bayes_linreg",
        latent_dim=d,
        log_joint=log_joint,
        exact_posterior=(mean, cov),
        log_evidence=log_ev,
    )


def bayes_logreg(design, labels, prior_precision: float) -> LogJointModel:
    """Logistic regression; no closed-form posterior."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("design must be a 2-d array with at least one column")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"design has {X.shape[0]} rows but {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if prior_precision <= 0:
        raise ValueError("prior_precision must be positive")
    d = X.shape[1]
    const = 0.5 * d * (math.log(prior_precision) - _LOG_2PI)

    def log_joint(w):
        w = np.asarray(w, dtype=float)
        z = w @ X.T
        # y log s(z) + (1-y) log(1-s(z)) = y z - log(1 + e^z)
        lik = np.sum(y * z - np.logaddexp(0.0, z), axis=-1)
        out = const - 0.5 * prior_precision * np.sum(w * w, axis=-1) + lik
        return float(out) if np.ndim(out) == 0 else out

    return LogJointModel(name="bayes_logreg", latent_dim=d, log_joint=log_joint)


def exact_kl_to_posterior(family: FamilyDescriptor, params, model: LogJointModel) -> float:
    """KL(q || p(theta | X)) for a mean-field Gaussian q and a Gaussian posterior."""
    if model.exact_posterior is None:
        raise ValueError(f"model {model.name!r} has no exact posterior")
    if set(family.factor_kind) != {"gaussian"}:
        raise ValueError("exact KL needs a Gaussian mean-field family")
    if family.factor_count != model.latent_dim:
        raise ValueError("family and model latent dimensions differ")
    mu, rho = family.unpack(params)
    m, cov = model.exact_posterior
    d = mu.size
    chol = sla.cho_factor(cov, lower=True)
    q_var = np.exp(2.0 * rho)
    prec_diag = np.diag(sla.cho_solve(chol, np.eye(d)))
    diff = m - mu
    maha = float(diff @ sla.cho_solve(chol, diff))
    logdet_cov = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    kl = 0.5 * (float(prec_diag @ q_var) + maha - d + logdet_cov - 2.0 * float(np.sum(rho)))
    return max(kl, 0.0)


# ---------------------------------------------------------------------------
# Synthetic data for the bundled benchmarks
# ---------------------------------------------------------------------------

#: Noise variance at which a Gaussian log-likelihood term averages to zero
#: (-0.5 * log(2 pi s^2) - 0.5 = 0).  Keeping |log p(theta, X)| small near the
#: posterior keeps score-function estimators usable.
UNIT_ENTROPY_NOISE_VAR = 1.0 / (2.0 * math.pi * math.e)


def synthetic_gaussian_data(n: int, true_mean: float, noise_var: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return true_mean + math.sqrt(noise_var) * rng.standard_normal(n)


def synthetic_linreg_data(
    n: int, d: int, noise_var: float, seed: int, weight_scale: float = 0.5, orthogonal: bool = True
) -> Dataset:
    """Design, weights and noisy targets.

    With ``orthogonal`` the design satisfies ``X^T X = n I`` so the posterior
    covariance is diagonal and a mean-field family can match it exactly.
    """
    if n < d:
        raise ValueError("need n >= d")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    if orthogonal:
        q, _ = np.linalg.qr(X)
        X = q * math.sqrt(n)
    w = weight_scale * rng.standard_normal(d)
    y = X @ w + math.sqrt(noise_var) * rng.standard_normal(n)
    return Dataset(X, y)


def synthetic_logreg_data(n: int, d: int, seed: int, weight_scale: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = weight_scale * rng.standard_normal(d)
    p = 1.0 / (1.0 + np.exp(-(X @ w)))
    y = (rng.random(n) < p).astype(float)
    return Dataset(X, y)
