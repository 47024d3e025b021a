"""Factorized variational families q(theta | gamma) = prod_i q_i(theta_i | gamma_i).

Parameters are stored as one flat vector.  Factor ``i`` owns the contiguous
slice ``[i * block_size, (i + 1) * block_size)``.  For the Gaussian factor the
block is ``(mu_i, rho_i)`` with standard deviation ``exp(rho_i)``.

Every function accepts either a single latent vector of shape ``(d,)`` or a
batch of shape ``(n, d)`` and returns results with the matching leading axis.
Block-diagonal matrices are returned as stacked dense blocks of shape
``(..., d, block_size, block_size)``; the off-block zeros are never stored.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

RHO_MIN = -20.0
RHO_MAX = 20.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)

SUPPORTED_KINDS = ("gaussian",)
_BLOCK_SIZES = {"gaussian": 2}


class DimensionError(ValueError):
    """Raised when parameter or sample shapes disagree with the family."""


class ClampCounter:
    """Thread-safe count of log-scale clamp events."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._count = 0

    def add(self, k: int) -> None:
        if k:
            with self._lock:
                self._count += int(k)

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


@dataclass(frozen=True)
class FamilyDescriptor:
    """Shape of a mean-field family.

    ``factor_kind`` is one tag per latent coordinate.  Only ``"gaussian"``
    (mean / log-scale) is implemented.
    """

    factor_count: int
    factor_kind: tuple[str, ...]
    clamps: ClampCounter = field(default_factory=ClampCounter, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.factor_count < 1:
            raise ValueError("factor_count must be a positive integer")
        if len(self.factor_kind) != self.factor_count:
            raise ValueError("need one factor_kind per factor")
        unknown = set(self.factor_kind) - set(SUPPORTED_KINDS)
        if unknown:
            raise ValueError(f"unsupported factor kind(s): {sorted(unknown)}")

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(_BLOCK_SIZES[k] for k in self.factor_kind)

    @property
    def block_size(self) -> int:
        sizes = set(self.block_sizes)
        if len(sizes) != 1:
            raise ValueError("mixed block sizes are not supported")
        return sizes.pop()

    @property
    def param_dim(self) -> int:
        return sum(self.block_sizes)

    def check_params(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if params.shape != (self.param_dim,):
            raise DimensionError(
                f"params has shape {params.shape}, family expects ({self.param_dim},)"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("variational parameters must be finite")
        return params

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim not in (1, 2) or theta.shape[-1] != self.factor_count:
            raise DimensionError(
                f"theta has shape {theta.shape}, family expects (..., {self.factor_count})"
            )
        return theta

    def blocks(self, params) -> np.ndarray:
        """View of the parameters as a ``(d, block_size)`` array."""
        return self.check_params(params).reshape(self.factor_count, self.block_size)

    def pack(self, mean, log_scale) -> np.ndarray:
        """Build a flat Gaussian parameter vector from per-factor means and log-scales."""
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.factor_count,))
        log_scale = np.broadcast_to(np.asarray(log_scale, dtype=float), (self.factor_count,))
        return np.column_stack([mean, log_scale]).ravel()

    def unpack(self, params) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(mean, log_scale)`` arrays."""
        b = self.blocks(params)
        return b[:, 0].copy(), b[:, 1].copy()


def gaussian_family(d: int) -> FamilyDescriptor:
    return FamilyDescriptor(d, ("gaussian",) * d)


def _mu_rho(family: FamilyDescriptor, params) -> tuple[np.ndarray, np.ndarray]:
    b = family.blocks(params)
    rho = b[:, 1]
    out = (rho < RHO_MIN) | (rho > RHO_MAX)
    family.clamps.add(np.count_nonzero(out))
    return b[:, 0], np.clip(rho, RHO_MIN, RHO_MAX)


def sample(family: FamilyDescriptor, params, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. latent vectors; returns shape ``(n, d)``.

    Draws consume ``rng.standard_normal((n, d))`` so the stream position after
    the call depends only on ``n`` and ``d``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"sample count must be a positive integer, got {n!r}")
    mu, rho = _mu_rho(family, params)
    z = rng.standard_normal((int(n), family.factor_count))
    return mu + np.exp(rho) * z


def log_density(family: FamilyDescriptor, params, theta) -> np.ndarray | float:
    theta = family.check_theta(theta)
    mu, rho = _mu_rho(family, params)
    r = theta - mu
    terms = -_HALF_LOG_2PI - rho - 0.5 * r * r * np.exp(-2.0 * rho)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def score(family: FamilyDescriptor, params, theta) -> np.ndarray:
    """Gradient of ``log_density`` with respect to the flat parameters."""
    theta = family.check_theta(theta)
    mu, rho = _mu_rho(family, params)
    r = theta - mu
    inv_var = np.exp(-2.0 * rho)
    out = np.stack([r * inv_var, r * r * inv_var - 1.0], axis=-1)
    return out.reshape(*theta.shape[:-1], family.param_dim)


def score_hessian_blocks(family: FamilyDescriptor, params, theta) -> np.ndarray:
    """Diagonal blocks of the Hessian of ``log_density``; shape ``(..., d, 2, 2)``."""
    theta = family.check_theta(theta)
    mu, rho = _mu_rho(family, params)
    r = theta - mu
    inv_var = np.exp(-2.0 * rho)
    off = -2.0 * r * inv_var
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = -inv_var
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    out[..., 1, 1] = -2.0 * r * r * inv_var
    return out


def entropy(family: FamilyDescriptor, params) -> float:
    _, rho = family.unpack(params)
    return float(np.sum(rho) + family.factor_count * _HALF_LOG_2PI_E)


def entropy_grad(family: FamilyDescriptor, params) -> np.ndarray:
    family.check_params(params)
    g = np.zeros((family.factor_count, 2))
    g[:, 1] = 1.0
    return g.ravel()


def entropy_hessian_blocks(family: FamilyDescriptor, params) -> np.ndarray:
    family.check_params(params)
    return np.zeros((family.factor_count, 2, 2))
