"""Solvers for the damped Newton system ``(lam * I - H) y = g``.

The solvers work on the curvature ``K = lam * I - H``, which is symmetric
positive definite near an ELBO maximum and for large enough ``lam``
everywhere.  ``H`` is always a factored curvature (block diagonal plus signed
rank-one terms) except in the dense oracles.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional, Union

import numpy as np
from scipy import linalg as sla

from sosvi.estimators import Curvature, structured_matvec

SM_DENOMINATOR_FLOOR = 1e-12
NEUMANN_DIVERGENCE_FACTOR = 1e6


class SingularUpdateError(np.linalg.LinAlgError):
    """A Sherman-Morrison denominator ``1 + v^T A^-1 u`` fell below the floor."""

    def __init__(self, denominator: float, index: Optional[int] = None) -> None:
        self.denominator = denominator
        self.index = index
        where = "" if index is None else f" at rank-one term {index}"
        super().__init__(
            f"singular Sherman-Morrison update{where}: 1 + v^T A^-1 u = {denominator:.3e}"
        )


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, block: int) -> None:
        self.block = block
        super().__init__(f"diagonal block {block} of lam*I - H is singular")


class IndefiniteCurvatureError(np.linalg.LinAlgError):
    """``K = lam * I - H`` is not positive definite; raise the damping.

    ``iteration`` is the CG iteration that exposed it, or ``None`` when a
    direct solver detected it.
    """

    def __init__(self, curvature: float, iteration: Optional[int] = None) -> None:
        self.curvature = curvature
        self.iteration = iteration
        where = "" if iteration is None else f" at CG iteration {iteration}"
        super().__init__(
            f"non-positive curvature {curvature:.3e}{where}; increase the damping lambda"
        )


class DivergedSeriesError(FloatingPointError):
    def __init__(self, step: int, ratio: float) -> None:
        self.step = step
        self.ratio = ratio
        super().__init__(
            f"Neumann series diverged at step {step} (|y|/|g| = {ratio:.3e}); use a larger C0"
        )


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CurvatureOperator:
    """Matrix-free linear map ``v -> K v``."""

    apply: Callable[[np.ndarray], np.ndarray]
    dim: int

    def __call__(self, v):
        return self.apply(np.asarray(v, dtype=float))

    @classmethod
    def from_curvature(cls, H: Curvature, damping: float = 0.0) -> "CurvatureOperator":
        if damping < 0:
            raise ValueError("damping must be non-negative")
        lam = float(damping)

        def apply(v):
            return lam * v - structured_matvec(H, v)

        return cls(apply, H.dim)

    @classmethod
    def from_dense(cls, A) -> "CurvatureOperator":
        A = np.asarray(A, dtype=float)
        return cls(lambda v: A @ v, A.shape[0])


def sherman_morrison_update(A_inv, u, v, floor: float = SM_DENOMINATOR_FLOOR) -> np.ndarray:
    """Return ``(A + u v^T)^-1`` given ``A^-1``, in O(d^2)."""
    A_inv = np.asarray(A_inv, dtype=float)
    Au = A_inv @ u
    vA = v @ A_inv
    denom = 1.0 + float(v @ Au)
    if abs(denom) <= floor:
        raise SingularUpdateError(denom)
    return A_inv - np.outer(Au, vA) / denom


def invert_structured(H: Curvature, damping: float = 0.0, order=None, return_det_sign: bool = False):
    """Dense inverse of ``damping * I - H`` by a cascade of rank-one updates.

    The block-diagonal base is inverted block by block; each signed term
    ``-w_i u_i u_i^T`` is then folded in with one Sherman-Morrison update.
    The diagonal blocks must be symmetric.
    ``order`` optionally permutes the rank-one terms.  With
    ``return_det_sign`` the sign of ``det(damping * I - H)`` is returned as
    well, tracked through the determinant lemma at no extra cost.
    """
    blocks = damping * np.eye(H.diag_blocks.shape[1]) - H.diag_blocks
    d, b, _ = blocks.shape
    K_inv = np.zeros((d * b, d * b))
    sign = 1.0
    for i, blk in enumerate(blocks):
        if not np.all(np.isfinite(blk)) or np.linalg.cond(blk) > 1e14:
            raise SingularBlockError(i)
        K_inv[i * b:(i + 1) * b, i * b:(i + 1) * b] = np.linalg.inv(blk)
        sign *= np.sign(np.linalg.det(blk))
    idx = range(len(H.weights)) if order is None else order
    # K and every intermediate inverse are symmetric, so u^T K^-1 = (K^-1 u)^T
    # and each update needs a single matrix-vector product
    for i in idx:
        u = H.directions[i]
        w = float(H.weights[i])
        Ku = K_inv @ u
        denom = 1.0 - w * float(u @ Ku)
        if abs(denom) <= SM_DENOMINATOR_FLOOR:
            raise SingularUpdateError(denom, int(i))
        K_inv += (w / denom) * np.outer(Ku, Ku)
        sign *= np.sign(denom)
    if return_det_sign:
        return K_inv, float(sign)
    return K_inv


class CGResult(NamedTuple):
    y: np.ndarray
    iters: int
    residual_norm: float


def conjugate_gradient(
    op: Union[CurvatureOperator, Callable[[np.ndarray], np.ndarray]],
    b,
    tol: float = 1e-10,
    max_iters: Optional[int] = None,
    x0=None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> CGResult:
    """Solve ``K y = b`` for SPD ``K`` using only matrix-vector products.

    Stops when ``|K y - b| <= tol * |b|`` or after ``max_iters`` iterations
    (default ``2 * dim``); hitting the cap is reported, not raised.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    max_iters = 2 * n if max_iters is None else int(max_iters)
    y = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - op(y) if x0 is not None else b.copy()
    b_norm = float(np.linalg.norm(b))
    target = tol * b_norm
    rr = float(r @ r)
    k = 0
    if b_norm == 0.0:
        return CGResult(np.zeros(n), 0, 0.0)
    p = r.copy()
    while np.sqrt(rr) > target and k < max_iters:
        Kp = op(p)
        pKp = float(p @ Kp)
        if pKp <= 0.0 or not np.isfinite(pKp):
            raise IndefiniteCurvatureError(pKp, k)
        alpha = rr / pKp
        y = y + alpha * p
        r = r - alpha * Kp
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
        if callback is not None:
            callback(k, y)
    return CGResult(y, k, float(np.linalg.norm(op(y) - b)))


class NeumannResult(NamedTuple):
    y: np.ndarray
    steps: int


def _curvature_stream(source) -> Callable[[], Curvature]:
    if callable(source):
        return source
    it = iter(source)
    return lambda: next(it)


def neumann_inverse_apply(
    curvature_source: Union[Callable[[], Curvature], Iterable[Curvature]],
    g,
    c0: float,
    damping: float = 0.0,
    tol: float = 1e-6,
    max_steps: int = 200,
    literal: bool = False,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> NeumannResult:
    """Stochastic truncated Neumann estimate of ``(damping * I - H)^-1 g``.

    Each step draws a fresh curvature ``X_j`` and applies
    ``y_j = g + y_{j-1} - (damping * y_{j-1} - X_j y_{j-1}) / c0``; the result
    is ``y_J / c0``.  With ``literal=True`` the update is
    ``y_j = g + y_{j-1} / c0 - K_j y_{j-1} / c0`` instead.
    """
    if c0 <= 0:
        raise ValueError("c0 must be positive")
    g = np.asarray(g, dtype=float)
    g_norm = float(np.linalg.norm(g))
    if g_norm == 0.0:
        return NeumannResult(np.zeros_like(g), 0)
    draw = _curvature_stream(curvature_source)
    keep = 1.0 / c0 if literal else 1.0
    y_prev = g.copy()
    y = y_prev
    j = 0
    for j in range(1, int(max_steps) + 1):
        X = draw()
        Ky = damping * y_prev - structured_matvec(X, y_prev)
        y = g + keep * y_prev - Ky / c0
        y_norm = float(np.linalg.norm(y))
        if not np.isfinite(y_norm) or y_norm > NEUMANN_DIVERGENCE_FACTOR * g_norm:
            raise DivergedSeriesError(j, y_norm / g_norm)
        if callback is not None:
            callback(j, y / c0)
        if float(np.linalg.norm(y - y_prev)) <= tol:
            break
        y_prev = y
    return NeumannResult(y / c0, j)


def _guarded(fn, *args):
    with warnings.catch_warnings(), np.errstate(divide="ignore", invalid="ignore"):
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            out = fn(*args)
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as err:
            raise SingularMatrixError(f"matrix is numerically singular: {err}") from None
    # scipy's diagonal fast path divides by zero instead of raising
    if not np.all(np.isfinite(out)):
        raise SingularMatrixError("matrix is numerically singular: non-finite solution")
    return out


def dense_solve(A, b) -> np.ndarray:
    """LU-pivoted solve; ill-conditioning past working precision is an error."""
    return _guarded(sla.solve, np.asarray(A, dtype=float), np.asarray(b, dtype=float))


def dense_invert(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return _guarded(sla.solve, A, np.eye(A.shape[0]))


def spectral_norm_estimate(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    steps: int = 20,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Power-iteration estimate of the largest |eigenvalue| of a symmetric operator."""
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(steps):
        w = apply(v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est
