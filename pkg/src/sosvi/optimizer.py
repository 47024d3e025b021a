"""Outer optimization loops: first-order ascent and three Newton-type schemes.

Every scheme maximizes the ELBO.  Second-order steps solve
``(lam * I - H) y = g`` and move ``params + step_size * y``; with ``lam = 0``
and a negative definite ``H`` this is the plain Newton step.

Steps talk to an *objective* rather than to a model directly, so the same
code runs on Monte Carlo estimates (``MonteCarloObjective``) and on exact
quadratics (``QuadraticObjective``) used to check Newton exactness.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from sosvi import linalg
from sosvi.estimators import (
    EstimatorConfig,
    StructuredHessian,
    densify,
    estimate_elbo,
    estimate_gradient,
    estimate_hessian_structured,
    _log_joint,
    sample_curvatures,
)
from sosvi import family as fam
from sosvi.family import FamilyDescriptor
from sosvi.models import LogJointModel, exact_kl_to_posterior

log = logging.getLogger(__name__)

SCHEMES = ("first-order", "dense-newton", "scheme1-sm", "scheme1-cg", "scheme2")
C0_RULES = ("rms", "mean")
# default multiplier on the pilot curvature scale, per C0 rule
C0_FACTORS = {"rms": 3.0, "mean": 10.0}

_CURVATURE_ERRORS = (
    linalg.IndefiniteCurvatureError,
    linalg.SingularMatrixError,
    linalg.SingularBlockError,
    linalg.SingularUpdateError,
)


class CurvatureFailure(np.linalg.LinAlgError):
    """Curvature stayed unusable after damping escalation reached its cap."""


class RunAborted(RuntimeError):
    def __init__(self, cause: BaseException, params: np.ndarray, trace: list) -> None:
        self.cause = cause
        self.params = params
        self.trace = trace
        super().__init__(f"run aborted after {len(trace)} iterations: {cause}")


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


class MonteCarloObjective:
    """Score-function estimates of the ELBO for ``model`` under ``family``."""

    def __init__(self, model: LogJointModel, family: FamilyDescriptor, cfg: EstimatorConfig) -> None:
        if model.latent_dim != family.factor_count:
            raise ValueError("model and family latent dimensions differ")
        self.model = model
        self.family = family
        self.cfg = cfg

    @property
    def dim(self) -> int:
        return self.family.param_dim

    def gradient(self, params, rng) -> np.ndarray:
        return estimate_gradient(self.model, self.family, params, self.cfg, rng).value

    def structured_hessian(self, params, rng) -> StructuredHessian:
        return estimate_hessian_structured(self.model, self.family, params, self.cfg, rng)

    def dense_hessian(self, params, rng) -> np.ndarray:
        return densify(self.structured_hessian(params, rng))

    def curvature_sampler(self, params, rng, chunk: int = 32):
        """Zero-argument callable returning one fresh ``PerSampleCurvature`` per call.

        Draws are made ``chunk`` at a time; the values equal those of
        one-at-a-time ``sample_curvature`` calls on the same stream.
        """
        buf: list = []

        def draw():
            if not buf:
                buf.extend(reversed(sample_curvatures(self.model, self.family, params, rng, chunk)))
            return buf.pop()

        return draw

    def elbo(self, params, rng, n_samples: Optional[int] = None) -> float:
        return estimate_elbo(self.model, self.family, params, self.cfg, rng, n_samples)

    def kl(self, params) -> Optional[float]:
        if self.model.exact_posterior is None:
            return None
        return exact_kl_to_posterior(self.family, params, self.model)


class QuadraticObjective:
    """Deterministic ``L(x) = -0.5 (x - x*)^T A (x - x*)`` with SPD ``A``.

    The Hessian ``-A`` is handed out in factored form so the structured
    solvers see exactly the same operator as the dense path: half the
    smallest eigenvalue sits in the 1x1 diagonal blocks (keeping the
    Sherman-Morrison base invertible at zero damping) and the remainder of
    the spectrum comes as signed rank-one terms.
    """

    def __init__(self, A, optimum) -> None:
        A = np.asarray(A, dtype=float)
        self.A = 0.5 * (A + A.T)
        self.optimum = np.asarray(optimum, dtype=float)
        evals, evecs = np.linalg.eigh(self.A)
        if evals[0] <= 0:
            raise ValueError("A must be positive definite")
        shift = 0.5 * evals[0]
        self._hessian = StructuredHessian(
            diag_blocks=np.full((self.dim, 1, 1), -shift),
            weights=-(evals - shift),
            directions=evecs.T.copy(),
        )

    @property
    def dim(self) -> int:
        return self.optimum.shape[0]

    def gradient(self, params, rng=None) -> np.ndarray:
        return -self.A @ (np.asarray(params, dtype=float) - self.optimum)

    def structured_hessian(self, params, rng=None) -> StructuredHessian:
        return self._hessian

    def dense_hessian(self, params, rng=None) -> np.ndarray:
        return -self.A

    def curvature_sampler(self, params, rng=None):
        return lambda: self._hessian

    def elbo(self, params, rng=None, n_samples=None) -> float:
        r = np.asarray(params, dtype=float) - self.optimum
        return -0.5 * float(r @ self.A @ r)

    def kl(self, params) -> Optional[float]:
        return None


Objective = Union[MonteCarloObjective, QuadraticObjective]


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepControl:
    """Step size, damping and scheme-specific knobs.

    ``step_size=None`` means 1.0 for Newton-type schemes; the first-order
    scheme requires it explicitly.  ``c0`` is ``"auto"`` or a positive float.
    """

    step_size: Optional[float] = None
    damping: float = 0.0
    damping_floor: float = 1e-3
    damping_max: float = 1e6
    c0: Union[str, float] = "auto"
    c0_factor: Optional[float] = None
    c0_refresh: bool = True
    c0_rule: str = "rms"
    neumann_retries: int = 3
    power_steps: int = 20
    max_step_norm: float = 0.5
    neumann_tol: Optional[float] = None
    neumann_max_steps: int = 200
    neumann_literal: bool = False
    cg_tol: float = 1e-10
    cg_max_iters: Optional[int] = None

    def __post_init__(self) -> None:
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")
        if self.max_step_norm <= 0:
            raise ValueError("max_step_norm must be positive")
        if self.c0_rule not in C0_RULES:
            raise ValueError(f"c0_rule must be one of {C0_RULES}, got {self.c0_rule!r}")
        if self.c0_factor is not None and self.c0_factor <= 0:
            raise ValueError("c0_factor must be positive")
        if not (self.c0 == "auto" or (isinstance(self.c0, (int, float)) and self.c0 > 0)):
            raise ValueError("c0 must be 'auto' or a positive number")


@dataclass(frozen=True)
class ConvergenceCriterion:
    grad_norm_tol: Optional[float] = 1e-3
    param_tol: Optional[float] = 1e-8
    max_iterations: int = 1000
    window: int = 5
    # oracle stop: end the run once the exact KL is at or below this value
    kl_tol: Optional[float] = None

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class TraceRecord:
    iteration: int
    elbo_estimate: float
    grad_norm: float
    kl_exact: Optional[float]
    step_norm: float
    wallclock_ms: float
    scheme_specific: dict = field(default_factory=dict)


@dataclass
class OptimizerState:
    params: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    c0: Optional[float] = None


@dataclass
class StepResult:
    params: np.ndarray
    grad: np.ndarray
    step_norm: float
    diagnostics: dict


def _clip(step: np.ndarray, max_norm: float) -> tuple[np.ndarray, bool]:
    n = float(np.linalg.norm(step))
    if n > max_norm:
        return step * (max_norm / n), True
    return step, False


def _finish(state: OptimizerState, g: np.ndarray, direction: np.ndarray, eps: float, ctl: StepControl, diag: dict) -> StepResult:
    if not np.all(np.isfinite(direction)):
        raise FloatingPointError("non-finite step direction")
    step, clipped = _clip(eps * direction, ctl.max_step_norm)
    diag["clipped"] = int(clipped)
    return StepResult(state.params + step, g, float(np.linalg.norm(step)), diag)


def _gradient(objective: Objective, state: OptimizerState) -> np.ndarray:
    g = np.asarray(objective.gradient(state.params, state.rng), dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient estimate")
    return g


def _escalate(solve: Callable[[float], np.ndarray], ctl: StepControl) -> tuple[np.ndarray, float]:
    """Call ``solve(lam)``, multiplying ``lam`` by 10 on curvature failures."""
    lam = ctl.damping
    while True:
        try:
            return solve(lam), lam
        except _CURVATURE_ERRORS as err:
            nxt = max(10.0 * lam, ctl.damping_floor)
            if nxt > ctl.damping_max:
                raise CurvatureFailure(f"curvature unusable at damping {lam:g}: {err}") from err
            log.debug("damping %g -> %g after %s", lam, nxt, err)
            lam = nxt


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def step_first_order(state: OptimizerState, objective: Objective, ctl: StepControl) -> StepResult:
    if ctl.step_size is None:
        raise ValueError("first-order steps need an explicit step_size")
    g = _gradient(objective, state)
    return _finish(state, g, g, ctl.step_size, ctl, {})


def step_dense_newton(state: OptimizerState, objective: Objective, ctl: StepControl) -> StepResult:
    g = _gradient(objective, state)
    H = objective.dense_hessian(state.params, state.rng)
    eye = np.eye(H.shape[0])

    def solve(lam):
        K = lam * eye - H
        try:
            np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            raise linalg.IndefiniteCurvatureError(float(np.linalg.eigvalsh(K)[0]), None) from None
        return linalg.dense_solve(K, g)

    y, lam = _escalate(solve, ctl)
    return _finish(state, g, y, ctl.step_size or 1.0, ctl, {"damping": lam})


def _sm_solve(H: StructuredHessian, g: np.ndarray, lam: float) -> np.ndarray:
    # det(K) > 0 and g^T K^-1 g > 0 are necessary for SPD K (sufficient when
    # dim <= 2); an even number of negative eigenvalues can still slip through
    K_inv, sign = linalg.invert_structured(H, lam, return_det_sign=True)
    y = K_inv @ g
    if sign <= 0 or float(g @ y) <= 0.0:
        raise linalg.IndefiniteCurvatureError(float(g @ y) if sign > 0 else sign, None)
    return y


def step_scheme1(state: OptimizerState, objective: Objective, ctl: StepControl, option: str = "cg") -> StepResult:
    """Structured Hessian, solved by Sherman-Morrison (``"sm"``) or CG (``"cg"``)."""
    if option not in ("sm", "cg"):
        raise ValueError(f"option must be 'sm' or 'cg', got {option!r}")
    g = _gradient(objective, state)
    H = objective.structured_hessian(state.params, state.rng)
    diag: dict = {}

    if option == "sm":
        y, lam = _escalate(lambda lam: _sm_solve(H, g, lam), ctl)
    else:

        def solve(lam):
            op = linalg.CurvatureOperator.from_curvature(H, lam)
            res = linalg.conjugate_gradient(op, g, tol=ctl.cg_tol, max_iters=ctl.cg_max_iters)
            diag["cg_iters"] = res.iters
            return res.y

        y, lam = _escalate(solve, ctl)
    diag["damping"] = lam
    return _finish(state, g, y, ctl.step_size or 1.0, ctl, diag)


def per_sample_norm_bounds(model, family, params, rng, n: int) -> np.ndarray:
    """Spectral-norm upper bounds ``|l| (|u|^2 + max_block |h|)`` for ``n`` fresh samples."""
    theta = fam.sample(family, params, rng, n)
    ell = _log_joint(model, family, theta)
    u = fam.score(family, params, theta)
    hq = fam.score_hessian_blocks(family, params, theta)
    # Frobenius norms bound the block spectral norms from above
    block = np.sqrt(np.einsum("...ij,...ij->...", hq, hq)).max(axis=-1)
    ent_blocks = fam.entropy_hessian_blocks(family, params)
    ent = float(np.sqrt(np.einsum("...ij,...ij->...", ent_blocks, ent_blocks)).max())
    return np.abs(ell) * (np.einsum("ij,ij->i", u, u) + block) + ent


def resolve_c0(state: OptimizerState, objective: Objective, ctl: StepControl) -> float:
    """Explicit ``ctl.c0``, or ``c0_factor`` times a pilot curvature scale.

    ``c0_rule="rms"`` (default, factor 3) uses the root-mean-square of
    per-sample norm bounds over ``hess_samples`` pilot draws, which keeps the
    stochastic recursion stable when single samples are much larger than
    their mean.  ``"mean"`` (factor 10) uses a power-iteration norm of a pilot
    structured estimate.
    """
    if ctl.c0 != "auto":
        return float(ctl.c0)
    if ctl.c0_rule == "rms" and isinstance(objective, MonteCarloObjective):
        norms = per_sample_norm_bounds(
            objective.model, objective.family, state.params, state.rng, objective.cfg.hess_samples
        )
        est = float(np.sqrt(np.mean(norms**2))) + ctl.damping
    else:
        H = objective.structured_hessian(state.params, state.rng)
        op = linalg.CurvatureOperator.from_curvature(H, ctl.damping)
        est = linalg.spectral_norm_estimate(op.apply, op.dim, ctl.power_steps, state.rng)
    factor = ctl.c0_factor if ctl.c0_factor is not None else C0_FACTORS[ctl.c0_rule]
    return factor * max(est, 1e-8)


def step_scheme2(state: OptimizerState, objective: Objective, ctl: StepControl) -> StepResult:
    """Neumann-series inverse-Hessian application with fresh per-sample curvature.

    With ``c0="auto"`` and ``c0_refresh`` the scaling constant is re-estimated
    at every outer step; otherwise it is fixed at the first step.  A diverged
    series multiplies ``c0`` by 10 and retries, at most ``neumann_retries``
    times.
    """
    g = _gradient(objective, state)
    if state.c0 is None or (ctl.c0 == "auto" and ctl.c0_refresh):
        state.c0 = resolve_c0(state, objective, ctl)
    g_norm = float(np.linalg.norm(g))
    tol = ctl.neumann_tol if ctl.neumann_tol is not None else 1e-6 * g_norm
    draw = objective.curvature_sampler(state.params, state.rng)
    retries = 0
    while True:
        try:
            res = linalg.neumann_inverse_apply(
                draw, g, state.c0, ctl.damping, tol, ctl.neumann_max_steps, ctl.neumann_literal
            )
            break
        except linalg.DivergedSeriesError as err:
            if retries >= ctl.neumann_retries:
                raise
            log.debug("Neumann series diverged (%s); c0 %g -> %g", err, state.c0, 10 * state.c0)
            state.c0 *= 10.0
            retries += 1
    diag = {"neumann_steps": res.steps, "c0": state.c0, "damping": ctl.damping}
    return _finish(state, g, res.y, ctl.step_size or 1.0, ctl, diag)


def make_step(scheme: str) -> Callable[[OptimizerState, Objective, StepControl], StepResult]:
    if scheme == "first-order":
        return step_first_order
    if scheme == "dense-newton":
        return step_dense_newton
    if scheme == "scheme1-sm":
        return lambda s, o, c: step_scheme1(s, o, c, "sm")
    if scheme == "scheme1-cg":
        return lambda s, o, c: step_scheme1(s, o, c, "cg")
    if scheme == "scheme2":
        return step_scheme2
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}")


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    params: np.ndarray
    trace: list[TraceRecord]
    c0: Optional[float] = None
    stopped_by: str = "max_iterations"


def run(
    scheme: str,
    objective: Objective,
    params0,
    ctl: StepControl,
    criterion: ConvergenceCriterion,
    seed: int = 0,
    elbo_samples: Optional[int] = None,
) -> RunResult:
    """Iterate ``scheme`` from ``params0`` until ``criterion`` fires.

    The optimization stream and the trace-ELBO stream are independent children
    of ``seed``, so the number of ELBO samples never changes the iterates.
    """
    step = make_step(scheme)
    params = np.array(params0, dtype=float)
    if params.shape != (objective.dim,):
        raise ValueError(f"params0 has shape {params.shape}, expected ({objective.dim},)")
    opt_seq, elbo_seq = np.random.SeedSequence(seed).spawn(2)
    state = OptimizerState(params=params, rng=np.random.default_rng(opt_seq))
    elbo_rng = np.random.default_rng(elbo_seq)
    trace: list[TraceRecord] = []
    norms: deque = deque(maxlen=criterion.window)
    stopped_by = "max_iterations"

    for it in range(1, criterion.max_iterations + 1):
        t0 = time.perf_counter()
        try:
            res = step(state, objective, ctl)
        except Exception as err:
            raise RunAborted(err, state.params, trace) from err
        elapsed = 1e3 * (time.perf_counter() - t0)
        state.params = res.params
        state.iteration = it
        gnorm = float(np.linalg.norm(res.grad))
        norms.append(gnorm)
        try:
            elbo = objective.elbo(state.params, elbo_rng, elbo_samples)
        except Exception as err:
            raise RunAborted(err, state.params, trace) from err
        trace.append(
            TraceRecord(
                iteration=it,
                elbo_estimate=elbo,
                grad_norm=gnorm,
                kl_exact=objective.kl(state.params),
                step_norm=res.step_norm,
                wallclock_ms=elapsed,
                scheme_specific=res.diagnostics,
            )
        )
        kl = trace[-1].kl_exact
        if criterion.kl_tol is not None and kl is not None and kl <= criterion.kl_tol:
            stopped_by = "kl_tol"
            break
        if (
            criterion.grad_norm_tol is not None
            and len(norms) == criterion.window
            and sum(norms) / len(norms) <= criterion.grad_norm_tol
        ):
            stopped_by = "grad_norm"
            break
        if criterion.param_tol is not None and res.step_norm <= criterion.param_tol:
            stopped_by = "param_tol"
            break
    return RunResult(state.params, trace, state.c0, stopped_by)


def iterations_to_threshold(trace: list[TraceRecord], kl_threshold: float = 1e-2) -> Optional[int]:
    """First iteration whose exact KL is at or below the threshold, else ``None``."""
    for rec in trace:
        if rec.kl_exact is not None and rec.kl_exact <= kl_threshold:
            return rec.iteration
    return None


def default_init(family: FamilyDescriptor) -> np.ndarray:
    """Standard-normal start: zero means, zero log-scales."""
    return np.zeros(family.param_dim)
