"""Registered invariants behind ``sosvi check``.

Each check returns a :class:`CheckResult` whose ``margin`` is the observed
error divided by its tolerance, so a check passes iff ``margin <= 1``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from sosvi import family as fam
from sosvi import linalg
from sosvi.estimators import (
    EstimatorConfig,
    StructuredHessian,
    densify,
    estimate_gradient,
    estimate_hessian_dense,
    estimate_hessian_structured,
    structured_matvec,
)
from sosvi.family import gaussian_family
from sosvi.models import (
    UNIT_ENTROPY_NOISE_VAR,
    conjugate_gaussian,
    exact_kl_to_posterior,
    synthetic_gaussian_data,
)
from sosvi.optimizer import ConvergenceCriterion, QuadraticObjective, StepControl, run
from sosvi.oracles import fd_gradient, fd_jacobian, quadrature_elbo, quadrature_gradient, quadrature_hessian


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str
    seconds: float = 0.0


_REGISTRY: dict[str, Callable[[], tuple[float, str]]] = {}


def register(name: str):
    def deco(fn):
        _REGISTRY[name] = fn
        return fn

    return deco


def registered() -> list[str]:
    return list(_REGISTRY)


def reference_model():
    """Conjugate Gaussian used by the stochastic checks (n = 20)."""
    nv = UNIT_ENTROPY_NOISE_VAR
    return conjugate_gaussian(synthetic_gaussian_data(20, 1.0, nv, 123), 0.0, 1.0, nv)


def reference_points(model) -> list[np.ndarray]:
    """Five parameter points around the exact posterior."""
    m = float(model.exact_posterior[0][0])
    r = 0.5 * float(np.log(model.exact_posterior[1][0, 0]))
    offsets = [(0.0, 0.0), (0.05, 0.0), (-0.1, 0.5), (0.0, -0.5), (0.1, 1.0)]
    return [np.array([m + a, r + b]) for a, b in offsets]


def _random_spd_structured(rng, d_factors, S, shift=1.0):
    """Structured H with ``K = lam I - H`` SPD; returns ``(H, lam)``."""
    blocks = rng.standard_normal((d_factors, 2, 2))
    blocks = -(blocks @ blocks.transpose(0, 2, 1)) - shift * np.eye(2)
    U = rng.standard_normal((S, 2 * d_factors))
    w = -rng.uniform(0.1, 1.0, S)
    return StructuredHessian(blocks, w, U), 0.5


@register("family-derivatives")
def _family_derivatives():
    rng = np.random.default_rng(1)
    f = gaussian_family(3)
    worst = 0.0
    for _ in range(100):
        p = rng.uniform(-3, 3, f.param_dim)
        p[1::2] = rng.uniform(-1, 1, 3)
        th = rng.uniform(-3, 3, 3)
        s_fd = fd_gradient(lambda q: fam.log_density(f, q, th), p, 1e-6)
        s = fam.score(f, p, th)
        H_fd = fd_jacobian(lambda q: fam.score(f, q, th), p, 1e-6)
        blocks = fam.score_hessian_blocks(f, p, th)
        H = np.zeros((6, 6))
        for i in range(3):
            H[2 * i:2 * i + 2, 2 * i:2 * i + 2] = blocks[i]
        err = max(
            np.max(np.abs(s - s_fd)) / max(1.0, np.max(np.abs(s))),
            np.max(np.abs(H - H_fd)) / max(1.0, np.max(np.abs(H))),
        )
        worst = max(worst, err)
    return worst / 1e-5, f"max relative error {worst:.2e} (tol 1e-5, 100 points)"


@register("entropy-derivatives")
def _entropy_derivatives():
    rng = np.random.default_rng(2)
    f = gaussian_family(4)
    worst = 0.0
    for _ in range(20):
        p = rng.uniform(-3, 3, f.param_dim)
        g_fd = fd_gradient(lambda q: fam.entropy(f, q), p, 1e-4)
        worst = max(worst, float(np.max(np.abs(fam.entropy_grad(f, p) - g_fd))))
        worst = max(worst, float(np.max(np.abs(fam.entropy_hessian_blocks(f, p)))))
    return worst / 1e-8, f"max abs error {worst:.2e} (tol 1e-8)"


@register("score-identity")
def _score_identity():
    f = gaussian_family(2)
    p = np.array([0.3, -0.2, -1.0, 0.4])
    th = fam.sample(f, p, np.random.default_rng(3), 100_000)
    s = fam.score(f, p, th)
    z = np.abs(s.mean(axis=0)) / (s.std(axis=0, ddof=1) / np.sqrt(len(s)))
    return float(z.max()) / 4.0, f"max |z| {z.max():.2f} (tol 4, n=1e5)"


@register("gradient-consistency")
def _gradient_consistency():
    model = reference_model()
    f = gaussian_family(1)
    cfg = EstimatorConfig(grad_samples=500, hess_samples=500)
    rng = np.random.default_rng(4)
    worst = 0.0
    for p in reference_points(model):
        est = np.array([estimate_gradient(model, f, p, cfg, rng).value for _ in range(200)])
        se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        z = np.abs(est.mean(axis=0) - quadrature_gradient(model, f, p)) / se
        worst = max(worst, float(z.max()))
    return worst / 4.0, f"max |z| {worst:.2f} over 5 points (tol 4, 200 x T=500)"


@register("hessian-consistency")
def _hessian_consistency():
    model = reference_model()
    f = gaussian_family(1)
    cfg = EstimatorConfig(grad_samples=500, hess_samples=500)
    rng = np.random.default_rng(5)
    worst = 0.0
    for p in reference_points(model):
        est = np.array([estimate_hessian_dense(model, f, p, cfg, rng) for _ in range(200)])
        se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        z = np.abs(est.mean(axis=0) - quadrature_hessian(model, f, p)) / se
        worst = max(worst, float(z.max()))
    return worst / 4.0, f"max |z| {worst:.2f} over 5 points (tol 4, 200 x S=500)"


@register("structure-equivalence")
def _structure_equivalence():
    model = reference_model()
    f = gaussian_family(1)
    worst_bits = 0.0
    for seed in range(5):
        cfg = EstimatorConfig(grad_samples=8, hess_samples=8, seed=seed)
        a = densify(estimate_hessian_structured(model, f, [0.8, -2.0], cfg))
        b = estimate_hessian_dense(model, f, [0.8, -2.0], cfg)
        worst_bits = max(worst_bits, float(np.max(np.abs(a - b))))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 26))
        S = int(rng.integers(1, 9))
        b = rng.standard_normal((d, 2, 2))
        H = StructuredHessian(b + b.transpose(0, 2, 1), rng.standard_normal(S), rng.standard_normal((S, 2 * d)))
        v = rng.standard_normal(2 * d)
        ref = densify(H) @ v
        worst = max(worst, float(np.linalg.norm(structured_matvec(H, v) - ref) / np.linalg.norm(ref)))
    margin = np.inf if worst_bits > 0 else worst / 1e-10
    return margin, f"dense/structured max diff {worst_bits:.1e} (must be 0); matvec rel err {worst:.2e} (tol 1e-10)"


@register("sherman-morrison")
def _sherman_morrison():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        H, lam = _random_spd_structured(rng, 10, 5)
        K = lam * np.eye(20) - densify(H)
        ref = linalg.dense_invert(K)
        got = linalg.invert_structured(H, lam)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    return worst / 1e-8, f"max relative Frobenius error {worst:.2e} (tol 1e-8)"


@register("conjugate-gradient")
def _conjugate_gradient():
    rng = np.random.default_rng(8)
    worst = 0.0
    worst_iters = 0
    for _ in range(50):
        H, lam = _random_spd_structured(rng, 25, 4)
        g = rng.standard_normal(50)
        ref = linalg.dense_solve(lam * np.eye(50) - densify(H), g)
        res = linalg.conjugate_gradient(linalg.CurvatureOperator.from_curvature(H, lam), g, tol=1e-12)
        worst = max(worst, float(np.max(np.abs(res.y - ref))))
        worst_iters = max(worst_iters, res.iters)
    margin = max(worst / 1e-8, worst_iters / 55)
    return margin, f"max abs error {worst:.2e} (tol 1e-8); max iterations {worst_iters} (limit 55)"


@register("neumann-series")
def _neumann_series():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(10):
        Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        evals = rng.uniform(0.5, 2.0, 10)
        A = (Q * evals) @ Q.T
        H = QuadraticObjective(A, np.zeros(10)).structured_hessian(None)
        g = rng.standard_normal(10)
        res = linalg.neumann_inverse_apply(lambda: H, g, c0=2.5, tol=0.0, max_steps=500)
        worst = max(worst, float(np.max(np.abs(res.y - linalg.dense_solve(A, g)))))
    return worst / 1e-6, f"max abs error {worst:.2e} at T_max=500 (tol 1e-6)"


@register("newton-exactness")
def _newton_exactness():
    rng = np.random.default_rng(10)
    worst = 0.0
    crit = ConvergenceCriterion(max_iterations=1, grad_norm_tol=None, param_tol=None)
    for d in (2, 10):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        evals = rng.uniform(0.5, 2.0, d)
        obj = QuadraticObjective((Q * evals) @ Q.T, rng.standard_normal(d))
        for scheme, ctl in (
            ("dense-newton", StepControl(max_step_norm=1e6)),
            ("scheme1-sm", StepControl(max_step_norm=1e6)),
            ("scheme1-cg", StepControl(max_step_norm=1e6)),
            ("scheme2", StepControl(max_step_norm=1e6, c0=2.2, neumann_tol=0.0, neumann_max_steps=2000)),
        ):
            res = run(scheme, obj, np.zeros(d), ctl, crit)
            worst = max(worst, float(np.max(np.abs(res.params - obj.optimum))))
    return worst / 1e-6, f"max distance to optimum after one step {worst:.2e} (tol 1e-6)"


@register("evidence-identity")
def _evidence_identity():
    model = reference_model()
    f = gaussian_family(1)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(10):
        p = np.array([rng.uniform(-1, 2), rng.uniform(-4, 0)])
        gap = quadrature_elbo(model, f, p) + exact_kl_to_posterior(f, p, model) - model.log_evidence
        worst = max(worst, abs(gap) / abs(model.log_evidence))
    return worst / 1e-6, f"max relative gap {worst:.2e} (tol 1e-6)"


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name in names or registered():
        t0 = time.perf_counter()
        try:
            margin, detail = _REGISTRY[name]()
            passed = bool(np.isfinite(margin) and margin <= 1.0)
        except Exception as err:  # a crashing check is a failed check
            margin, detail, passed = float("inf"), f"raised {type(err).__name__}: {err}", False
        results.append(CheckResult(name, passed, float(margin), detail, time.perf_counter() - t0))
    return results
