import numpy as np
import pytest

from conftest import quad_elbo_1d
from sosvi.estimators import EstimatorConfig
from sosvi.family import gaussian_family
from sosvi.optimizer import (
    SCHEMES,
    ConvergenceCriterion,
    CurvatureFailure,
    MonteCarloObjective,
    OptimizerState,
    QuadraticObjective,
    RunAborted,
    StepControl,
    TraceRecord,
    default_init,
    iterations_to_threshold,
    make_step,
    resolve_c0,
    run,
    step_first_order,
    step_scheme1,
    step_scheme2,
)

NEWTON = ("dense-newton", "scheme1-sm", "scheme1-cg", "scheme2")


def spd(rng, d):
    M = rng.standard_normal((d, d))
    return M @ M.T / d + np.eye(d)


def state(params, seed=0):
    return OptimizerState(np.asarray(params, dtype=float), np.random.default_rng(seed))


def mc(model, T=200, S=200):
    return MonteCarloObjective(model, gaussian_family(model.latent_dim), EstimatorConfig(T, S))


def strip(trace):
    return [(r.iteration, r.elbo_estimate, r.grad_norm, r.kl_exact, r.step_norm) for r in trace]


class TestControls:
    @pytest.mark.parametrize(
        "kwargs",
        [{"step_size": 0.0}, {"damping": -1.0}, {"max_step_norm": 0.0}, {"c0": -2.0}, {"c0": "big"},
         {"c0_rule": "median"}, {"c0_factor": 0.0}],
    )
    def test_step_control_validation(self, kwargs):
        with pytest.raises(ValueError):
            StepControl(**kwargs)

    def test_criterion_validation(self):
        with pytest.raises(ValueError):
            ConvergenceCriterion(max_iterations=-1)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError, match="unknown scheme"):
            make_step("adam")
        assert set(SCHEMES) == {"first-order", *NEWTON}

    def test_first_order_needs_step_size(self):
        q = QuadraticObjective(np.eye(2), [1.0, 1.0])
        with pytest.raises(ValueError):
            step_first_order(state([0.0, 0.0]), q, StepControl())

    def test_scheme1_option(self):
        q = QuadraticObjective(np.eye(2), [1.0, 1.0])
        with pytest.raises(ValueError):
            step_scheme1(state([0.0, 0.0]), q, StepControl(), option="lu")

    def test_family_mismatch(self, conj):
        with pytest.raises(ValueError):
            MonteCarloObjective(conj, gaussian_family(2), EstimatorConfig())

    def test_quadratic_requires_spd(self):
        with pytest.raises(ValueError):
            QuadraticObjective(np.diag([1.0, -1.0]), [0.0, 0.0])


class TestFirstOrder:
    def test_zero_gradient_keeps_params(self):
        q = QuadraticObjective(np.eye(3), [1.0, 2.0, 3.0])
        res = step_first_order(state([1.0, 2.0, 3.0]), q, StepControl(step_size=0.5))
        np.testing.assert_array_equal(res.params, [1.0, 2.0, 3.0])
        assert res.step_norm == 0.0

    def test_quadratic_contraction(self):
        q = QuadraticObjective(np.eye(2), [0.0, 0.0])
        res = step_first_order(state([0.3, -0.4]), q, StepControl(step_size=0.1))
        np.testing.assert_allclose(res.params, 0.9 * np.array([0.3, -0.4]), rtol=1e-15)

    def test_step_clipping(self):
        q = QuadraticObjective(np.eye(2), [100.0, 0.0])
        res = step_first_order(state([0.0, 0.0]), q, StepControl(step_size=1.0, max_step_norm=0.5))
        np.testing.assert_allclose(res.params, [0.5, 0.0])
        assert res.diagnostics["clipped"] == 1


class TestNewtonOnQuadratic:
    @pytest.mark.parametrize("scheme", NEWTON)
    @pytest.mark.parametrize("d", [2, 10])
    def test_single_step_hits_optimum(self, scheme, d):
        rng = np.random.default_rng(d)
        A = spd(rng, d)
        opt = rng.standard_normal(d)
        q = QuadraticObjective(A, opt)
        c0 = 1.1 * float(np.linalg.eigvalsh(A).max())
        ctl = StepControl(max_step_norm=1e6, c0=c0, neumann_tol=0.0, neumann_max_steps=3000)
        res = make_step(scheme)(state(np.zeros(d)), q, ctl)
        tol = 1e-10 if scheme != "scheme2" else 1e-6
        assert np.linalg.norm(res.params - opt) <= tol * max(1.0, np.linalg.norm(opt))

    def test_sm_and_cg_agree(self, linreg):
        obj = mc(linreg, 300, 300)
        p = default_init(obj.family)
        ctl = StepControl(damping=1e4, max_step_norm=1e6)
        a = step_scheme1(state(p, 3), obj, ctl, "sm")
        b = step_scheme1(state(p, 3), obj, ctl, "cg")
        assert a.diagnostics["damping"] == b.diagnostics["damping"] == 1e4
        assert np.linalg.norm(a.params - b.params) <= 1e-6 * np.linalg.norm(a.params - p)

    def test_newton_direction_matches_dense_solve(self, linreg):
        obj = mc(linreg, 300, 300)
        p = default_init(obj.family)
        ctl = StepControl(damping=1e4, max_step_norm=1e6)
        # same stream: the gradient draw precedes the Hessian draw
        rng = np.random.default_rng(3)
        g = obj.gradient(p, rng)
        H = obj.dense_hessian(p, rng)
        ref = np.linalg.solve(1e4 * np.eye(10) - H, g)
        res = make_step("dense-newton")(state(p, 3), obj, ctl)
        np.testing.assert_allclose(res.params - p, ref, rtol=1e-10, atol=1e-14)


class TestScheme2:
    def test_deterministic_given_seed(self, conj):
        obj = mc(conj)
        a = step_scheme2(state([0.0, 0.0], 7), obj, StepControl())
        b = step_scheme2(state([0.0, 0.0], 7), obj, StepControl())
        np.testing.assert_array_equal(a.params, b.params)
        assert a.diagnostics == b.diagnostics

    def test_large_c0_takes_small_finite_steps(self, conj):
        obj = mc(conj)
        res = step_scheme2(state([0.0, 0.0]), obj, StepControl(c0=1e12, neumann_max_steps=5))
        assert np.all(np.isfinite(res.params))
        assert 0 < res.step_norm < 1e-6

    def test_c0_refresh(self, conj):
        obj = mc(conj)
        s = state([0.0, 0.0])
        step_scheme2(s, obj, StepControl(c0_refresh=False))
        first = s.c0
        s.params = np.array([0.5, -1.0])
        step_scheme2(s, obj, StepControl(c0_refresh=False))
        assert s.c0 == first
        step_scheme2(s, obj, StepControl())
        assert s.c0 != first

    def test_rms_rule_dominates_mean_sample(self, conj):
        obj = mc(conj, S=500)
        rms = resolve_c0(state([0.0, 0.0], 1), obj, StepControl(c0_factor=1.0))
        mean = resolve_c0(state([0.0, 0.0], 1), obj, StepControl(c0_rule="mean", c0_factor=1.0))
        assert rms >= mean > 0


class TestRun:
    def test_zero_iterations(self, conj):
        res = run("dense-newton", mc(conj), [0.0, 0.0], StepControl(), ConvergenceCriterion(max_iterations=0))
        assert res.trace == []
        np.testing.assert_array_equal(res.params, [0.0, 0.0])

    def test_rejects_bad_start(self, conj):
        with pytest.raises(ValueError):
            run("dense-newton", mc(conj), [0.0], StepControl(), ConvergenceCriterion())

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_deterministic(self, conj, scheme):
        ctl = StepControl(step_size=0.004 if scheme == "first-order" else None)
        crit = ConvergenceCriterion(max_iterations=5, grad_norm_tol=None, param_tol=None)
        a = run(scheme, mc(conj), [0.0, 0.0], ctl, crit, seed=11)
        b = run(scheme, mc(conj), [0.0, 0.0], ctl, crit, seed=11)
        assert strip(a.trace) == strip(b.trace)
        assert [r.scheme_specific for r in a.trace] == [r.scheme_specific for r in b.trace]

    def test_elbo_samples_do_not_change_iterates(self, conj):
        crit = ConvergenceCriterion(max_iterations=4, grad_norm_tol=None, param_tol=None)
        a = run("scheme1-cg", mc(conj), [0.0, 0.0], StepControl(), crit, seed=2, elbo_samples=10)
        b = run("scheme1-cg", mc(conj), [0.0, 0.0], StepControl(), crit, seed=2, elbo_samples=1000)
        np.testing.assert_array_equal(a.params, b.params)
        assert [r.elbo_estimate for r in a.trace] != [r.elbo_estimate for r in b.trace]

    def test_trace_fields(self, conj):
        crit = ConvergenceCriterion(max_iterations=3, grad_norm_tol=None, param_tol=None)
        res = run("scheme1-cg", mc(conj), [0.0, 0.0], StepControl(), crit)
        assert [r.iteration for r in res.trace] == [1, 2, 3]
        for r in res.trace:
            assert isinstance(r, TraceRecord)
            assert r.kl_exact >= 0 and r.wallclock_ms >= 0
            assert {"damping", "cg_iters", "clipped"} <= set(r.scheme_specific)

    def test_kl_stop(self, conj):
        crit = ConvergenceCriterion(max_iterations=200, kl_tol=1e-2)
        res = run("dense-newton", mc(conj, 1000, 1000), [0.0, 0.0], StepControl(), crit)
        assert res.stopped_by == "kl_tol"
        assert res.trace[-1].kl_exact <= 1e-2
        assert iterations_to_threshold(res.trace) == len(res.trace)

    def test_param_tol_stop_on_quadratic(self):
        q = QuadraticObjective(np.eye(2), [1.0, 1.0])
        res = run("dense-newton", q, [0.0, 0.0], StepControl(max_step_norm=10.0), ConvergenceCriterion(grad_norm_tol=None))
        assert res.stopped_by == "param_tol"
        assert len(res.trace) == 2

    def test_grad_norm_stop(self):
        q = QuadraticObjective(np.eye(2), [0.1, 0.0])
        res = run("first-order", q, [0.0, 0.0], StepControl(step_size=0.5),
                  ConvergenceCriterion(grad_norm_tol=1e-3, param_tol=None, window=3))
        assert res.stopped_by == "grad_norm"
        assert np.mean([r.grad_norm for r in res.trace[-3:]]) <= 1e-3

    def test_abort_carries_trace(self, conj):
        obj = mc(conj)

        class Failing(MonteCarloObjective):
            calls = 0

            def gradient(self, params, rng):
                Failing.calls += 1
                if Failing.calls == 3:
                    return np.array([np.nan, 0.0])
                return super().gradient(params, rng)

        bad = Failing(obj.model, obj.family, obj.cfg)
        with pytest.raises(RunAborted) as info:
            run("scheme1-cg", bad, [0.0, 0.0], StepControl(), ConvergenceCriterion(max_iterations=10))
        assert len(info.value.trace) == 2
        assert isinstance(info.value.cause, FloatingPointError)

    def test_damping_cap(self):
        q = QuadraticObjective(np.eye(2), [1.0, 1.0])

        class Convex(QuadraticObjective):
            def dense_hessian(self, params, rng=None):
                return 1e9 * np.eye(2)

        bad = Convex(np.eye(2), [1.0, 1.0])
        with pytest.raises(CurvatureFailure):
            make_step("dense-newton")(state([0.0, 0.0]), bad, StepControl(damping_max=1e3))
        make_step("dense-newton")(state([0.0, 0.0]), q, StepControl(damping_max=1e3))

    def test_iterations_to_threshold(self):
        recs = [TraceRecord(i, 0.0, 0.0, kl, 0.0, 0.0) for i, kl in enumerate([1.0, 0.02, 0.005, 0.5], 1)]
        assert iterations_to_threshold(recs) == 3
        assert iterations_to_threshold(recs, 1e-4) is None
        assert iterations_to_threshold([TraceRecord(1, 0.0, 0.0, None, 0.0, 0.0)]) is None


class TestStochasticBehaviour:
    @pytest.mark.parametrize("scheme", NEWTON)
    def test_no_unhandled_failures_over_seeds(self, conj, scheme):
        crit = ConvergenceCriterion(max_iterations=3, grad_norm_tol=None, param_tol=None)
        obj = mc(conj, 100, 100)
        for seed in range(100):
            res = run(scheme, obj, [0.0, 0.0], StepControl(), crit, seed=seed)
            assert np.all(np.isfinite(res.params))

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_first_step_ascends_on_average(self, conj, scheme):
        obj = mc(conj, 500, 500)
        ctl = StepControl(step_size=0.004 if scheme == "first-order" else None)
        start = np.array([0.0, 0.0])
        base = quad_elbo_1d(conj, *start)
        gains = [
            quad_elbo_1d(conj, *make_step(scheme)(state(start, s), obj, ctl).params) - base for s in range(20)
        ]
        assert np.mean(gains) > 0


@pytest.mark.slow
class TestEndToEnd:
    @pytest.mark.parametrize("scheme", NEWTON)
    def test_conjugate_reaches_threshold(self, conj, scheme):
        crit = ConvergenceCriterion(max_iterations=150, kl_tol=1e-2)
        res = run(scheme, mc(conj, 1000, 1000), [0.0, 0.0], StepControl(), crit, seed=0)
        assert res.stopped_by == "kl_tol"

    def test_linreg_newton(self, linreg):
        crit = ConvergenceCriterion(max_iterations=100, kl_tol=1e-2)
        res = run("scheme1-cg", mc(linreg, 5000, 5000), np.zeros(10), StepControl(), crit, seed=0)
        assert res.stopped_by == "kl_tol"
