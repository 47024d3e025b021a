import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from sosvi import family as fam
from sosvi.family import RHO_MAX, RHO_MIN, DimensionError, FamilyDescriptor, gaussian_family

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def fd(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


class TestDescriptor:
    def test_dimensions(self):
        f = gaussian_family(4)
        assert f.block_size == 2
        assert f.block_sizes == (2, 2, 2, 2)
        assert f.param_dim == 8

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            FamilyDescriptor(0, ())
        with pytest.raises(ValueError):
            FamilyDescriptor(2, ("gaussian",))
        with pytest.raises(ValueError):
            FamilyDescriptor(1, ("gamma",))

    def test_pack_unpack_roundtrip(self):
        f = gaussian_family(3)
        p = f.pack([1.0, 2.0, 3.0], [-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(p, [1, -1, 2, 0, 3, 1])
        mu, rho = f.unpack(p)
        np.testing.assert_array_equal(mu, [1, 2, 3])
        np.testing.assert_array_equal(rho, [-1, 0, 1])

    def test_param_checks(self):
        f = gaussian_family(2)
        with pytest.raises(DimensionError):
            f.check_params(np.zeros(3))
        with pytest.raises(ValueError):
            f.check_params([0.0, np.nan, 0.0, 0.0])
        with pytest.raises(DimensionError):
            fam.log_density(f, np.zeros(4), np.zeros(3))


class TestSample:
    def test_degenerate_width(self):
        f = gaussian_family(1)
        th = fam.sample(f, [0.0, math.log(1e-8)], np.random.default_rng(0), 100)
        assert np.max(np.abs(th)) < 1e-6

    def test_moments(self):
        f = gaussian_family(1)
        n = 100_000
        th = fam.sample(f, [3.0, 0.0], np.random.default_rng(1), n)[:, 0]
        assert abs(th.mean() - 3.0) <= 3.0 / math.sqrt(n)
        assert abs(th.var() - 1.0) <= 0.05

    def test_count_boundaries(self):
        f = gaussian_family(2)
        with pytest.raises(ValueError):
            fam.sample(f, np.zeros(4), np.random.default_rng(0), 0)
        assert fam.sample(f, np.zeros(4), np.random.default_rng(0), 1).shape == (1, 2)

    def test_seed_determinism(self):
        f = gaussian_family(3)
        p = np.arange(6.0) / 10
        a = fam.sample(f, p, np.random.default_rng(5), 7)
        b = fam.sample(f, p, np.random.default_rng(5), 7)
        np.testing.assert_array_equal(a, b)


class TestLogDensity:
    def test_standard_normal_mode(self):
        f = gaussian_family(1)
        assert fam.log_density(f, [0.0, 0.0], [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_additivity(self):
        f1, f2 = gaussian_family(1), gaussian_family(2)
        v1 = fam.log_density(f1, [0.4, -0.3], [1.1])
        v2 = fam.log_density(f2, [0.4, -0.3, 0.4, -0.3], [1.1, 1.1])
        assert v2 == pytest.approx(2 * v1, rel=1e-14)

    def test_normalized(self):
        f = gaussian_family(1)
        total, _ = integrate.quad(lambda t: math.exp(fam.log_density(f, [1.0, 0.5], [t])), -np.inf, np.inf)
        assert total == pytest.approx(1.0, abs=1e-10)
        assert fam.log_density(f, [1.0, 0.5], [2.0]) == pytest.approx(
            -HALF_LOG_2PI - 0.5 - 0.5 * math.exp(-1.0), abs=1e-14
        )

    def test_batch_matches_single(self):
        f = gaussian_family(2)
        p = np.array([0.1, 0.2, -0.3, -0.4])
        th = np.random.default_rng(0).standard_normal((5, 2))
        batch = fam.log_density(f, p, th)
        np.testing.assert_allclose(batch, [fam.log_density(f, p, t) for t in th], rtol=1e-15)


class TestScore:
    def test_centered(self):
        f = gaussian_family(3)
        p = f.pack([1.0, -2.0, 0.5], [0.3, -0.7, 1.2])
        s = fam.score(f, p, [1.0, -2.0, 0.5])
        assert np.all(s[0::2] == 0.0)
        assert np.all(s[1::2] == -1.0)

    def test_unit_point(self):
        f = gaussian_family(1)
        np.testing.assert_allclose(fam.score(f, [0.0, 0.0], [1.0]), [1.0, 0.0], atol=1e-15)
        ref = fd(lambda p: fam.log_density(f, p, [1.0]), [0.0, 0.0], 1e-5)
        np.testing.assert_allclose(fam.score(f, [0.0, 0.0], [1.0]), ref, atol=1e-6)

    def test_score_identity(self):
        f = gaussian_family(2)
        p = np.array([0.5, -0.5, -1.0, 0.2])
        s = fam.score(f, p, fam.sample(f, p, np.random.default_rng(3), 100_000))
        se = s.std(axis=0, ddof=1) / math.sqrt(len(s))
        assert np.linalg.norm(s.mean(axis=0)) <= 4 * np.linalg.norm(se)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-3, 3), min_size=3, max_size=3),
        st.lists(st.floats(-3, 3), min_size=3, max_size=3),
        st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    )
    def test_matches_finite_differences(self, mu, rho, theta):
        f = gaussian_family(3)
        p = f.pack(mu, rho)
        ref = fd(lambda q: fam.log_density(f, q, theta), p, 1e-6)
        got = fam.score(f, p, theta)
        scale = max(1.0, np.max(np.abs(got)))
        assert np.max(np.abs(got - ref)) <= 1e-5 * scale


class TestScoreHessian:
    def test_centered_unit(self):
        f = gaussian_family(1)
        blk = fam.score_hessian_blocks(f, [0.0, 0.0], [0.0])[0]
        np.testing.assert_array_equal(blk, [[-1.0, 0.0], [0.0, 0.0]])
        ref = fd(lambda q: fam.score(f, q, [0.0]), [0.0, 0.0], 1e-5)
        np.testing.assert_allclose(blk, ref, atol=1e-4)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-3, 3), min_size=2, max_size=2),
        st.lists(st.floats(-3, 3), min_size=2, max_size=2),
        st.lists(st.floats(-3, 3), min_size=2, max_size=2),
    )
    def test_blocks_and_sparsity(self, mu, rho, theta):
        f = gaussian_family(2)
        p = f.pack(mu, rho)
        blocks = fam.score_hessian_blocks(f, p, theta)
        np.testing.assert_array_equal(blocks, blocks.transpose(0, 2, 1))
        H = fd(lambda q: fam.score(f, q, theta), p, 1e-6)
        scale = max(1.0, np.max(np.abs(blocks)))
        for i in range(2):
            sl = slice(2 * i, 2 * i + 2)
            assert np.max(np.abs(H[sl, sl] - blocks[i])) <= 1e-5 * scale
        assert np.max(np.abs(H[0:2, 2:4])) < 1e-6
        assert np.max(np.abs(H[2:4, 0:2])) < 1e-6


class TestEntropy:
    def test_standard_normal(self):
        assert fam.entropy(gaussian_family(1), [0.0, 0.0]) == pytest.approx(1.4189385332046727, abs=1e-12)

    def test_gradient_and_hessian(self):
        f = gaussian_family(3)
        p = np.random.default_rng(0).uniform(-2, 2, 6)
        ref = fd(lambda q: fam.entropy(f, q), p, 1e-4)
        np.testing.assert_allclose(fam.entropy_grad(f, p), ref, atol=1e-8)
        np.testing.assert_array_equal(fam.entropy_hessian_blocks(f, p), np.zeros((3, 2, 2)))

    def test_matches_quadrature(self):
        f = gaussian_family(1)
        p = [0.3, 0.7]
        val, _ = integrate.quad(
            lambda t: -math.exp(fam.log_density(f, p, [t])) * fam.log_density(f, p, [t]), -40, 40
        )
        assert fam.entropy(f, p) == pytest.approx(val, rel=1e-10)


class TestClamp:
    def test_clamp_counts_and_stays_finite(self):
        f = gaussian_family(2)
        p = f.pack([0.0, 0.0], [RHO_MIN - 5, RHO_MAX + 5])
        f.clamps.reset()
        s = fam.score(f, p, [1e-3, 1.0])
        assert np.all(np.isfinite(s))
        assert f.clamps.count == 2
        ref = fam.score(f, f.pack([0.0, 0.0], [RHO_MIN, RHO_MAX]), [1e-3, 1.0])
        np.testing.assert_array_equal(s, ref)
