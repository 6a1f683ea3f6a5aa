import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from oracles import principal_sqrt, sqrt_differential
from pdreg.core import (GaussianState, jittered_cholesky, matrix_sqrt, psd_floor, sqrt_derivative,
                        symmetrize)
from pdreg.errors import NotSpd


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestMatrixSqrt:
    def test_identity(self):
        np.testing.assert_allclose(matrix_sqrt(np.eye(2)), np.eye(2), atol=1e-9)

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-9)

    def test_two_by_two_against_eigen_oracle(self):
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        expected = principal_sqrt(a)
        np.testing.assert_allclose(matrix_sqrt(a), expected, atol=1e-9)
        np.testing.assert_allclose(matrix_sqrt(a), [[1.3660, 0.3660], [0.3660, 1.3660]], atol=1e-4)

    def test_result_is_symmetric(self, rng):
        r = matrix_sqrt(random_spd(rng, 5))
        assert np.array_equal(r, r.T) or np.max(np.abs(r - r.T)) < 1e-14

    @given(st.integers(1, 60), st.integers(0, 2**32 - 1))
    def test_square_reproduces_input(self, n, seed):
        a = random_spd(np.random.default_rng(seed), n, cond=1e3)
        r = matrix_sqrt(a)
        assert rel_err(r @ r.T, a) < 1e-8

    @given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_scaling(self, c, seed):
        a = random_spd(np.random.default_rng(seed), 4)
        assert rel_err(matrix_sqrt(c * a), np.sqrt(c) * matrix_sqrt(a)) < 1e-10

    def test_zero_matrix_has_zero_root(self):
        assert np.all(matrix_sqrt(np.zeros((3, 3))) == 0)

    def test_rejects_indefinite(self):
        with pytest.raises(NotSpd):
            matrix_sqrt(np.diag([1.0, -0.5]))

    def test_tolerates_roundoff_negative_eigenvalue(self):
        a = np.diag([1.0, -1e-13])
        r = matrix_sqrt(a)
        assert np.all(np.isfinite(r))

    def test_batched_matches_loop(self, rng):
        mats = np.stack([random_spd(rng, 3) for _ in range(4)])
        batched = matrix_sqrt(mats)
        for m, r in zip(mats, batched):
            np.testing.assert_allclose(r, matrix_sqrt(m), atol=1e-14)


class TestSqrtDerivative:
    def test_scalar_case(self):
        assert sqrt_derivative(np.array([[4.0]]), np.array([[2.0]]))[0, 0] == pytest.approx(0.5, abs=1e-9)

    def test_identity_base_point(self, rng):
        d = symmetrize(rng.standard_normal((3, 3)))
        np.testing.assert_allclose(sqrt_derivative(np.eye(3), d), d / 2, atol=1e-9)

    def test_against_sylvester_solver(self, rng):
        a = random_spd(rng, 4)
        da = symmetrize(rng.standard_normal((4, 4)))
        np.testing.assert_allclose(sqrt_derivative(a, da), sqrt_differential(a, da), atol=1e-8)

    def test_against_finite_difference_2x2(self, rng):
        a = random_spd(rng, 2)
        da = symmetrize(rng.standard_normal((2, 2)))
        h = 1e-5
        fd = (principal_sqrt(a + h * da) - principal_sqrt(a - h * da)) / (2 * h)
        np.testing.assert_allclose(sqrt_derivative(a, da), fd, atol=1e-6)

    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_finite_difference_property(self, n, seed):
        rng = np.random.default_rng(seed)
        a = random_spd(rng, n, cond=20.0)
        da = symmetrize(rng.standard_normal((n, n)))
        h = 1e-5
        fd = (matrix_sqrt(a + h * da) - matrix_sqrt(a - h * da)) / (2 * h)
        assert np.max(np.abs(sqrt_derivative(a, da) - fd)) < 1e-6

    def test_sylvester_residual(self, rng):
        a = random_spd(rng, 5)
        da = symmetrize(rng.standard_normal((5, 5)))
        x = sqrt_derivative(a, da)
        r = principal_sqrt(a)
        np.testing.assert_allclose(r @ x + x @ r, da, atol=1e-9)

    def test_zero_base_point(self):
        z = np.zeros((2, 2))
        assert np.all(sqrt_derivative(z, z) == 0)
        with pytest.raises(NotSpd):
            sqrt_derivative(z, np.eye(2))

    def test_singular_base_point_rejected(self):
        with pytest.raises(NotSpd):
            sqrt_derivative(np.diag([1.0, 0.0]), np.eye(2))


class TestHelpers:
    def test_jittered_cholesky_escalates(self):
        a = np.ones((3, 3))
        chol, eps = jittered_cholesky(a)
        assert eps >= 1e-10
        np.testing.assert_allclose(chol @ chol.T, a + eps * np.eye(3), atol=1e-12)

    def test_jittered_cholesky_gives_up(self):
        with pytest.raises(NotSpd):
            jittered_cholesky(np.diag([1.0, -1.0]))

    def test_psd_floor_clips_negative_spectrum(self):
        a = np.diag([1.0, -1e-3])
        out, floored = psd_floor(a)
        assert floored
        assert np.min(np.linalg.eigvalsh(out)) >= 0

    def test_psd_floor_leaves_psd_input(self, rng):
        a = random_spd(rng, 4)
        out, floored = psd_floor(a)
        assert not floored
        np.testing.assert_array_equal(out, symmetrize(a))

    def test_psd_floor_batch_members_independent(self, rng):
        good = random_spd(rng, 3)
        bad = np.diag([1.0, 2.0, -1e-3])
        out, floored = psd_floor(np.stack([good, bad]))
        assert floored
        np.testing.assert_array_equal(out[0], symmetrize(good))

    def test_gaussian_state_views(self):
        s = GaussianState(np.arange(4.0), np.eye(4) * 2, 1.0)
        np.testing.assert_array_equal(s.points(2), [[0, 1], [2, 3]])
        np.testing.assert_array_equal(s.marginal(1, 2), 2 * np.eye(2))
        np.testing.assert_allclose(s.second_moment, 2 * np.eye(4) + np.outer(np.arange(4.0), np.arange(4.0)))
