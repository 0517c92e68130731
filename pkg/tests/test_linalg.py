import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from linident import linalg
from linident.linalg import SingularMatrixError


def _rotation(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class TestSvd:
    def test_identity(self):
        _, s, _ = linalg.svd(np.eye(3))
        np.testing.assert_allclose(s, [1.0, 1.0, 1.0])

    def test_diagonal(self):
        U, s, V = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(s, [3.0, 2.0, 1.0])
        np.testing.assert_allclose(np.abs(U), np.eye(3), atol=1e-15)
        np.testing.assert_allclose(np.abs(V), np.eye(3), atol=1e-15)

    def test_random_reconstruction(self, rng):
        m = rng.standard_normal((50, 8))
        U, s, V = linalg.svd(m)
        resid = np.linalg.norm(U @ np.diag(s) @ V.T - m) / np.linalg.norm(m)
        assert resid < 1e-10
        np.testing.assert_allclose(U.T @ U, np.eye(8), atol=1e-10)
        np.testing.assert_allclose(V.T @ V, np.eye(8), atol=1e-10)
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0)

    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(-1e6, 1e6)))
    def test_reconstruction_property(self, m):
        U, s, V = linalg.svd(m)
        err = np.linalg.norm(U @ np.diag(s) @ V.T - m) / max(1.0, np.linalg.norm(m))
        assert err < 1e-10

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            linalg.svd(np.array([[1.0, np.nan]]))


class TestSolve:
    def test_identity(self, rng):
        b = rng.standard_normal((4, 2))
        x, cond = linalg.solve(np.eye(4), b)
        np.testing.assert_array_equal(x, b)
        assert cond == pytest.approx(1.0)

    def test_scalar(self):
        x, _ = linalg.solve(2 * np.eye(4), np.eye(4))
        np.testing.assert_allclose(x, 0.5 * np.eye(4))

    def test_construct_then_solve(self, rng):
        a = linalg.random_invertible(rng, 6, cond_max=100)
        x0 = rng.standard_normal((6, 3))
        x, cond = linalg.solve(a, a @ x0)
        np.testing.assert_allclose(x, x0, atol=1e-8)
        assert cond < 100

    def test_singular(self):
        with pytest.raises(SingularMatrixError) as info:
            linalg.solve(np.ones((3, 3)), np.eye(3))
        assert info.value.condition >= 1e12

    def test_vector_rhs(self):
        x, _ = linalg.solve(np.diag([1.0, 4.0]), np.array([2.0, 2.0]))
        np.testing.assert_allclose(x, [2.0, 0.5])

    def test_non_square(self):
        with pytest.raises(ValueError):
            linalg.solve(np.ones((2, 3)), np.ones(2))

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        a = linalg.random_invertible(rng, n, cond_max=1e6)
        b = rng.standard_normal((n, 2))
        x, cond = linalg.solve(a, b)
        assert cond < 1e8
        assert np.linalg.norm(a @ x - b) / max(1.0, np.linalg.norm(b)) < 1e-8


class TestRank:
    def test_zero(self):
        assert linalg.numerical_rank(np.zeros((4, 4))) == 0

    def test_identity(self):
        assert linalg.numerical_rank(np.eye(5), 1e-10) == 5

    def test_outer_product(self, rng):
        u, v = rng.standard_normal(6), rng.standard_normal(4)
        assert linalg.numerical_rank(np.outer(u, v)) == 1

    @pytest.mark.parametrize("tol", [0.0, 1.0, -1e-3])
    def test_tolerance_range(self, tol):
        with pytest.raises(ValueError):
            linalg.numerical_rank(np.eye(2), tol)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
    def test_rotation_invariance(self, seed, r):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((6, r)) @ rng.standard_normal((r, 6))
        rank = linalg.numerical_rank(m)
        assert rank == r
        assert linalg.numerical_rank(_rotation(rng, 6) @ m @ _rotation(rng, 6)) == rank


class TestCentering:
    def test_constant_column(self):
        c, means = linalg.center_columns(np.full((4, 1), 7.0))
        np.testing.assert_array_equal(c, np.zeros((4, 1)))
        np.testing.assert_array_equal(means, [7.0])

    def test_already_centered(self):
        x = np.array([[-1.0], [1.0]])
        c, means = linalg.center_columns(x)
        np.testing.assert_array_equal(c, x)
        np.testing.assert_array_equal(means, [0.0])

    def test_hand_arithmetic(self):
        c, means = linalg.center_columns(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(c[:, 0], [-1.0, 0.0, 1.0])
        np.testing.assert_allclose(means, [2.0])

    @given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 5)),
                  elements=st.floats(-1e3, 1e3)))
    def test_mean_zero_and_restorable(self, m):
        c, means = linalg.center_columns(m)
        np.testing.assert_allclose(c.mean(axis=0), 0.0, atol=1e-12 * max(1.0, np.abs(m).max()))
        np.testing.assert_allclose(c + means, m, atol=1e-9)


class TestHelpers:
    def test_covariance_matches_numpy(self, rng):
        x, y = rng.standard_normal((30, 3)), rng.standard_normal((30, 2))
        full = np.cov(np.hstack([x, y]).T)
        np.testing.assert_allclose(linalg.covariance(x, y), full[:3, 3:], atol=1e-12)

    def test_inv_sqrt(self, rng):
        a = rng.standard_normal((5, 5))
        c = a @ a.T + np.eye(5)
        w = linalg.inv_sqrt_psd(c)
        np.testing.assert_allclose(w @ c @ w, np.eye(5), atol=1e-10)

    def test_random_invertible_condition(self, rng):
        for _ in range(10):
            assert linalg.condition_number(linalg.random_invertible(rng, 4, 50.0)) <= 50.0 + 1e-9

    def test_condition_of_singular(self):
        assert linalg.condition_number(np.zeros((2, 2))) == np.inf
