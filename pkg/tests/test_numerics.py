import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ecoglc.errors import ContractError, DegenerateInputError
from ecoglc.numerics import (
    contract,
    rank1_tensor_approx,
    solve_least_squares,
    top_singular_triplet,
)


def jacobi_singular_values(M, sweeps=60):
    """One-sided Jacobi SVD; independent of LAPACK."""
    A = np.array(M, dtype=float, copy=True)
    n = A.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = A[:, p] @ A[:, p]
                beta = A[:, q] @ A[:, q]
                gamma = A[:, p] @ A[:, q]
                off = max(off, abs(gamma) / np.sqrt(alpha * beta + 1e-300))
                if gamma == 0.0:
                    continue
                zeta = (beta - alpha) / (2 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1 / np.sqrt(1 + t * t)
                s = c * t
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(A, axis=0))[::-1]


class TestSolveLeastSquares:
    def test_identity(self):
        np.testing.assert_allclose(solve_least_squares(np.eye(3), np.eye(3)), np.eye(3), atol=1e-12)

    def test_mean_of_two(self):
        X = solve_least_squares([[1.0], [1.0]], [[0.0], [2.0]])
        np.testing.assert_allclose(X, [[1.0]], atol=1e-12)

    def test_recovers_constructed_solution(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(20, 5))
        X_true = rng.normal(size=(5, 3))
        np.testing.assert_allclose(solve_least_squares(A, A @ X_true), X_true, atol=1e-8)

    def test_rank_deficient_gives_min_norm(self):
        A = np.array([[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]])
        B = np.array([[2.0], [2.0], [4.0]])
        X = solve_least_squares(A, B)
        np.testing.assert_allclose(X, np.linalg.pinv(A) @ B, atol=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            solve_least_squares(np.ones((3, 2)), np.ones((4, 1)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (12, 4), elements=st.floats(-10, 10)),
           arrays(np.float64, (12, 2), elements=st.floats(-10, 10)))
    def test_residual_orthogonal_to_column_space(self, A, B):
        if np.linalg.cond(A) > 1e6:
            return
        R = A @ solve_least_squares(A, B) - B
        scale = np.linalg.norm(A) * max(1.0, np.linalg.norm(B))
        assert np.max(np.abs(A.T @ R)) <= 1e-8 * scale


class TestTopSingularTriplet:
    def test_diagonal(self):
        u, s, v = top_singular_triplet(np.diag([3.0, 1.0]))
        assert s == pytest.approx(3.0)
        np.testing.assert_allclose(u, [1, 0], atol=1e-12)
        np.testing.assert_allclose(v, [1, 0], atol=1e-12)

    def test_constructed_rank_one(self):
        rng = np.random.default_rng(1)
        u0 = rng.normal(size=6)
        u0 /= np.linalg.norm(u0)
        u0 *= np.sign(u0[0])
        v0 = rng.normal(size=4)
        v0 /= np.linalg.norm(v0)
        u, s, v = top_singular_triplet(2.5 * np.outer(u0, v0))
        assert s == pytest.approx(2.5, abs=1e-8)
        np.testing.assert_allclose(u, u0, atol=1e-8)
        np.testing.assert_allclose(v, v0, atol=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_jacobi_oracle(self, seed):
        M = np.random.default_rng(seed).normal(size=(5, 4))
        _, s, _ = top_singular_triplet(M)
        assert s == pytest.approx(jacobi_singular_values(M)[0], rel=1e-8, abs=1e-8)

    def test_wide_matrix_and_sign_convention(self):
        M = np.random.default_rng(3).normal(size=(3, 9))
        u, s, v = top_singular_triplet(M)
        assert u[np.flatnonzero(np.abs(u) > 1e-12)[0]] > 0
        np.testing.assert_allclose(M @ v, s * u, atol=1e-10)

    def test_zero_matrix(self):
        with pytest.raises(DegenerateInputError):
            top_singular_triplet(np.zeros((3, 3)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)))
    def test_s_squared_is_top_eigenvalue(self, M):
        if np.linalg.norm(M) < 1e-3:
            return
        _, s, _ = top_singular_triplet(M)
        lam = np.linalg.eigvalsh(M.T @ M)[-1]
        assert s * s == pytest.approx(lam, rel=1e-8)


def _unit(rng, n):
    x = rng.normal(size=n)
    return x / np.linalg.norm(x)


class TestRank1TensorApprox:
    def test_exact_rank_one(self):
        rng = np.random.default_rng(0)
        a, b, c = _unit(rng, 4), _unit(rng, 3), _unit(rng, 5)
        w1, w2, w3, s = rank1_tensor_approx(np.einsum("i,j,k->ijk", a, b, c))
        assert s == pytest.approx(1.0, abs=1e-10)
        for w, ref in ((w1, a), (w2, b), (w3, c)):
            assert abs(w @ ref) == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_perturbation(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = _unit(rng, 8), _unit(rng, 6), _unit(rng, 5)
        T = 2 * np.einsum("i,j,k->ijk", a, b, c) + 0.01 * rng.normal(size=(8, 6, 5))
        w1, w2, w3, _ = rank1_tensor_approx(T)
        for w, ref in ((w1, a), (w2, b), (w3, c)):
            assert np.arccos(min(1.0, abs(w @ ref))) < 0.05

    def test_single_slice_matches_matrix_svd(self):
        M = np.random.default_rng(4).normal(size=(5, 4))
        w1, w2, w3, s = rank1_tensor_approx(M[:, :, None])
        u, sm, v = top_singular_triplet(M)
        assert s == pytest.approx(sm, rel=1e-9)
        assert abs(w1 @ u) == pytest.approx(1.0, abs=1e-9)
        assert abs(w2 @ v) == pytest.approx(1.0, abs=1e-9)
        assert abs(w3[0]) == pytest.approx(1.0)

    def test_zero_tensor(self):
        with pytest.raises(DegenerateInputError):
            rank1_tensor_approx(np.zeros((2, 2, 2)))

    @pytest.mark.parametrize("seed", range(8))
    def test_objective_non_decreasing(self, seed):
        T = np.random.default_rng(seed).normal(size=(6, 5, 4))
        hist = []
        r = rank1_tensor_approx(T, history=hist)
        assert np.all(np.diff(hist) >= -1e-12)
        assert r.s == pytest.approx(contract(T, r.w1, r.w2, r.w3))
        assert r.s >= 0
