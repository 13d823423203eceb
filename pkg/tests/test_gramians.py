import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from stochbt.gramians import (DefinitenessError, GramianDefinitenessWarning, SolverOptions, apply_noise_operator,
                              compute_gramians, generalized_lyapunov_residual, load_gramians, residual_reachability,
                              save_gramians, schur_block, solve_generalized_lyapunov, solve_observability_gramian,
                              solve_reachability_gramian)
from stochbt.system import StochasticBilinearSystem, UnstableSystemError, build_heat_example

from conftest import random_stable_system

EXACT = SolverOptions(input_regularization=0.0, output_regularization=0.0)


def linear(A, B, C):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    return StochasticBilinearSystem.from_matrices(A, B, C, [np.zeros((n, n))] * m, [np.zeros((n, n))], [[1.0]])


def brute_force_noise(mats, Y, K):
    out = np.zeros_like(Y)
    for i, Ai in enumerate(mats):
        for j, Aj in enumerate(mats):
            out += K[i, j] * Ai.T @ Y @ Aj
    return out


def vectorized_solve(sys, rhs):
    # column-major vec: vec(A^T X) = (I kron A^T) vec X, vec(X A) = (A^T kron I) vec X
    n = sys.n
    eye = np.eye(n)
    M = np.kron(eye, sys.A.T) + np.kron(sys.A.T, eye)
    for Nk in sys.N:
        M += np.kron(Nk.T, Nk.T)
    for i in range(sys.v):
        for j in range(sys.v):
            M += sys.K[i, j] * np.kron(sys.H[j].T, sys.H[i].T)
    return np.linalg.solve(M, rhs.reshape(-1, order="F")).reshape(n, n, order="F")


def random_psd(rng, n, rank=None):
    G = rng.standard_normal((n, rank or n))
    return G @ G.T


class TestNoiseOperator:
    def test_identity(self):
        np.testing.assert_array_equal(apply_noise_operator([np.eye(3)], np.eye(3), [[1.0]]), np.eye(3))

    def test_zero_Y(self):
        rng = np.random.default_rng(0)
        out = apply_noise_operator([rng.standard_normal((3, 3))], np.zeros((3, 3)), [[2.0]])
        np.testing.assert_array_equal(out, 0.0)

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        mats = [rng.standard_normal((3, 3)) for _ in range(2)]
        Y = random_psd(rng, 3)
        K = random_psd(rng, 2)
        out = apply_noise_operator(mats, Y, K)
        ref = brute_force_noise(mats, Y, K)
        assert np.linalg.norm(out - ref) <= 1e-12 * np.linalg.norm(ref)
        assert np.linalg.eigvalsh(out)[0] >= -1e-12 * np.linalg.norm(out)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 5), v=st.integers(1, 4))
    def test_psd_output(self, seed, n, v):
        rng = np.random.default_rng(seed)
        mats = [rng.standard_normal((n, n)) for _ in range(v)]
        Y = random_psd(rng, n, rank=int(rng.integers(1, n + 1)))
        K = random_psd(rng, v, rank=int(rng.integers(1, v + 1)))
        out = apply_noise_operator(mats, Y, K)
        assert np.array_equal(out, out.T)
        assert np.linalg.eigvalsh(out)[0] >= -1e-12 * np.linalg.norm(out, 2)

    def test_rejects_indefinite(self):
        with pytest.raises(DefinitenessError):
            apply_noise_operator([np.eye(2)], np.diag([1.0, -1.0]), [[1.0]])
        with pytest.raises(DefinitenessError):
            apply_noise_operator([np.eye(2), np.eye(2)], np.eye(2), [[1.0, 2.0], [2.0, 1.0]])


class TestGeneralizedLyapunov:
    def test_diagonal_example(self):
        sys = linear(np.diag([-1.0, -2.0]), [[1.0], [1.0]], [[1.0, 1.0]])
        X = solve_generalized_lyapunov(sys, -sys.C.T @ sys.C)
        expected = np.array([[1 / 2, 1 / 3], [1 / 3, 1 / 4]])
        np.testing.assert_allclose(X, expected, rtol=1e-13)
        np.testing.assert_allclose(X, vectorized_solve(sys, -sys.C.T @ sys.C), rtol=1e-13)

    def test_scalar_noise(self):
        sys = StochasticBilinearSystem.from_matrices([[-1.0]], [[1.0]], [[1.0]], [[[0.0]]], [[[1.0]]], [[0.5]])
        X = solve_generalized_lyapunov(sys, [[-1.0]])
        assert X[0, 0] == pytest.approx(2 / 3, rel=1e-14)

    def test_zero_rhs(self):
        sys = build_heat_example(5, 0.3, 0.3)
        np.testing.assert_array_equal(solve_generalized_lyapunov(sys, np.zeros((5, 5))), 0.0)

    def test_unstable_raises(self):
        sys = StochasticBilinearSystem.from_matrices([[-1.0]], [[1.0]], [[1.0]], [[[1.0]]], [[[1.0]]], [[1.0]])
        with pytest.raises(UnstableSystemError):
            solve_generalized_lyapunov(sys, [[-1.0]])

    def test_random_bilinear_against_vectorized(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            sys = random_stable_system(rng, 4, m=2, v=2)
            rhs = -random_psd(rng, 4)
            X = solve_generalized_lyapunov(sys, rhs)
            ref = vectorized_solve(sys, rhs)
            assert np.linalg.norm(X - ref) <= 1e-10 * np.linalg.norm(ref)

    def test_lagged_inner_solver_matches_direct(self):
        sys = build_heat_example(8, 0.5, 0.5)
        rhs = -sys.C.T @ sys.C - np.eye(8)
        X1 = solve_generalized_lyapunov(sys, rhs)
        X2 = solve_generalized_lyapunov(sys, rhs, SolverOptions(inner_lyapunov="lagged_bartels_stewart"))
        assert np.linalg.norm(X1 - X2) <= 1e-9 * np.linalg.norm(X1)

    def test_linear_specialization(self):
        rng = np.random.default_rng(11)
        sys = random_stable_system(rng, 6, noise=0.0, bilinear=0.0)
        Q = solve_observability_gramian(sys, EXACT)
        ref = sla.solve_continuous_lyapunov(sys.A.T, -sys.C.T @ sys.C)
        assert np.linalg.norm(Q - ref) <= 1e-10 * np.linalg.norm(ref)


class TestObservability:
    def test_example(self):
        sys = linear(np.diag([-1.0, -2.0]), [[1.0], [1.0]], [[1.0, 1.0]])
        Q = solve_observability_gramian(sys, EXACT)
        np.testing.assert_allclose(Q, [[1 / 2, 1 / 3], [1 / 3, 1 / 4]], rtol=1e-13)

    def test_zero_output_warns(self):
        sys = linear(np.diag([-1.0, -2.0]), [[1.0], [1.0]], [[0.0, 0.0]])
        with pytest.warns(GramianDefinitenessWarning, match="min eigenvalue"):
            Q = solve_observability_gramian(sys)
        np.testing.assert_array_equal(Q, 0.0)

    def test_heat10_residual(self):
        sys = build_heat_example(10, 0.5, 0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GramianDefinitenessWarning)
            Q = solve_observability_gramian(sys, EXACT)
        res = generalized_lyapunov_residual(sys.A, sys.N, sys.H, sys.K, Q, -sys.C.T @ sys.C)
        assert np.linalg.norm(res) <= 1e-10

    def test_regularized_satisfies_original_inequality(self):
        sys = build_heat_example(10, 0.5, 0.5)
        Q = solve_observability_gramian(sys)
        assert np.linalg.eigvalsh(Q)[0] > 0
        lhs = generalized_lyapunov_residual(sys.A, sys.N, sys.H, sys.K, Q, -sys.C.T @ sys.C)
        assert np.linalg.eigvalsh(lhs)[-1] <= 0


class TestReachability:
    def test_scalar_maximal_root(self):
        sys = linear([[-1.0]], [[1.0]], [[1.0]])
        eps = 1e-8
        res = solve_reachability_gramian(sys, SolverOptions(epsilon=eps, input_regularization=0.0))
        assert res.Y[0, 0] == pytest.approx(1 + np.sqrt(1 - eps), rel=1e-12)
        assert res.P[0, 0] == pytest.approx(0.5, rel=1e-7)

    def test_no_input_linear(self):
        sys = linear([[-1.0]], [[0.0]], [[1.0]])
        eps = 1e-3
        res = solve_reachability_gramian(sys, SolverOptions(epsilon=eps))
        assert res.Y[0, 0] == pytest.approx(eps / 2, rel=1e-13)
        assert res.P[0, 0] == pytest.approx(2 / eps, rel=1e-13)

    def test_monotone_in_epsilon(self):
        sys = linear([[-1.0]], [[1.0]], [[1.0]])
        ys = [solve_reachability_gramian(sys, SolverOptions(epsilon=e, input_regularization=0.0)).Y[0, 0]
              for e in (1e-6, 1e-3, 0.1, 0.5, 0.9)]
        assert all(a > b for a, b in zip(ys, ys[1:]))

    def test_heat10_gate(self):
        sys = build_heat_example(10, 0.5, 0.5)
        res = solve_reachability_gramian(sys)
        _, min_eig = residual_reachability(sys, res.P)
        assert min_eig >= -1e-8 * np.linalg.norm(sys.A, 2)
        assert np.linalg.eigvalsh(schur_block(sys, res.P))[-1] <= 1e-8 * np.linalg.norm(sys.A, 2)

    def test_lagged_fixed_point_is_valid_and_conservative(self):
        sys = build_heat_example(6, 0.3, 0.3)
        newton = solve_reachability_gramian(sys)
        lagged = solve_reachability_gramian(sys, SolverOptions(method="lagged_fixed_point"))
        assert lagged.residual_min_eig >= 0
        assert np.trace(lagged.P) >= np.trace(newton.P)

    def test_direct_method_needs_linear_equation(self):
        sys = linear([[-1.0]], [[1.0]], [[1.0]])
        with pytest.raises(ValueError):
            solve_reachability_gramian(sys, SolverOptions(method="direct_kronecker"))

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 6))
    def test_random_bilinear_gate(self, seed, n):
        rng = np.random.default_rng(seed)
        sys = random_stable_system(rng, n, m=int(rng.integers(1, 3)), v=int(rng.integers(1, 3)))
        res = solve_reachability_gramian(sys)
        _, min_eig = residual_reachability(sys, res.P)
        tol = 1e-8 * np.linalg.norm(sys.A, 2)
        assert min_eig >= -tol
        assert np.linalg.eigvalsh(schur_block(sys, res.P))[-1] <= tol
        assert np.linalg.eigvalsh(res.P)[0] > 0


class TestResidualReachability:
    sys = linear([[-1.0]], [[1.0]], [[1.0]])

    def test_equality_case(self):
        R, min_eig = residual_reachability(self.sys, [[0.5]])
        assert R[0, 0] == 0.0 and min_eig == 0.0

    def test_accepted(self):
        assert residual_reachability(self.sys, [[1.0]])[1] == 1.0
        assert residual_reachability(self.sys, [[10.0]])[1] == pytest.approx(0.19, rel=1e-14)

    def test_rejected(self):
        assert residual_reachability(self.sys, [[0.4]])[1] == pytest.approx(-1.25, rel=1e-14)

    def test_schur_equivalence(self):
        for p in (0.4, 0.5, 1.0, 10.0):
            accepted = residual_reachability(self.sys, [[p]])[1] >= -1e-14
            assert accepted == (np.linalg.eigvalsh(schur_block(self.sys, [[p]]))[-1] <= 1e-14)

    def test_singular_P(self):
        with pytest.raises((DefinitenessError, np.linalg.LinAlgError)):
            residual_reachability(self.sys, [[0.0]])


def test_gramian_files_round_trip(tmp_path):
    sys = build_heat_example(4, 0.2, 0.2)
    pair = compute_gramians(sys)
    save_gramians(pair, tmp_path)
    back = load_gramians(tmp_path)
    np.testing.assert_array_equal(back.P, pair.P)
    np.testing.assert_array_equal(back.Q, pair.Q)
    assert back.epsilon == pair.epsilon
    assert back.metadata["method"] == pair.metadata["method"]


def test_gramian_pair_invariants(heat20, heat20_gramians):
    g = heat20_gramians
    for M in (g.P, g.Q):
        assert np.max(np.abs(M - M.T)) <= 1e-12 * np.linalg.norm(M)
        assert np.linalg.eigvalsh(M)[0] > 0
    assert g.p_residual_mineig >= -1e-8 * np.linalg.norm(heat20.A, 2)
    assert g.q_residual_norm <= 1e-10 * np.linalg.norm(heat20.C.T @ heat20.C)
