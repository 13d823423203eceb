import csv
import math
import warnings

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from stochbt.balancing import (MultiplicitySplitWarning, balance, check_inherited_inequalities, distinct_values,
                               error_bound, error_bound_with_multiplicity, hankel_singular_values, truncate,
                               write_bound_table, write_hsv_csv)
from stochbt.gramians import DefinitenessError, compute_gramians
from stochbt.simulation import LevyConfig, sample_levy_increments, simulate_path, control_signal
from stochbt.system import StochasticBilinearSystem, build_heat_example

from conftest import random_stable_system


def diag_system(n):
    return StochasticBilinearSystem.from_matrices(-np.eye(n), np.ones((n, 1)), np.ones((1, n)), [np.zeros((n, n))],
                                                  [0.1 * np.eye(n)], [[1.0]])


def random_spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T + 0.1 * np.eye(n)


class TestHSV:
    def test_identity(self):
        np.testing.assert_allclose(hankel_singular_values(np.eye(3), np.eye(3)), 1.0, rtol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(hankel_singular_values(np.diag([9.0, 4.0]), np.eye(2)), [3.0, 2.0], rtol=1e-15)

    def test_random_against_eigensolver(self):
        rng = np.random.default_rng(5)
        P, Q = random_spd(rng, 4), random_spd(rng, 4)
        ref = np.sort(np.sqrt(sla.eigvals(P @ Q).real))[::-1]
        np.testing.assert_allclose(hankel_singular_values(P, Q), ref, rtol=1e-10)


class TestBalance:
    def test_already_balanced(self):
        P = np.diag([4.0, 1.0])
        bal = balance(diag_system(2), (P, P))
        np.testing.assert_allclose(bal.S, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(bal.sigma, [4.0, 1.0], rtol=1e-15)

    def test_symmetric_pair(self):
        P = np.array([[1 / 2, 1 / 3], [1 / 3, 1 / 4]])
        bal = balance(diag_system(2), (P, P))
        ref = np.sort(np.linalg.eigvals(P).real)[::-1]
        np.testing.assert_allclose(bal.sigma, ref, rtol=1e-12)
        np.testing.assert_allclose(bal.sigma, [0.73100, 0.01900], atol=5e-6)

    def test_benchmark_identities(self, heat20_gramians, heat20_balanced):
        bal, g = heat20_balanced, heat20_gramians
        err = bal.errors(g.P, g.Q)
        s1 = bal.sigma[0]
        assert err["S_P_St"] <= 1e-8 * s1
        assert err["Sinv_Q_Sinv"] <= 1e-8 * s1
        assert err["S_S_inv"] <= 1e-10 * bal.n
        assert np.all(np.diff(bal.sigma) <= 0) and bal.sigma[-1] > 0

    def test_transformed_coefficients(self, heat20, heat20_balanced):
        bal = heat20_balanced
        sb = bal.sys_balanced
        np.testing.assert_allclose(sb.A, bal.S @ heat20.A @ bal.S_inv, rtol=0, atol=1e-9 * np.abs(sb.A).max())
        np.testing.assert_array_equal(sb.K, heat20.K)
        # output map is unchanged: C S^{-1} S x = C x
        x = np.linspace(-1.0, 1.0, heat20.n)
        assert sb.C @ (bal.S @ x) == pytest.approx(heat20.C @ x, rel=1e-10)

    def test_deterministic_signs(self, heat20, heat20_gramians):
        a = balance(heat20, heat20_gramians)
        b = balance(heat20, heat20_gramians)
        np.testing.assert_array_equal(a.S, b.S)

    def test_indefinite_rejected(self):
        with pytest.raises(DefinitenessError) as info:
            balance(diag_system(2), (np.diag([1.0, -1.0]), np.eye(2)))
        assert info.value.min_eig == pytest.approx(-1.0)

    def test_pivot_tolerance(self):
        with pytest.raises(DefinitenessError):
            balance(diag_system(2), (np.diag([1.0, 1e-16]), np.eye(2)))

    def test_unbalanceable(self, monkeypatch):
        import stochbt.balancing as mod
        # with the pivot guard lifted the HSV ratio guard must still trip
        monkeypatch.setattr(mod, "CHOLESKY_PIVOT_TOL", 0.0)
        with pytest.raises(ValueError, match="1e-14"):
            balance(diag_system(2), (np.diag([1.0, 1e-16]), np.diag([1.0, 1e-16])))

    def test_output_invariance_on_shared_noise(self):
        sys = build_heat_example(6, 0.4, 0.4)
        bal = balance(sys, compute_gramians(sys))
        u = control_signal("sine", 1, amplitude=2.0)
        dt = 1e-3
        grid = np.arange(501) * dt
        dM = sample_levy_increments(LevyConfig(sys.K, theta=0.5, jump_rate=5.0, seed=4), grid, 1)[0]
        _, y = simulate_path(sys, u, dM, dt=dt)
        _, yb = simulate_path(bal.sys_balanced, u, dM, dt=dt)
        assert np.max(np.abs(y - yb)) <= 1e-10 * max(np.max(np.abs(y)), 1e-300)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_orthogonal_invariance(self, seed):
        rng = np.random.default_rng(seed)
        sys = random_stable_system(rng, 4, m=1, v=1)
        g = compute_gramians(sys)
        U = ortho_group.rvs(4, random_state=rng)
        moved = sys.transform(U, U.T)
        s1 = hankel_singular_values(g.P, g.Q)
        s2 = balance(moved, (U @ g.P @ U.T, U @ g.Q @ U.T)).sigma
        np.testing.assert_allclose(s2, s1, rtol=1e-10, atol=1e-10 * s1[0])


class TestTruncate:
    def balanced(self, sigma):
        D = np.diag(sigma)
        return balance(diag_system(len(sigma)), (D, D))

    def test_last_state(self):
        bal = self.balanced([3.0, 2.0, 1.0])
        mdl = truncate(bal, 2)
        assert mdl.distinct_values == ((1.0, 1),)
        assert mdl.sys_r.n == 2

    def test_distinct_grouping(self):
        bal = self.balanced([1.0, 0.1, 0.1, 0.05])
        mdl = truncate(bal, 1)
        np.testing.assert_allclose(mdl.sigma2, [0.1, 0.1, 0.05], rtol=1e-14)
        assert [m for _, m in mdl.distinct_values] == [2, 1]
        np.testing.assert_allclose([v for v, _ in mdl.distinct_values], [0.1, 0.05], rtol=1e-14)
        assert error_bound(mdl, 1.0) == pytest.approx(2 * 0.15 * math.exp(0.5), rel=1e-13)
        assert error_bound(mdl, 1.0) == pytest.approx(0.49462, abs=5e-6)
        assert error_bound_with_multiplicity(mdl, 1.0) == pytest.approx(2 * 0.25 * math.exp(0.5), rel=1e-13)

    def test_distinct_values_function(self):
        assert distinct_values([0.1, 0.1, 0.05]) == ((0.1, 2), (0.05, 1))
        assert distinct_values([]) == ()

    def test_split_warning(self):
        bal = self.balanced([1.0, 0.1, 0.1, 0.05])
        with pytest.warns(MultiplicitySplitWarning):
            truncate(bal, 2)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            truncate(bal, 3)

    def test_leading_blocks(self, heat20_balanced):
        mdl = truncate(heat20_balanced, 4)
        sb = heat20_balanced.sys_balanced
        np.testing.assert_array_equal(mdl.sys_r.A, sb.A[:4, :4])
        np.testing.assert_array_equal(mdl.sys_r.B, sb.B[:4])
        np.testing.assert_array_equal(mdl.sys_r.C, sb.C[:, :4])
        np.testing.assert_array_equal(mdl.sys_r.N[0], sb.N[0][:4, :4])
        np.testing.assert_array_equal(mdl.sys_r.H[0], sb.H[0][:4, :4])
        assert sum(m for _, m in mdl.distinct_values) == 16

    def test_out_of_range(self, heat20_balanced):
        for r in (0, 21, 2.5):
            with pytest.raises(ValueError):
                truncate(heat20_balanced, r)

    def test_full_order(self, heat20_balanced):
        mdl = truncate(heat20_balanced, 20)
        assert mdl.sigma2.size == 0 and error_bound(mdl, 3.0) == 0.0


class TestBound:
    def test_single_value(self):
        D = np.diag([2.0, 0.3])
        mdl = truncate(balance(diag_system(2), (D, D)), 1)
        assert error_bound(mdl, 1.0) == pytest.approx(2 * 0.3 * math.exp(0.5), rel=1e-13)

    def test_zero_input(self, heat20_balanced):
        assert error_bound(truncate(heat20_balanced, 3), 0.0) == 0.0

    def test_negative_norm(self, heat20_balanced):
        with pytest.raises(ValueError):
            error_bound(truncate(heat20_balanced, 3), -1.0)

    def test_monotone_in_r(self, heat20_balanced):
        for u in (0.5, 1.0, 2.0):
            b = [error_bound(truncate(heat20_balanced, r), u) for r in range(1, 21)]
            assert all(x >= y for x, y in zip(b, b[1:]))


class TestInheritedInequalities:
    def test_heat10_r4(self):
        sys = build_heat_example(10, 0.5, 0.5)
        mdl = truncate(balance(sys, compute_gramians(sys)), 4)
        assert check_inherited_inequalities(mdl).passed

    def test_benchmark_sweep(self, heat20_balanced):
        for r in range(1, 20):
            rep = check_inherited_inequalities(truncate(heat20_balanced, r))
            assert rep.reach_ok and rep.obs_ok, r

    def test_detects_violation(self):
        # Gramians that do not belong to the system
        D = np.diag([1.0, 0.5])
        sys = StochasticBilinearSystem.from_matrices(-0.1 * np.eye(2), 5 * np.ones((2, 1)), 5 * np.ones((1, 2)),
                                                     [np.zeros((2, 2))], [np.zeros((2, 2))], [[1.0]])
        assert not check_inherited_inequalities(truncate(balance(sys, (D, D)), 1)).passed


def test_csv_writers(tmp_path, heat20_balanced):
    write_hsv_csv(tmp_path / "hsv.csv", heat20_balanced.sigma)
    rows = list(csv.reader(open(tmp_path / "hsv.csv")))
    assert rows[0] == ["index", "value"]
    assert [float(r[1]) for r in rows[1:]] == list(heat20_balanced.sigma)
    write_bound_table(tmp_path / "b.csv", heat20_balanced, 1.0, [2, 5])
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["r", "bound_distinct", "bound_with_multiplicity"]
    assert [r[0] for r in rows[1:]] == ["2", "5"]
