import numpy as np
import pytest

from stochbt.balancing import balance
from stochbt.gramians import compute_gramians
from stochbt.system import StochasticBilinearSystem, build_heat_example


def random_stable_system(rng, n, m=1, p=1, v=1, noise=0.3, bilinear=0.3, margin=0.5):
    """Random system whose lifted operator has abscissa <= -margin."""
    while True:
        M = rng.standard_normal((n, n))
        A = M - (np.max(np.linalg.eigvals(M + M.T).real) / 2 + margin + 1.0) * np.eye(n)
        N = [bilinear * rng.standard_normal((n, n)) / np.sqrt(n) for _ in range(m)]
        H = [noise * rng.standard_normal((n, n)) / np.sqrt(n) for _ in range(v)]
        G = rng.standard_normal((v, v))
        K = G @ G.T / v + 0.1 * np.eye(v)
        sys = StochasticBilinearSystem.from_matrices(A, rng.standard_normal((n, m)), rng.standard_normal((p, n)),
                                                     N, H, K)
        L = np.kron(A, np.eye(n)) + np.kron(np.eye(n), A)
        for Nk in N:
            L += np.kron(Nk, Nk)
        for i in range(v):
            for j in range(v):
                L += K[i, j] * np.kron(H[i], H[j])
        if np.max(np.linalg.eigvals(L).real) <= -margin:
            return sys


@pytest.fixture(scope="session")
def heat20():
    return build_heat_example(20, 0.5, 0.5)


@pytest.fixture(scope="session")
def heat20_gramians(heat20):
    return compute_gramians(heat20)


@pytest.fixture(scope="session")
def heat20_balanced(heat20, heat20_gramians):
    return balance(heat20, heat20_gramians)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(k, ok, detail)`` records a pass/fail line and fails the test when ``ok`` is false."""

    def record(k, ok, detail):
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
