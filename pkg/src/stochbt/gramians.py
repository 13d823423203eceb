"""Reachability and observability Gramians.

The observability Gramian ``Q`` solves the generalized Lyapunov equation

    A^T Q + Q A + sum_k N_k^T Q N_k + sum_ij k_ij H_i^T Q H_j = -C^T C.

The reachability Gramian ``P`` is any positive definite matrix whose inverse
``Y = P^{-1}`` satisfies the Riccati-type inequality

    A^T Y + Y A + Pi(Y) + Y B B^T Y <= 0,

with ``Pi`` the combined N- and H-sums above.  The inequality has many
solutions; smaller P gives smaller Hankel singular values and a tighter
truncation bound, so the solver looks for a large Y.

Both Gramians accept a relative regularization ``delta`` which replaces
``B B^T`` by ``B B^T + delta I`` (respectively ``C^T C`` by ``C^T C + delta I``).
Solutions of the regularized problems satisfy the original inequalities
with margin, keep both Gramians positive definite when (A, B) or (A, C) is
only numerically controllable/observable, and bound the condition number of Y.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from ._fmt import atomic_write, fmt_matrix
from .system import (StochasticBilinearSystem, UnstableSystemError, check_mean_square_stability,
                     lifted_operator)

__all__ = [
    "SolverOptions",
    "GramianPair",
    "ReachabilityResult",
    "ConvergenceError",
    "DefinitenessError",
    "GramianDefinitenessWarning",
    "apply_noise_operator",
    "noise_operator",
    "generalized_lyapunov_residual",
    "solve_generalized_lyapunov",
    "solve_observability_gramian",
    "solve_reachability_gramian",
    "residual_reachability",
    "schur_block",
    "compute_gramians",
    "save_gramians",
    "load_gramians",
]

METHODS = ("newton", "lagged_fixed_point", "direct_kronecker")
INNER_METHODS = ("direct_kronecker", "lagged_bartels_stewart")


class ConvergenceError(RuntimeError):
    """An iteration did not reach its tolerance; ``residual`` holds the last value."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class DefinitenessError(ValueError):
    """A matrix that must be (semi)definite is not; ``min_eig`` reports by how much."""

    def __init__(self, message: str, min_eig: float = float("nan")):
        self.min_eig = min_eig
        super().__init__(message)


class GramianDefinitenessWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverOptions:
    """Options shared by the Gramian solvers.

    ``epsilon=None`` means ``1e-8 * ||A||_F``.  ``input_regularization`` and
    ``output_regularization`` are relative to ``||B||_2^2`` and ``||C||_2^2``.
    ``convergence_tol`` is the relative residual gate of every generalized
    Lyapunov solve; ``gate_tol`` (times ``||A||_2``) is the acceptance
    tolerance of the reachability inequality.
    """

    epsilon: float | None = None
    max_iterations: int = 100
    convergence_tol: float = 1e-10
    method: str = "newton"
    inner_lyapunov: str = "direct_kronecker"
    input_regularization: float = 1e-6
    output_regularization: float = 1e-6
    direct_max_n: int = 60
    gate_tol: float = 1e-8
    newton_tol: float = 1e-12
    stability_check_max_n: int = 40
    continuation_bisections: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.inner_lyapunov not in INNER_METHODS:
            raise ValueError(f"unknown inner_lyapunov {self.inner_lyapunov!r}; choose from {INNER_METHODS}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (self.convergence_tol > 0 and self.gate_tol > 0 and self.newton_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.input_regularization < 0 or self.output_regularization < 0:
            raise ValueError("regularization must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    def resolve_epsilon(self, A) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return 1e-8 * max(float(np.linalg.norm(A, "fro")), 1e-300)


@dataclass(frozen=True)
class ReachabilityResult:
    P: np.ndarray
    Y: np.ndarray
    epsilon: float
    regularization: float
    method: str
    iterations: int
    residual_min_eig: float
    candidates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GramianPair:
    P: np.ndarray
    Q: np.ndarray
    p_residual_mineig: float
    q_residual_norm: float
    epsilon: float
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# noise operator


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(_sym(M))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def noise_operator(Y, N: Sequence, H: Sequence, K) -> np.ndarray:
    """``sum_k N_k^T Y N_k + sum_ij k_ij H_i^T Y H_j`` for any square Y."""
    Y = np.asarray(Y, dtype=float)
    out = np.zeros_like(Y)
    for Nk in N:
        out += Nk.T @ Y @ Nk
    K = np.asarray(K, dtype=float)
    for i, Hi in enumerate(H):
        HiY = Hi.T @ Y
        for j, Hj in enumerate(H):
            if K[i, j] != 0.0:
                out += K[i, j] * (HiY @ Hj)
    return out


def apply_noise_operator(matrices: Sequence, Y, K, tol: float = 1e-12) -> np.ndarray:
    """``sum_ij k_ij A_i^T Y A_j`` for symmetric PSD ``Y`` and ``K``.

    With ``Y = R^T R`` and ``K = L L^T`` the sum equals ``sum_l Z_l^T Z_l``,
    ``Z_l = sum_i L_il R A_i``, which is how it is evaluated: the result is
    a Gram matrix and stays PSD in floating point.

    Raises
    ------
    DefinitenessError
        If ``Y`` or ``K`` has an eigenvalue below ``-tol * max(1, norm)``.
    """
    mats = [np.asarray(M, dtype=float) for M in matrices]
    Y = np.asarray(Y, dtype=float)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (len(mats), len(mats)):
        raise ValueError(f"K has shape {K.shape}, expected {(len(mats), len(mats))}")
    for name, M in (("Y", Y), ("K", K)):
        scale = max(1.0, float(np.linalg.norm(M, 2))) if M.size else 1.0
        if M.size and float(np.max(np.abs(M - M.T))) > tol * scale:
            raise DefinitenessError(f"{name} is not symmetric")
        min_eig = float(np.linalg.eigvalsh(_sym(M))[0]) if M.size else 0.0
        if min_eig < -tol * scale:
            raise DefinitenessError(f"{name} is not positive semidefinite (min eigenvalue {min_eig:.3g})", min_eig)
    if not mats:
        return np.zeros_like(Y)
    R = _psd_sqrt(Y)
    L = _psd_sqrt(K)
    RA = [R @ M for M in mats]
    out = np.zeros((mats[0].shape[1], mats[0].shape[1]))
    for col in range(L.shape[1]):
        Z = sum(L[i, col] * RA[i] for i in range(len(mats)) if L[i, col] != 0.0)
        if isinstance(Z, np.ndarray):
            out += Z.T @ Z
    return _sym(out)


# ---------------------------------------------------------------------------
# generalized Lyapunov equation


def generalized_lyapunov_residual(A, N, H, K, X, rhs) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return A.T @ X + X @ A + noise_operator(X, N, H, K) - rhs


def _solve_direct(Abar, N, H, K, R) -> np.ndarray:
    n = Abar.shape[0]
    M = lifted_operator(Abar, N, H, K).T
    try:
        with warnings.catch_warnings():
            # singularity is detected from the pivots below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(M, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise np.linalg.LinAlgError(f"lifted operator could not be factorized: {exc}") from exc
    if np.min(np.abs(np.diag(lu[0]))) <= np.finfo(float).eps * np.max(np.abs(np.diag(lu[0]))):
        raise np.linalg.LinAlgError("lifted Lyapunov operator is singular to working precision")
    b = R.reshape(-1)
    x = sla.lu_solve(lu, b)
    # two steps of iterative refinement
    for _ in range(2):
        x = x + sla.lu_solve(lu, b - M @ x)
    return _sym(x.reshape(n, n))


def _solve_lagged(Abar, N, H, K, R, opts: SolverOptions) -> tuple[np.ndarray, int]:
    X = sla.solve_continuous_lyapunov(Abar.T, R)
    scale = max(1.0, float(np.linalg.norm(R)))
    res = np.inf
    for it in range(1, opts.max_iterations + 1):
        X_new = _sym(sla.solve_continuous_lyapunov(Abar.T, R - noise_operator(X, N, H, K)))
        if not np.all(np.isfinite(X_new)):
            break
        step = float(np.linalg.norm(X_new - X))
        X = X_new
        if step <= 1e-2 * opts.convergence_tol * max(float(np.linalg.norm(X)), 1e-300):
            return X, it
        res = float(np.linalg.norm(generalized_lyapunov_residual(Abar, N, H, K, X, R))) / scale
    raise ConvergenceError(
        f"lagged Bartels-Stewart iteration did not converge in {opts.max_iterations} sweeps "
        f"(relative residual {res:.3g})", residual=res, iterations=opts.max_iterations)


def _solve_lifted(Abar, N, H, K, R, opts: SolverOptions) -> tuple[np.ndarray, int]:
    n = Abar.shape[0]
    if opts.inner_lyapunov == "direct_kronecker" and n <= opts.direct_max_n:
        return _solve_direct(Abar, N, H, K, R), 1
    return _solve_lagged(Abar, N, H, K, R, opts)


def solve_generalized_lyapunov(sys: StochasticBilinearSystem, rhs, opts: SolverOptions | None = None) -> np.ndarray:
    """Solve ``A^T X + X A + Pi(X) = rhs`` for symmetric negative semidefinite ``rhs``.

    Raises
    ------
    UnstableSystemError
        The system fails the mean-square stability test (checked when
        ``n <= opts.stability_check_max_n``).
    numpy.linalg.LinAlgError
        The lifted operator is singular.
    ConvergenceError
        The residual ``||A^T X + X A + Pi(X) - rhs||_F`` exceeds
        ``convergence_tol * max(1, ||rhs||_F)``.
    """
    opts = opts or SolverOptions()
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (sys.n, sys.n):
        raise ValueError(f"rhs has shape {rhs.shape}, expected {(sys.n, sys.n)}")
    if sys.n <= opts.stability_check_max_n:
        rep = check_mean_square_stability(sys)
        if not rep.stable:
            raise UnstableSystemError(rep.spectral_abscissa)
    X, _ = _solve_lifted(sys.A, sys.N, sys.H, sys.K, _sym(rhs), opts)
    res = float(np.linalg.norm(generalized_lyapunov_residual(sys.A, sys.N, sys.H, sys.K, X, rhs)))
    if res > opts.convergence_tol * max(1.0, float(np.linalg.norm(rhs))):
        raise ConvergenceError(f"generalized Lyapunov residual {res:.3g} above tolerance", residual=res)
    return X


def solve_observability_gramian(sys: StochasticBilinearSystem, opts: SolverOptions | None = None) -> np.ndarray:
    """Observability Gramian with right-hand side ``-(C^T C + delta I)``.

    ``delta = opts.output_regularization * ||C||_2^2``; pass
    ``output_regularization=0`` for the unregularized equation.  A warning
    (not an error) is emitted when the result is not positive definite.
    """
    opts = opts or SolverOptions()
    CtC = sys.C.T @ sys.C
    delta = opts.output_regularization * float(np.linalg.norm(sys.C, 2)) ** 2
    Q = solve_generalized_lyapunov(sys, -(CtC + delta * np.eye(sys.n)), opts)
    min_eig = float(np.linalg.eigvalsh(Q)[0])
    if not min_eig > 0.0:
        warnings.warn(f"observability Gramian is not positive definite (min eigenvalue {min_eig:.3g})",
                      GramianDefinitenessWarning, stacklevel=2)
    return Q


# ---------------------------------------------------------------------------
# reachability inequality


def _inverse_spd(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    try:
        c = sla.cho_factor(_sym(P))
    except np.linalg.LinAlgError as exc:
        min_eig = float(np.linalg.eigvalsh(_sym(P))[0])
        raise DefinitenessError(f"P is not positive definite (min eigenvalue {min_eig:.3g})", min_eig) from exc
    d = np.diag(c[0]) ** 2
    if np.min(d) <= np.finfo(float).eps * np.max(d) * 1e-2:
        raise np.linalg.LinAlgError("P is not invertible to working precision")
    eye = np.eye(P.shape[0])
    Y = sla.cho_solve(c, eye)
    # one refinement step
    Y = Y + sla.cho_solve(c, eye - P @ Y)
    return _sym(Y)


def residual_reachability(sys: StochasticBilinearSystem, P) -> tuple[np.ndarray, float]:
    """Residual of the reachability inequality at ``Y = P^{-1}``.

    Returns ``R = A^T Y + Y A + Pi(Y) + Y B B^T Y`` and the smallest
    eigenvalue of ``-R``; ``P`` is admissible iff that eigenvalue is >= -tol.
    """
    Y = _inverse_spd(P)
    YB = Y @ sys.B
    R = _sym(sys.A.T @ Y + Y @ sys.A + noise_operator(Y, sys.N, sys.H, sys.K) + YB @ YB.T)
    return R, float(np.linalg.eigvalsh(-R)[0])


def schur_block(sys: StochasticBilinearSystem, P) -> np.ndarray:
    """``[[A^T Y + Y A + Pi(Y), Y B], [B^T Y, -I]]`` with ``Y = P^{-1}``.

    Negative semidefinite iff ``P`` satisfies the reachability inequality.
    """
    Y = _inverse_spd(P)
    top = sys.A.T @ Y + Y @ sys.A + noise_operator(Y, sys.N, sys.H, sys.K)
    YB = Y @ sys.B
    return _sym(np.block([[top, YB], [YB.T, -np.eye(sys.m)]]))


def _riccati(A, N, H, K, G, eps, Y):
    return A.T @ Y + Y @ A + noise_operator(Y, N, H, K) + Y @ G @ Y + eps * np.eye(A.shape[0])


def _newton_from_above(A, N, H, K, G, eps, opts: SolverOptions):
    """Newton iteration started at ``c I`` with ``c`` doubled until the residual is PSD."""
    n = A.shape[0]
    eye = np.eye(n)
    base = A + A.T + noise_operator(eye, N, H, K)
    c = 1.0
    for _ in range(200):
        if np.linalg.eigvalsh(c * base + c * c * G + eps * eye)[0] >= 0.0:
            break
        c *= 2.0
    else:
        raise ConvergenceError("no initial point c*I with PSD residual (B B^T + delta I singular?)")
    Y = c * eye
    prev = np.inf
    for it in range(1, opts.max_iterations + 1):
        Y_new, _ = _solve_lifted(A + G @ Y, N, H, K, -eps * eye + Y @ G @ Y, opts)
        if not np.all(np.isfinite(Y_new)):
            raise ConvergenceError("Newton iterate is not finite", iterations=it)
        step = float(np.linalg.norm(Y_new - Y)) / max(float(np.linalg.norm(Y_new)), 1e-300)
        Y = Y_new
        if step <= opts.newton_tol or (step < 1e-8 and step >= prev):
            break
        prev = step
    else:
        res = float(np.linalg.norm(_riccati(A, N, H, K, G, eps, Y)))
        raise ConvergenceError(f"Newton iteration did not converge (last step {step:.3g})", residual=res,
                               iterations=opts.max_iterations)
    min_eig = float(np.linalg.eigvalsh(Y)[0])
    if not min_eig > 0:
        raise DefinitenessError(f"Newton limit is not positive definite (min eigenvalue {min_eig:.3g})", min_eig)
    return Y, it


def _newton_stabilizing(A, N, H, K, G, eps, opts: SolverOptions):
    """Newton iteration from ``Y = 0``; iterates increase monotonically.

    Returns ``(Y, iterations)`` or ``None`` when the iteration loses
    monotonicity or finiteness, i.e. the shifted equation has no solution.
    """
    n = A.shape[0]
    eye = np.eye(n)
    Y = np.zeros((n, n))
    for it in range(1, opts.max_iterations + 1):
        try:
            Y_new, _ = _solve_lifted(A + G @ Y, N, H, K, -eps * eye + Y @ G @ Y, opts)
        except (np.linalg.LinAlgError, ConvergenceError):
            return None
        if not np.all(np.isfinite(Y_new)):
            return None
        norm_new = float(np.linalg.norm(Y_new))
        if np.linalg.eigvalsh(Y_new - Y)[0] < -1e-9 * norm_new:
            return None
        step = float(np.linalg.norm(Y_new - Y)) / max(norm_new, 1e-300)
        Y = Y_new
        if step <= opts.newton_tol:
            return Y, it
        if not np.any(G):
            # linear equation: one step is exact
            return Y, it
    return None


def _continuation(A, N, H, K, G, eps0, opts: SolverOptions):
    """Largest shift on the stabilizing branch, found by expansion and geometric bisection."""
    first = _newton_stabilizing(A, N, H, K, G, eps0, opts)
    if first is None:
        raise ConvergenceError(f"no stabilizing solution of the shifted equation at epsilon={eps0:.3g}")
    lo, best = eps0, first
    hi = None
    for _ in range(60):
        trial = _newton_stabilizing(A, N, H, K, G, lo * 4.0, opts)
        if trial is None:
            hi = lo * 4.0
            break
        lo, best = lo * 4.0, trial
    if hi is None:
        return best, lo
    for _ in range(opts.continuation_bisections):
        mid = float(np.sqrt(lo * hi))
        trial = _newton_stabilizing(A, N, H, K, G, mid, opts)
        if trial is None:
            hi = mid
        else:
            lo, best = mid, trial
    return best, lo


def _lagged_fixed_point(A, N, H, K, G, eps, opts: SolverOptions):
    """``A^T Y_{j+1} + Y_{j+1} A = -eps I - Pi(Y_j) - Y_j G Y_j`` from ``Y_0 = 0``."""
    n = A.shape[0]
    eye = np.eye(n)
    Y = np.zeros((n, n))
    for it in range(1, 50 * opts.max_iterations + 1):
        rhs = -eps * eye - noise_operator(Y, N, H, K) - Y @ G @ Y
        Y_new = _sym(sla.solve_continuous_lyapunov(A.T, rhs))
        if not np.all(np.isfinite(Y_new)):
            raise ConvergenceError("lagged fixed-point iteration diverged", iterations=it)
        step = float(np.linalg.norm(Y_new - Y)) / max(float(np.linalg.norm(Y_new)), 1e-300)
        Y = Y_new
        if step <= opts.newton_tol:
            return Y, it
    raise ConvergenceError("lagged fixed-point iteration did not converge",
                           residual=float(np.linalg.norm(_riccati(A, N, H, K, G, eps, Y))),
                           iterations=50 * opts.max_iterations)


def solve_reachability_gramian(sys: StochasticBilinearSystem, opts: SolverOptions | None = None) -> ReachabilityResult:
    """Reachability Gramian ``P = Y^{-1}`` from the shifted Riccati-type equation.

    ``Y`` solves ``A^T Y + Y A + Pi(Y) + Y G Y + eps I = 0`` with
    ``G = B B^T + delta I``.  Methods:

    ``newton``
        Newton's method started above the solution set.  The solution on the
        stabilizing branch with the largest admissible shift is computed as
        well, and the candidate with the smaller ``trace(P)`` is returned.
        Either one serves as fallback if the other fails.
    ``lagged_fixed_point``
        Quadratic and noise terms lagged around a standard Lyapunov solve.
        Converges to the smallest Y (largest, most conservative P).
    ``direct_kronecker``
        Only for ``G = 0`` (no input and no regularization), where the
        equation is linear and is solved in one step.

    Every result is gated by :func:`residual_reachability`.
    """
    opts = opts or SolverOptions()
    if sys.n <= opts.stability_check_max_n:
        rep = check_mean_square_stability(sys)
        if not rep.stable:
            raise UnstableSystemError(rep.spectral_abscissa)
    A, N, H, K = sys.A, sys.N, sys.H, sys.K
    n = sys.n
    eps = opts.resolve_epsilon(A)
    delta = opts.input_regularization * float(np.linalg.norm(sys.B, 2)) ** 2
    G = sys.B @ sys.B.T + delta * np.eye(n)

    candidates: dict[str, tuple] = {}
    errors: dict[str, str] = {}
    if not np.any(G) or opts.method == "direct_kronecker":
        if np.any(G):
            raise ValueError("method 'direct_kronecker' needs B = 0 and zero input regularization")
        Y, _ = _solve_lifted(A, N, H, K, -eps * np.eye(n), opts)
        candidates["direct_kronecker"] = (Y, eps, 1)
    elif opts.method == "lagged_fixed_point":
        Y, it = _lagged_fixed_point(A, N, H, K, G, eps, opts)
        candidates["lagged_fixed_point"] = (Y, eps, it)
    else:
        try:
            Y, it = _newton_from_above(A, N, H, K, G, eps, opts)
            candidates["newton"] = (Y, eps, it)
        except (ConvergenceError, DefinitenessError, np.linalg.LinAlgError) as exc:
            errors["newton"] = str(exc)
        try:
            (Y, it), eps_c = _continuation(A, N, H, K, G, eps, opts)
            candidates["newton_stabilizing_continuation"] = (Y, eps_c, it)
        except (ConvergenceError, np.linalg.LinAlgError) as exc:
            errors["newton_stabilizing_continuation"] = str(exc)

    gate = opts.gate_tol * float(np.linalg.norm(A, 2))
    accepted = []
    traces = {}
    for name, (Y, eps_used, it) in candidates.items():
        if not np.linalg.eigvalsh(Y)[0] > 0:
            errors[name] = "solution not positive definite"
            continue
        P = _inverse_spd(Y)
        try:
            _, min_eig = residual_reachability(sys, P)
        except (DefinitenessError, np.linalg.LinAlgError) as exc:
            errors[name] = str(exc)
            continue
        if min_eig < -gate:
            errors[name] = f"inequality residual min eigenvalue {min_eig:.3g} below -{gate:.3g}"
            continue
        traces[name] = float(np.trace(P))
        accepted.append((traces[name], name, P, Y, eps_used, it, min_eig))
    if not accepted:
        detail = "; ".join(f"{k}: {v}" for k, v in errors.items())
        raise ConvergenceError(f"no admissible reachability Gramian found ({detail})")
    accepted.sort(key=lambda t: (t[0], t[1]))
    _, name, P, Y, eps_used, it, min_eig = accepted[0]
    return ReachabilityResult(P=P, Y=Y, epsilon=eps_used, regularization=delta, method=name, iterations=it,
                              residual_min_eig=min_eig, candidates={"trace_P": traces, "errors": errors})


# ---------------------------------------------------------------------------


def compute_gramians(sys: StochasticBilinearSystem, opts: SolverOptions | None = None) -> GramianPair:
    """Both Gramians with residual diagnostics."""
    opts = opts or SolverOptions()
    reach = solve_reachability_gramian(sys, opts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GramianDefinitenessWarning)
        Q = solve_observability_gramian(sys, opts)
    for w in caught:
        warnings.warn(w.message, w.category, stacklevel=2)
    delta_q = opts.output_regularization * float(np.linalg.norm(sys.C, 2)) ** 2
    rhs = -(sys.C.T @ sys.C + delta_q * np.eye(sys.n))
    q_res = float(np.linalg.norm(generalized_lyapunov_residual(sys.A, sys.N, sys.H, sys.K, Q, rhs)))
    meta = {
        "method": reach.method,
        "iterations": reach.iterations,
        "epsilon": reach.epsilon,
        "input_regularization": reach.regularization,
        "output_regularization": delta_q,
        "p_residual_mineig": reach.residual_min_eig,
        "q_residual_norm": q_res,
        "q_min_eig": float(np.linalg.eigvalsh(Q)[0]),
        "p_min_eig": float(np.linalg.eigvalsh(reach.P)[0]),
        "candidates_trace_P": reach.candidates.get("trace_P", {}),
    }
    return GramianPair(P=reach.P, Q=Q, p_residual_mineig=reach.residual_min_eig, q_residual_norm=q_res,
                       epsilon=reach.epsilon, metadata=meta)


def save_gramians(pair: GramianPair, directory) -> tuple[str, str]:
    """Write ``P.json`` and ``Q.json``; each carries the shared metadata block."""
    os.makedirs(directory, exist_ok=True)
    meta = json.dumps(pair.metadata, sort_keys=True, default=float)
    paths = []
    for name, M in (("P", pair.P), ("Q", pair.Q)):
        path = os.path.join(directory, f"{name}.json")
        text = '{\n  "n": %d,\n  "%s": %s,\n  "metadata": %s\n}\n' % (M.shape[0], name, fmt_matrix(M), meta)
        atomic_write(path, text)
        paths.append(path)
    return paths[0], paths[1]


def load_gramians(directory) -> GramianPair:
    mats = {}
    meta = {}
    for name in ("P", "Q"):
        path = os.path.join(directory, f"{name}.json")
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if name not in data:
            raise ValueError(f"{path}: missing field {name!r}")
        M = np.array(data[name], dtype=float)
        if M.ndim != 2 or M.shape != (data.get("n"), data.get("n")):
            raise ValueError(f"{path}: {name} has shape {M.shape}, expected n x n with n={data.get('n')}")
        mats[name] = M
        meta = data.get("metadata", {})
    return GramianPair(P=mats["P"], Q=mats["Q"], p_residual_mineig=float(meta.get("p_residual_mineig", np.nan)),
                       q_residual_norm=float(meta.get("q_residual_norm", np.nan)),
                       epsilon=float(meta.get("epsilon", np.nan)), metadata=meta)
