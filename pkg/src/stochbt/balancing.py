"""Balancing transformation, Hankel singular values and truncation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._fmt import write_csv
from .gramians import DefinitenessError, GramianPair, noise_operator
from .system import StochasticBilinearSystem

__all__ = [
    "BalancedRealization",
    "ReducedModel",
    "MultiplicitySplitWarning",
    "InheritedInequalityReport",
    "cholesky_factor",
    "hankel_singular_values",
    "balance",
    "distinct_values",
    "truncate",
    "error_bound",
    "error_bound_with_multiplicity",
    "check_inherited_inequalities",
    "write_hsv_csv",
    "write_bound_table",
]

# relative threshold for treating two HSVs as equal
DISTINCT_RTOL = 1e-10
CHOLESKY_PIVOT_TOL = 1e-14
UNBALANCEABLE_RTOL = 1e-14


class MultiplicitySplitWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class BalancedRealization:
    """Balanced system together with the transformation that produced it.

    ``sys_balanced`` has coefficients ``S A S^{-1}``, ``S B``, ``C S^{-1}``,
    ``S N_k S^{-1}``, ``S H_i S^{-1}`` and the same ``K``.
    """

    sys_balanced: StochasticBilinearSystem
    S: np.ndarray
    S_inv: np.ndarray
    sigma: np.ndarray
    original: StochasticBilinearSystem | None = None

    @property
    def n(self) -> int:
        return self.sys_balanced.n

    def errors(self, P, Q) -> dict:
        """Frobenius errors of the balancing identities for the Gramians ``P``, ``Q``."""
        D = np.diag(self.sigma)
        return {
            "S_S_inv": float(np.linalg.norm(self.S @ self.S_inv - np.eye(self.n))),
            "S_P_St": float(np.linalg.norm(self.S @ P @ self.S.T - D)),
            "Sinv_Q_Sinv": float(np.linalg.norm(self.S_inv.T @ Q @ self.S_inv - D)),
        }


@dataclass(frozen=True, eq=False)
class ReducedModel:
    """Truncated balanced system of order ``r``.

    ``distinct_values`` lists ``(value, multiplicity)`` pairs of the
    discarded HSVs ``sigma2`` in decreasing order.
    """

    sys_r: StochasticBilinearSystem
    r: int
    sigma: np.ndarray
    sigma2: np.ndarray
    distinct_values: tuple

    @property
    def distinct_sum(self) -> float:
        return float(sum(v for v, _ in self.distinct_values))


def cholesky_factor(M, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    Fails with :class:`DefinitenessError` (carrying the minimum eigenvalue)
    when the factorization breaks down or a squared pivot drops below
    ``1e-14 * trace(M)``.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        L = None
    if L is None or np.min(np.diag(L)) ** 2 < CHOLESKY_PIVOT_TOL * np.trace(M):
        min_eig = float(np.linalg.eigvalsh(M)[0])
        raise DefinitenessError(f"{name} is not numerically positive definite (min eigenvalue {min_eig:.3g})",
                                min_eig)
    return L


def _unpack(gramians):
    if isinstance(gramians, GramianPair):
        return gramians.P, gramians.Q
    P, Q = gramians
    return np.asarray(P, dtype=float), np.asarray(Q, dtype=float)


def hankel_singular_values(P, Q) -> np.ndarray:
    """Singular values of ``L_Q^T L_P``, i.e. square roots of ``eig(P Q)``, non-increasing."""
    L_P = cholesky_factor(P, "P")
    L_Q = cholesky_factor(Q, "Q")
    return np.linalg.svd(L_Q.T @ L_P, compute_uv=False)


def balance(sys: StochasticBilinearSystem, gramians) -> BalancedRealization:
    """Square-root balancing.

    With ``P = L_P L_P^T``, ``Q = L_Q L_Q^T`` and ``L_Q^T L_P = X Sigma Y^T``,
    ``S = Sigma^{-1/2} X^T L_Q^T`` and ``S^{-1} = L_P Y Sigma^{-1/2}``, so that
    ``S P S^T = S^{-T} Q S^{-1} = Sigma``.  Singular vector signs are fixed
    so that the largest entry of each column of ``X`` is positive.

    Raises
    ------
    DefinitenessError
        P or Q is not numerically positive definite.
    ValueError
        Smallest HSV below ``1e-14 * sigma_1``.
    """
    P, Q = _unpack(gramians)
    if P.shape != (sys.n, sys.n) or Q.shape != (sys.n, sys.n):
        raise ValueError(f"Gramians must be {sys.n}x{sys.n}")
    L_P = cholesky_factor(P, "P")
    L_Q = cholesky_factor(Q, "Q")
    X, sigma, Yt = np.linalg.svd(L_Q.T @ L_P)
    if sigma[-1] < UNBALANCEABLE_RTOL * sigma[0]:
        raise ValueError(f"smallest Hankel singular value {sigma[-1]:.3g} is below 1e-14 * sigma_1; "
                         "system is not balanceable to working precision")
    Y = Yt.T
    idx = np.argmax(np.abs(X), axis=0)
    signs = np.sign(X[idx, np.arange(sys.n)])
    signs[signs == 0] = 1.0
    X = X * signs
    Y = Y * signs
    scale = 1.0 / np.sqrt(sigma)
    S = (scale[:, None] * X.T) @ L_Q.T
    S_inv = (L_P @ Y) * scale[None, :]
    bal = sys.transform(S, S_inv)
    return BalancedRealization(sys_balanced=bal, S=S, S_inv=S_inv, sigma=sigma, original=sys)


def distinct_values(values, reference: float | None = None) -> tuple:
    """Group a non-increasing vector into ``(value, multiplicity)`` pairs.

    Entries within ``1e-10 * reference`` of the first member of the current
    group are counted in that group.  ``reference`` defaults to the largest
    entry.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return ()
    ref = float(values.max()) if reference is None else float(reference)
    thr = DISTINCT_RTOL * ref
    groups = []
    for x in values:
        if groups and abs(groups[-1][0] - x) <= thr:
            groups[-1][1] += 1
        else:
            groups.append([float(x), 1])
    return tuple((v, m) for v, m in groups)


def truncate(bal: BalancedRealization, r: int) -> ReducedModel:
    """Keep the leading ``r`` balanced states.

    ``r = n`` is accepted and returns the full balanced system with no
    discarded values.  A :class:`MultiplicitySplitWarning` is emitted when
    ``sigma_r`` and ``sigma_{r+1}`` are numerically equal.
    """
    n = bal.n
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= n:
        raise ValueError(f"reduction order r={r} out of range 1..{n}")
    r = int(r)
    sigma = bal.sigma
    if r < n and abs(sigma[r - 1] - sigma[r]) <= DISTINCT_RTOL * sigma[0]:
        warnings.warn(f"truncation at r={r} splits a group of equal Hankel singular values "
                      f"({sigma[r - 1]:.6g} = {sigma[r]:.6g})", MultiplicitySplitWarning, stacklevel=2)
    sigma2 = sigma[r:].copy()
    return ReducedModel(sys_r=bal.sys_balanced.leading_block(r), r=r, sigma=sigma.copy(), sigma2=sigma2,
                        distinct_values=distinct_values(sigma2, reference=sigma[0]))


def _bound(total: float, u_l2_norm: float) -> float:
    if u_l2_norm < 0:
        raise ValueError("u_l2_norm must be non-negative")
    if u_l2_norm == 0.0 or total == 0.0:
        return 0.0
    return 2.0 * total * u_l2_norm * float(np.exp(0.5 * u_l2_norm ** 2))


def error_bound(model: ReducedModel, u_l2_norm: float) -> float:
    """``2 * (sum of distinct discarded HSVs) * ||u|| * exp(||u||^2 / 2)``."""
    return _bound(model.distinct_sum, float(u_l2_norm))


def error_bound_with_multiplicity(model: ReducedModel, u_l2_norm: float) -> float:
    """Same as :func:`error_bound` but every discarded HSV counted with multiplicity."""
    return _bound(float(np.sum(model.sigma2)), float(u_l2_norm))


@dataclass(frozen=True)
class InheritedInequalityReport:
    r: int
    reach_max_eig: float
    reach_scale: float
    obs_max_eig: float
    obs_scale: float
    tol: float

    @property
    def reach_ok(self) -> bool:
        return self.reach_max_eig <= self.tol * self.reach_scale

    @property
    def obs_ok(self) -> bool:
        return self.obs_max_eig <= self.tol * self.obs_scale

    @property
    def passed(self) -> bool:
        return self.reach_ok and self.obs_ok


def check_inherited_inequalities(model: ReducedModel, tol: float = 1e-8) -> InheritedInequalityReport:
    """Check the reduced blocks against the diagonal Gramian ``Sigma_1``.

    Reachability: ``A11^T S1 + S1 A11 + Pi_11(S1) + S1 B1 B1^T S1 <= 0`` with
    ``S1 = Sigma_1^{-1}``.  Observability:
    ``A11^T Sigma_1 + Sigma_1 A11 + Pi_11(Sigma_1) + C1^T C1 <= 0``.
    Each largest eigenvalue is compared with ``tol`` times the sum of the
    norms of the terms.
    """
    s = model.sys_r
    sig1 = model.sigma[: model.r]

    def parts(W):
        lin = s.A.T @ W + W @ s.A
        return [lin, noise_operator(W, s.N, s.H, s.K)]

    Yi = np.diag(1.0 / sig1)
    YB = Yi @ s.B
    reach_terms = parts(Yi) + [YB @ YB.T]
    obs_terms = parts(np.diag(sig1)) + [s.C.T @ s.C]
    out = []
    for terms in (reach_terms, obs_terms):
        M = sum(terms)
        M = 0.5 * (M + M.T)
        out.append((float(np.linalg.eigvalsh(M)[-1]), float(sum(np.linalg.norm(T, 2) for T in terms))))
    return InheritedInequalityReport(r=model.r, reach_max_eig=out[0][0], reach_scale=out[0][1],
                                     obs_max_eig=out[1][0], obs_scale=out[1][1], tol=tol)


def write_hsv_csv(path, sigma) -> None:
    write_csv(path, ["index", "value"], [(i + 1, float(s)) for i, s in enumerate(sigma)])


def write_bound_table(path, bal: BalancedRealization, u_l2_norm: float, orders=None) -> None:
    """Rows ``(r, bound_distinct, bound_with_multiplicity)`` for each order."""
    orders = range(1, bal.n) if orders is None else orders
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MultiplicitySplitWarning)
        for r in orders:
            m = truncate(bal, r)
            rows.append((r, error_bound(m, u_l2_norm), error_bound_with_multiplicity(m, u_l2_norm)))
    write_csv(path, ["r", "bound_distinct", "bound_with_multiplicity"], rows)
