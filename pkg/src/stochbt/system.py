"""Stochastic bilinear system model.

The state equation is

    dx = [A x + B u + sum_k N_k x u_k] dt + sum_i H_i x(t-) dM_i,    y = C x,

where ``M`` is a mean-zero, square-integrable Levy process with
``E[M(t) M(t)^T] = K t``.  This module holds the data model, validation, the
mean-square stability test, the heat-equation benchmark and JSON file I/O.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from ._fmt import atomic_write, fmt_matrix

__all__ = [
    "StochasticBilinearSystem",
    "StabilityReport",
    "ValidationReport",
    "Violation",
    "SystemFileError",
    "SystemValidationError",
    "UnstableSystemError",
    "DimensionCapError",
    "validate_system",
    "lifted_operator",
    "check_mean_square_stability",
    "build_heat_example",
    "save_system",
    "load_system",
    "system_to_dict",
    "system_from_dict",
]

#: Relative tolerance for symmetry and positive semidefiniteness of ``K``.
PSD_TOL = 1e-12
#: Default cap on the state dimension for the dense n^2 x n^2 eigensolve.
DEFAULT_STABILITY_CAP = 200


class SystemFileError(ValueError):
    """A system file could not be parsed."""


class SystemValidationError(ValueError):
    """A system violates its structural invariants."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        msgs = "; ".join(f"{v.name} ({v.magnitude:.3g})" for v in report.violations)
        super().__init__(f"invalid system: {msgs}")


class UnstableSystemError(ValueError):
    """The lifted second-moment operator has an eigenvalue with Re >= 0."""

    def __init__(self, abscissa: float, message: str | None = None):
        self.abscissa = abscissa
        super().__init__(message or f"system is not mean-square stable (spectral abscissa {abscissa:.6g} >= 0)")


class DimensionCapError(ValueError):
    """The n^2 x n^2 eigenproblem exceeds the configured dimension cap."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StochasticBilinearSystem:
    """Coefficients of a stochastic bilinear control system.

    ``N`` holds one n x n matrix per input channel and ``H`` one per noise
    channel.  Arrays are copied and made read-only on construction.  Use
    :meth:`from_matrices` to infer the dimensions.
    """

    n: int
    m: int
    p: int
    v: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    N: tuple = field(default_factory=tuple)
    H: tuple = field(default_factory=tuple)
    K: np.ndarray = None

    def __post_init__(self):
        for name in ("A", "B", "C", "K"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "N", tuple(_frozen(x) for x in self.N))
        object.__setattr__(self, "H", tuple(_frozen(x) for x in self.H))
        for name in ("n", "m", "p", "v"):
            object.__setattr__(self, name, int(getattr(self, name)))

    @classmethod
    def from_matrices(cls, A, B, C, N: Sequence, H: Sequence, K) -> "StochasticBilinearSystem":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        C = np.asarray(C, dtype=float)
        if C.ndim == 1:
            C = C.reshape(1, -1)
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return cls(n=A.shape[0], m=B.shape[1], p=C.shape[0], v=K.shape[0],
                   A=A, B=B, C=C, N=tuple(N), H=tuple(H), K=K)

    def transform(self, S, S_inv) -> "StochasticBilinearSystem":
        """State-space transformation ``x_new = S x``."""
        S = np.asarray(S, dtype=float)
        S_inv = np.asarray(S_inv, dtype=float)
        return StochasticBilinearSystem(
            n=self.n, m=self.m, p=self.p, v=self.v,
            A=S @ self.A @ S_inv, B=S @ self.B, C=self.C @ S_inv,
            N=tuple(S @ Nk @ S_inv for Nk in self.N),
            H=tuple(S @ Hi @ S_inv for Hi in self.H),
            K=self.K,
        )

    def leading_block(self, r: int) -> "StochasticBilinearSystem":
        """Left upper r x r blocks of A, N_k, H_i; first r rows of B; first r columns of C."""
        return StochasticBilinearSystem(
            n=r, m=self.m, p=self.p, v=self.v,
            A=self.A[:r, :r], B=self.B[:r, :], C=self.C[:, :r],
            N=tuple(Nk[:r, :r] for Nk in self.N),
            H=tuple(Hi[:r, :r] for Hi in self.H),
            K=self.K,
        )

    def replace(self, **changes) -> "StochasticBilinearSystem":
        data = dict(n=self.n, m=self.m, p=self.p, v=self.v, A=self.A, B=self.B,
                    C=self.C, N=self.N, H=self.H, K=self.K)
        data.update(changes)
        return StochasticBilinearSystem(**data)

    def equals(self, other: "StochasticBilinearSystem") -> bool:
        """Bitwise equality of dimensions and all coefficient matrices."""
        if (self.n, self.m, self.p, self.v) != (other.n, other.m, other.p, other.v):
            return False
        if len(self.N) != len(other.N) or len(self.H) != len(other.H):
            return False
        pairs = [(self.A, other.A), (self.B, other.B), (self.C, other.C), (self.K, other.K)]
        pairs += list(zip(self.N, other.N)) + list(zip(self.H, other.H))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


@dataclass(frozen=True)
class Violation:
    name: str
    magnitude: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    violations: tuple[Violation, ...] = ()

    def names(self) -> list[str]:
        return [v.name for v in self.violations]


@dataclass(frozen=True)
class StabilityReport:
    spectral_abscissa: float
    stable: bool
    margin: float


def validate_system(sys: StochasticBilinearSystem) -> ValidationReport:
    """Check dimensions, finiteness and symmetry/semidefiniteness of ``K``.

    Every failure is collected; nothing is raised.
    """
    out: list[Violation] = []
    n, m, p, v = sys.n, sys.m, sys.p, sys.v

    for name, val in (("n", n), ("m", m), ("p", p), ("v", v)):
        if val < 1:
            out.append(Violation(f"{name} not positive", float(abs(val)), f"{name}={val}"))

    expected = {"A": (n, n), "B": (n, m), "C": (p, n), "K": (v, v)}
    for name, shape in expected.items():
        got = getattr(sys, name).shape
        if got != shape:
            out.append(Violation(f"{name} dimension mismatch", 1.0, f"expected {shape}, got {got}"))
    if len(sys.N) != m:
        out.append(Violation("N count mismatch", float(abs(len(sys.N) - m)), f"expected {m}, got {len(sys.N)}"))
    if len(sys.H) != v:
        out.append(Violation("H count mismatch", float(abs(len(sys.H) - v)), f"expected {v}, got {len(sys.H)}"))
    for label, mats in (("N", sys.N), ("H", sys.H)):
        for k, M in enumerate(mats):
            if M.shape != (n, n):
                out.append(Violation(f"{label}[{k}] dimension mismatch", 1.0, f"expected {(n, n)}, got {M.shape}"))

    named = [("A", sys.A), ("B", sys.B), ("C", sys.C), ("K", sys.K)]
    named += [(f"N[{k}]", M) for k, M in enumerate(sys.N)]
    named += [(f"H[{k}]", M) for k, M in enumerate(sys.H)]
    for name, M in named:
        bad = int(np.size(M) - np.count_nonzero(np.isfinite(M)))
        if bad:
            out.append(Violation(f"non-finite entries in {name}", float(bad)))

    K = sys.K
    if K.ndim == 2 and K.shape[0] == K.shape[1] and K.size and np.all(np.isfinite(K)):
        scale = max(1.0, float(np.linalg.norm(K, 2)))
        asym = float(np.max(np.abs(K - K.T)))
        if asym > PSD_TOL * scale:
            out.append(Violation("K not symmetric", asym))
        min_eig = float(np.linalg.eigvalsh(0.5 * (K + K.T))[0])
        if min_eig < -PSD_TOL * scale:
            out.append(Violation("K not PSD", abs(min_eig), f"min eigenvalue {min_eig:.6g}"))

    return ValidationReport(passed=not out, violations=tuple(out))


def lifted_operator(A, N: Sequence, H: Sequence, K) -> np.ndarray:
    """``A (x) I + I (x) A + sum N_k (x) N_k + sum_ij k_ij H_i (x) H_j``.

    Acting on the row-major vectorization of ``X`` it is the generator of the
    second moment ``E[x x^T]`` when the inputs multiplying ``N_k`` are white
    noise; its transpose is the generalized Lyapunov operator
    ``X -> A^T X + X A + sum N_k^T X N_k + sum k_ij H_i^T X H_j``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    eye = np.eye(n)
    L = np.kron(A, eye) + np.kron(eye, A)
    for Nk in N:
        L += np.kron(Nk, Nk)
    K = np.asarray(K, dtype=float)
    for i, Hi in enumerate(H):
        for j, Hj in enumerate(H):
            if K[i, j] != 0.0:
                L += K[i, j] * np.kron(Hi, Hj)
    return L


def check_mean_square_stability(sys: StochasticBilinearSystem,
                                max_dim: int = DEFAULT_STABILITY_CAP) -> StabilityReport:
    """Spectral abscissa of the lifted operator by a dense eigensolve.

    Costs O(n^6); ``max_dim`` caps the state dimension.
    """
    if sys.n > max_dim:
        raise DimensionCapError(
            f"state dimension {sys.n} exceeds the stability-check cap {max_dim} "
            f"(dense {sys.n ** 2}x{sys.n ** 2} eigenproblem)")
    L = lifted_operator(sys.A, sys.N, sys.H, sys.K)
    try:
        eigs = sla.eigvals(L, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"eigensolver failed on the lifted operator: {exc}") from exc
    abscissa = float(np.max(eigs.real))
    return StabilityReport(spectral_abscissa=abscissa, stable=abscissa < 0.0, margin=abs(abscissa))


def _laplacian_1d(n: int) -> np.ndarray:
    return (n + 1) ** 2 * (np.diag(-2.0 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1))


def build_heat_example(n: int, noise_scale: float = 0.0, bilinear_scale: float = 0.0) -> StochasticBilinearSystem:
    """Finite-difference 1-D heat equation with boundary control.

    ``A`` is the Dirichlet Laplacian on n interior nodes, the control enters
    at the first node, the output is the spatial mean, ``N_1 = bilinear_scale*I``,
    ``H_1 = noise_scale*I`` and ``K = [1]``.

    Because N_1 and H_1 are multiples of the identity the lifted operator has
    eigenvalues ``lam_i + lam_j + bilinear_scale^2 + noise_scale^2``, so the
    abscissa is available in closed form and the check runs for any n.

    Raises
    ------
    UnstableSystemError
        If the parameters make the system mean-square unstable.
    """
    if n < 2:
        raise ValueError(f"heat example needs n >= 2, got {n}")
    if noise_scale < 0 or bilinear_scale < 0:
        raise ValueError("noise_scale and bilinear_scale must be non-negative")
    A = _laplacian_1d(n)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = np.ones((1, n)) / n
    eye = np.eye(n)
    sys = StochasticBilinearSystem(n=n, m=1, p=1, v=1, A=A, B=B, C=C,
                                   N=(bilinear_scale * eye,), H=(noise_scale * eye,), K=np.ones((1, 1)))
    lam_max = (n + 1) ** 2 * (-2.0 + 2.0 * math.cos(math.pi / (n + 1)))
    abscissa = 2.0 * lam_max + bilinear_scale ** 2 + noise_scale ** 2
    if abscissa >= 0.0:
        raise UnstableSystemError(
            abscissa,
            f"heat example with noise_scale={noise_scale}, bilinear_scale={bilinear_scale} "
            f"is not mean-square stable: spectral abscissa {abscissa:.6g} >= 0")
    return sys


# ---------------------------------------------------------------------------
# file I/O

_FIELDS = ("n", "m", "p", "v", "A", "B", "C", "N", "H", "K")


def system_to_dict(sys: StochasticBilinearSystem) -> dict:
    return {
        "n": sys.n, "m": sys.m, "p": sys.p, "v": sys.v,
        "A": sys.A.tolist(), "B": sys.B.tolist(), "C": sys.C.tolist(),
        "N": [M.tolist() for M in sys.N], "H": [M.tolist() for M in sys.H],
        "K": sys.K.tolist(),
    }


def system_to_json(sys: StochasticBilinearSystem, extra: dict | None = None) -> str:
    parts = [f'  "{k}": {getattr(sys, k)}' for k in ("n", "m", "p", "v")]
    parts += [f'  "{k}": {fmt_matrix(getattr(sys, k))}' for k in ("A", "B", "C")]
    for k in ("N", "H"):
        mats = ", ".join(fmt_matrix(M) for M in getattr(sys, k))
        parts.append(f'  "{k}": [{mats}]')
    parts.append(f'  "K": {fmt_matrix(sys.K)}')
    if extra:
        for key, val in extra.items():
            parts.append(f"  {json.dumps(key)}: {json.dumps(val, sort_keys=True)}")
    return "{\n" + ",\n".join(parts) + "\n}\n"


def _parse_matrix(obj, name: str, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    if not isinstance(obj, list) or not all(isinstance(r, list) for r in obj):
        raise SystemFileError(f"field {name!r}: expected a matrix as a list of rows")
    widths = {len(r) for r in obj}
    if len(widths) > 1:
        raise SystemFileError(f"field {name!r}: ragged rows (lengths {sorted(widths)})")
    for i, row in enumerate(obj):
        for j, x in enumerate(row):
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise SystemFileError(f"field {name!r}: entry [{i}][{j}] is not a number: {x!r}")
    M = np.array(obj, dtype=float).reshape(len(obj), widths.pop() if widths else 0)
    if rows is not None and M.shape[0] != rows or cols is not None and M.shape[1] != cols:
        raise SystemFileError(f"field {name!r}: expected shape {(rows, cols)}, got {M.shape}")
    return M


def system_from_dict(data: dict) -> StochasticBilinearSystem:
    """Build and validate a system from the decoded JSON object."""
    if not isinstance(data, dict):
        raise SystemFileError("top-level JSON value must be an object")
    missing = [k for k in _FIELDS if k not in data]
    if missing:
        raise SystemFileError(f"missing field(s): {', '.join(repr(k) for k in missing)}")
    dims = {}
    for k in ("n", "m", "p", "v"):
        val = data[k]
        if isinstance(val, bool) or not isinstance(val, int):
            raise SystemFileError(f"field {k!r}: expected an integer, got {val!r}")
        dims[k] = val
    K = _parse_matrix(data["K"], "K")
    if K.shape[0] != K.shape[1]:
        raise SystemFileError(f"field 'K': must be square, got shape {K.shape}")
    mats = {k: _parse_matrix(data[k], k) for k in ("A", "B", "C")}
    lists = {}
    for k in ("N", "H"):
        if not isinstance(data[k], list):
            raise SystemFileError(f"field {k!r}: expected a list of matrices")
        lists[k] = tuple(_parse_matrix(M, f"{k}[{i}]") for i, M in enumerate(data[k]))
    sys = StochasticBilinearSystem(**dims, **mats, N=lists["N"], H=lists["H"], K=K)
    report = validate_system(sys)
    if not report.passed:
        raise SystemValidationError(report)
    return sys


def save_system(sys: StochasticBilinearSystem, path) -> None:
    """Write ``sys`` as UTF-8 JSON with 17 significant digits per entry."""
    atomic_write(path, system_to_json(sys))


def load_system(path) -> StochasticBilinearSystem:
    """Read a system file written by :func:`save_system` (or by hand).

    Raises
    ------
    SystemFileError
        Malformed JSON (with line/column), missing or malformed fields.
    SystemValidationError
        Well-formed file whose dimensions or ``K`` violate the invariants.
    """
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemFileError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return system_from_dict(data)
    except SystemFileError as exc:
        raise SystemFileError(f"{path}: {exc}") from exc
