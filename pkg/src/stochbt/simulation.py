"""Monte Carlo simulation of Levy-driven bilinear systems.

Noise model: ``M(t) = sqrt(theta) L W(t) + J(t)`` with ``L L^T = K``, ``W`` a
standard Brownian motion and ``J`` a compound Poisson process with rate
``jump_rate`` and Gaussian jumps of covariance ``(1 - theta) K / jump_rate``.
The jumps have mean zero, so ``J`` needs no compensator, and
``E[M(t) M(t)^T] = K t`` for every ``theta`` in ``[0, 1]``.

Paths are integrated by Euler-Maruyama with coefficients evaluated at the
left end point of each step.  Every path draws from its own counter-based
stream keyed by ``(seed, path_index)`` and paths are processed in chunks of
fixed size, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from ._fmt import atomic_write, write_csv
from .balancing import ReducedModel, error_bound, error_bound_with_multiplicity
from .system import StochasticBilinearSystem

__all__ = [
    "ControlSignal",
    "LevyConfig",
    "TrajectoryEnsemble",
    "BoundCheckReport",
    "EnergyReport",
    "SecondMomentReport",
    "MomentTrendReport",
    "SimulationBlowUpError",
    "control_signal",
    "l2_norm",
    "time_grid",
    "sample_levy_increments",
    "simulate_path",
    "simulate_ensemble",
    "verify_second_moment",
    "monte_carlo_output_error",
    "monte_carlo_error_sweep",
    "check_reachability_energy",
    "check_observability_energy",
    "white_noise_surrogate",
    "second_moment_trend",
    "write_bound_check_csv",
    "write_energy_csv",
    "CHUNK_SIZE",
]

CHUNK_SIZE = 256
BLOWUP_LIMIT = 1e150
CONTROL_KINDS = ("zero", "constant", "sine", "decaying_exp", "piecewise_constant")


class SimulationBlowUpError(FloatingPointError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"simulation blew up at step {step}")


# ---------------------------------------------------------------------------
# controls


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Deterministic control ``u: [0, T] -> R^m``.

    Per-channel ``amplitudes`` scale a common shape:

    ``zero``                ``0``
    ``constant``            ``a``
    ``sine``                ``a sin(2 pi frequency t + phase)``
    ``decaying_exp``        ``a exp(-rate t)``
    ``piecewise_constant``  ``values[j]`` on ``[breakpoints[j], breakpoints[j+1])``
    """

    kind: str
    m: int
    amplitudes: np.ndarray
    frequency: float = 1.0
    phase: float = 0.0
    rate: float = 1.0
    breakpoints: tuple = ()
    values: np.ndarray | None = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if self.kind == "zero":
            out = np.zeros((t.size, self.m))
        elif self.kind == "constant":
            out = np.broadcast_to(self.amplitudes, (t.size, self.m)).copy()
        elif self.kind == "sine":
            out = np.sin(2.0 * np.pi * self.frequency * t + self.phase)[:, None] * self.amplitudes
        elif self.kind == "decaying_exp":
            out = np.exp(-self.rate * t)[:, None] * self.amplitudes
        else:
            idx = np.searchsorted(np.asarray(self.breakpoints), t, side="right") - 1
            idx = np.clip(idx, 0, len(self.breakpoints) - 1)
            out = self.values[idx] * self.amplitudes
        return out[0] if scalar else out

    def l2_norm(self, T: float) -> float:
        return l2_norm(self, T)

    def scaled(self, factor: float) -> "ControlSignal":
        return ControlSignal(self.kind, self.m, self.amplitudes * float(factor), self.frequency, self.phase,
                             self.rate, self.breakpoints, self.values)

    def normalized(self, T: float, target: float = 1.0) -> "ControlSignal":
        """Copy rescaled so that ``||u||_{L^2(0,T)} = target``."""
        norm = self.l2_norm(T)
        if norm == 0.0:
            if target == 0.0:
                return self
            raise ValueError("cannot normalize the zero signal")
        return self.scaled(target / norm)


def control_signal(kind: str, m: int = 1, amplitude=1.0, **params) -> ControlSignal:
    """Build a :class:`ControlSignal`.

    Parameters
    ----------
    kind : {"zero", "constant", "sine", "decaying_exp", "piecewise_constant"}
    m : int
        Number of input channels.
    amplitude : float or array of length m
    **params
        ``frequency``, ``phase`` (sine), ``rate`` (decaying_exp),
        ``breakpoints`` starting at 0 and ``values`` of shape
        ``(len(breakpoints), m)`` (piecewise_constant).
    """
    if kind not in CONTROL_KINDS:
        raise ValueError(f"unknown control kind {kind!r}; choose from {CONTROL_KINDS}")
    if int(m) < 1:
        raise ValueError("m must be at least 1")
    m = int(m)
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), (m,)).copy()
    if not np.all(np.isfinite(amp)):
        raise ValueError("amplitudes must be finite")
    unknown = set(params) - {"frequency", "phase", "rate", "breakpoints", "values"}
    if unknown:
        raise ValueError(f"unknown control parameters {sorted(unknown)}")
    frequency = float(params.get("frequency", 1.0))
    phase = float(params.get("phase", 0.0))
    rate = float(params.get("rate", 1.0))
    if not (np.isfinite(frequency) and np.isfinite(phase) and np.isfinite(rate)):
        raise ValueError("control parameters must be finite")
    if kind == "decaying_exp" and rate < 0:
        raise ValueError("decaying_exp needs rate >= 0")
    breakpoints: tuple = ()
    values = None
    if kind == "piecewise_constant":
        breakpoints = tuple(float(b) for b in params.get("breakpoints", ()))
        if not breakpoints or breakpoints[0] != 0.0 or np.any(np.diff(breakpoints) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")
        values = np.array(params.get("values"), dtype=float).reshape(len(breakpoints), -1)
        if values.shape[1] == 1 and m > 1:
            values = np.repeat(values, m, axis=1)
        if values.shape != (len(breakpoints), m) or not np.all(np.isfinite(values)):
            raise ValueError(f"values must be finite with shape ({len(breakpoints)}, {m})")
    return ControlSignal(kind, m, amp, frequency, phase, rate, breakpoints, values)


def l2_norm(u: ControlSignal, T: float) -> float:
    """``(int_0^T ||u(t)||^2 dt)^{1/2}`` by adaptive quadrature."""
    if T < 0:
        raise ValueError("T must be non-negative")
    if u.kind == "zero" or T == 0:
        return 0.0
    points = [b for b in u.breakpoints if 0 < b < T] or None
    val, _ = integrate.quad(lambda t: float(np.sum(u(t) ** 2)), 0.0, T, epsabs=0.0, epsrel=1e-12,
                            limit=500, points=points)
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True, eq=False)
class LevyConfig:
    """Levy noise specification: covariance ``K``, Gaussian fraction ``theta``."""

    K: np.ndarray
    theta: float = 1.0
    jump_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if K.size == 0:
            K = np.zeros((0, 0))
        object.__setattr__(self, "K", K)
        if K.shape[0] != K.shape[1]:
            raise ValueError("K must be square")
        if not 0.0 <= float(self.theta) <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if not float(self.jump_rate) > 0:
            raise ValueError("jump_rate must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if K.size:
            if not np.allclose(K, K.T, rtol=0, atol=1e-12 * max(1.0, np.abs(K).max())):
                raise ValueError("K is not symmetric")
            w = np.linalg.eigvalsh(K)
            if w[0] < -1e-12 * max(1.0, w[-1]):
                raise ValueError(f"K is not positive semidefinite (min eigenvalue {w[0]:.3g})")

    @property
    def v(self) -> int:
        return self.K.shape[0]

    def factor(self) -> np.ndarray:
        """``L`` with ``L L^T = K``; a symmetric square root, so singular K is fine."""
        if self.v == 0:
            return np.zeros((0, 0))
        w, V = np.linalg.eigh(0.5 * (self.K + self.K.T))
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def time_grid(T: float, dt: float) -> tuple[np.ndarray, int]:
    """Uniform grid ``0, dt, ..., T``; ``T`` must be a multiple of ``dt``."""
    if not (dt > 0 and T > 0):
        raise ValueError("T and dt must be positive")
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
        raise ValueError(f"horizon T={T} is not an integer multiple of dt={dt}")
    return np.arange(steps + 1) * dt, steps


def _path_rng(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(path),))))


def _path_increments(cfg: LevyConfig, L: np.ndarray, steps: int, dt: float, path: int) -> np.ndarray:
    v = cfg.v
    if v == 0:
        return np.zeros((steps, 0))
    rng = _path_rng(cfg.seed, path)
    theta = float(cfg.theta)
    out = np.zeros((steps, v))
    if theta > 0:
        out += math.sqrt(theta * dt) * (rng.standard_normal((steps, v)) @ L.T)
    if theta < 1:
        counts = rng.poisson(cfg.jump_rate * dt, size=steps)
        z = rng.standard_normal((steps, v)) @ L.T
        out += np.sqrt(counts * (1.0 - theta) / cfg.jump_rate)[:, None] * z
    return out


def sample_levy_increments(cfg: LevyConfig, grid, n_paths: int, first_path: int = 0) -> np.ndarray:
    """Increments ``M(t_{j+1}) - M(t_j)`` as an array ``(n_paths, steps, v)``.

    Path ``first_path + p`` always receives the same increments, whatever
    batch it is requested in.
    """
    grid = np.asarray(grid, dtype=float)
    steps = grid.size - 1
    dts = np.diff(grid)
    if steps < 1 or np.any(dts <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    dt = float(dts[0])
    if not np.allclose(dts, dt, rtol=1e-9, atol=0):
        raise ValueError("grid must be uniform")
    L = cfg.factor()
    return np.stack([_path_increments(cfg, L, steps, dt, first_path + p) for p in range(n_paths)]) \
        if n_paths > 0 else np.zeros((0, steps, cfg.v))


# ---------------------------------------------------------------------------
# integrator


def _integrate(sys: StochasticBilinearSystem, U: np.ndarray, dM: np.ndarray, x0: np.ndarray, dt: float,
               keep_states: bool = False):
    """Euler-Maruyama on a batch; returns outputs ``(batch, steps+1, p)`` and optionally states."""
    batch, steps, v = dM.shape
    n = sys.n
    x = np.array(np.broadcast_to(x0, (batch, n)), dtype=float)
    Y = np.empty((batch, steps + 1, sys.p))
    X = np.empty((batch, steps + 1, n)) if keep_states else None
    Ct = sys.C.T
    Y[:, 0] = x @ Ct
    if keep_states:
        X[:, 0] = x
    Bu = U @ sys.B.T  # (steps, n)
    bilinear = sys.m > 0 and any(np.any(Nk) for Nk in sys.N)
    Ht = [Hi.T for Hi in sys.H]
    At = sys.A.T
    for j in range(steps):
        if bilinear:
            M = sys.A + sum(U[j, k] * sys.N[k] for k in range(sys.m))
            drift = x @ M.T
        else:
            drift = x @ At
        x_new = x + (drift + Bu[j]) * dt
        for i in range(v):
            x_new += dM[:, j, i:i + 1] * (x @ Ht[i])
        x = x_new
        if not np.all(np.abs(x) < BLOWUP_LIMIT):
            raise SimulationBlowUpError(j + 1)
        Y[:, j + 1] = x @ Ct
        if keep_states:
            X[:, j + 1] = x
    return Y, X


def _control_values(u: ControlSignal | None, m: int, grid: np.ndarray) -> np.ndarray:
    if u is None:
        return np.zeros((grid.size - 1, m))
    if u.m != m:
        raise ValueError(f"control has {u.m} channels, system has m={m}")
    return np.asarray(u(grid[:-1]), dtype=float).reshape(grid.size - 1, m)


def simulate_path(sys: StochasticBilinearSystem, u: ControlSignal | None, increments, x0=None, dt: float = 1e-3):
    """Integrate one path driven by the given increments ``(steps, v)``.

    Returns ``(states, outputs)`` of shapes ``(steps+1, n)`` and ``(steps+1, p)``.
    """
    dM = np.asarray(increments, dtype=float)
    if dM.ndim != 2 or dM.shape[1] != sys.v:
        raise ValueError(f"increments must have shape (steps, {sys.v})")
    if not dt > 0:
        raise ValueError("dt must be positive")
    grid = np.arange(dM.shape[0] + 1) * dt
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(sys.n)
    Y, X = _integrate(sys, _control_values(u, sys.m, grid), dM[None], x0, dt, keep_states=True)
    return X[0], Y[0]


def _chunks(n_paths: int):
    return [(s, min(CHUNK_SIZE, n_paths - s)) for s in range(0, n_paths, CHUNK_SIZE)]


def _map_chunks(fn, n_paths: int, workers: int):
    chunks = _chunks(n_paths)
    if workers <= 1 or len(chunks) <= 1:
        return [fn(s, c) for s, c in chunks]
    with ThreadPoolExecutor(max_workers=int(workers)) as ex:
        return list(ex.map(lambda sc: fn(*sc), chunks))


def _check_run(n_paths: int, workers: int):
    if int(n_paths) < 2:
        raise ValueError("n_paths must be at least 2")
    if int(workers) < 1:
        raise ValueError("workers must be at least 1")


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """States and outputs on a uniform grid; path ``p`` used stream ``(seed, p)``."""

    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    seed: int
    path_indices: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def dump(self, path) -> None:
        """Write ``path.json`` (header) and ``path.bin`` (states then outputs, float64 LE)."""
        path = os.fspath(path)
        header = {"shape_states": list(self.states.shape), "shape_outputs": list(self.outputs.shape),
                  "dtype": "<f8", "order": "C", "seed": int(self.seed), "dt": self.dt,
                  "n_times": int(self.times.size)}
        tmp = path + ".bin.tmp"
        with open(tmp, "wb") as fh:
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.outputs, dtype="<f8").tobytes())
        os.replace(tmp, path + ".bin")
        atomic_write(path + ".json", json.dumps(header, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TrajectoryEnsemble":
        path = os.fspath(path)
        with open(path + ".json", encoding="utf-8") as fh:
            h = json.load(fh)
        raw = np.fromfile(path + ".bin", dtype="<f8")
        ns = int(np.prod(h["shape_states"]))
        states = raw[:ns].reshape(h["shape_states"])
        outputs = raw[ns:].reshape(h["shape_outputs"])
        times = np.arange(h["n_times"]) * h["dt"]
        return cls(times, states, outputs, h["seed"], np.arange(states.shape[0]))


def simulate_ensemble(sys: StochasticBilinearSystem, u: ControlSignal | None, levy: LevyConfig, T: float,
                      dt: float, n_paths: int, x0=None, workers: int = 1) -> TrajectoryEnsemble:
    """Simulate and keep full trajectories (memory ``n_paths * steps * n``)."""
    if levy.v != sys.v:
        raise ValueError(f"noise dimension {levy.v} does not match system v={sys.v}")
    grid, steps = time_grid(T, dt)
    U = _control_values(u, sys.m, grid)
    L = levy.factor()
    x0 = np.zeros(sys.n) if x0 is None else np.asarray(x0, dtype=float).reshape(sys.n)

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Y, X = _integrate(sys, U, dM, x0, dt, keep_states=True)
        return X, Y

    parts = _map_chunks(run, int(n_paths), workers)
    return TrajectoryEnsemble(grid, np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                              int(levy.seed), np.arange(n_paths))


# ---------------------------------------------------------------------------
# statistics


def _mean_se(per_path: np.ndarray) -> tuple[float, float]:
    per_path = np.asarray(per_path, dtype=float)
    n = per_path.shape[0]
    mean = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return mean, se


def _sqrt_se(mean: float, se: float) -> float:
    # stderr of sqrt(mean): delta method for large means, sqrt(se) near zero
    mean = max(mean, 0.0)
    return math.sqrt(mean + se) - math.sqrt(mean)


def _trapezoid(f: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoidal rule along axis 1 of ``f`` (``(batch, steps+1)``)."""
    return dt * (np.sum(f, axis=1) - 0.5 * (f[:, 0] + f[:, -1]))


@dataclass(frozen=True)
class SecondMomentReport:
    estimate: float
    stderr: float
    analytic: float
    paths: int

    def within(self, k: float = 5.0) -> bool:
        return abs(self.estimate - self.analytic) <= k * self.stderr or self.estimate == self.analytic


def verify_second_moment(a, b, K, T: float = 1.0, dt: float = 1e-2, n_paths: int = 20000, seed: int = 0,
                         theta: float = 1.0, jump_rate: float = 1.0, workers: int = 1) -> SecondMomentReport:
    """Monte Carlo check of ``E[x^T x](T) = ||a||^2 T^2 + sum_ij b_i^T b_j k_ij T``.

    ``x`` solves ``dx = a dt + sum_i b_i dM_i`` with ``x(0) = 0``.  The
    equation is simulated by the bilinear integrator through the state
    augmentation ``z = (x, 1)``, ``H_i = [[0, b_i], [0, 0]]``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    d = a.size
    b = [np.asarray(bi, dtype=float).reshape(d) for bi in b]
    K = np.atleast_2d(np.asarray(K, dtype=float)).reshape(len(b), len(b))
    n = d + 1
    A = np.zeros((n, n))
    A[:d, d] = a
    H = []
    for bi in b:
        Hi = np.zeros((n, n))
        Hi[:d, d] = bi
        H.append(Hi)
    C = np.hstack([np.eye(d), np.zeros((d, 1))])
    aug = StochasticBilinearSystem.from_matrices(A, np.zeros((n, 1)), C, [np.zeros((n, n))], H, K)
    analytic = float(a @ a) * T ** 2 + float(sum(K[i, j] * (b[i] @ b[j]) for i in range(len(b))
                                                 for j in range(len(b)))) * T
    levy = LevyConfig(K, theta=theta, jump_rate=jump_rate, seed=seed)
    x0 = np.zeros(n)
    x0[d] = 1.0
    grid, steps = time_grid(T, dt)
    L = levy.factor()
    U = np.zeros((steps, 1))
    _check_run(n_paths, workers)

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Y, _ = _integrate(aug, U, dM, x0, dt)
        return np.sum(Y[:, -1] ** 2, axis=1)

    vals = np.concatenate(_map_chunks(run, int(n_paths), workers))
    mean, se = _mean_se(vals)
    return SecondMomentReport(mean, se, analytic, int(n_paths))


# ---------------------------------------------------------------------------
# bound checks


@dataclass(frozen=True)
class BoundCheckReport:
    """Monte Carlo estimate of ``(E ||y - y_r||^2_{L^2})^{1/2}`` against the truncation bound.

    ``satisfied`` means ``mc_error_estimate + 3 * mc_stderr <= theoretical_bound + atol``.
    """

    r: int
    mc_error_estimate: float
    mc_stderr: float
    theoretical_bound: float
    bound_with_multiplicity: float
    satisfied: bool
    paths: int
    dt: float
    u_l2_norm: float
    mean_sq: float
    mean_sq_stderr: float


def _setup(full, levy, u, T, dt, n_paths, workers):
    if levy.v != full.v:
        raise ValueError(f"noise dimension {levy.v} does not match system v={full.v}")
    if not np.allclose(levy.K, full.K, rtol=0, atol=0):
        raise ValueError("noise covariance of the Levy configuration differs from the system K")
    _check_run(n_paths, workers)
    grid, steps = time_grid(T, dt)
    return grid, steps, _control_values(u, full.m, grid), levy.factor()


def monte_carlo_error_sweep(full: StochasticBilinearSystem, models, u: ControlSignal | None, levy: LevyConfig,
                            T: float = 1.0, dt: float = 1e-3, n_paths: int = 2000, workers: int = 1,
                            atol: float = 1e-10) -> list[BoundCheckReport]:
    """:func:`monte_carlo_output_error` for several reduced models on shared noise paths."""
    models = list(models)
    grid, steps, U, L = _setup(full, levy, u, T, dt, n_paths, workers)
    for mdl in models:
        if mdl.sys_r.v != full.v or mdl.sys_r.m != full.m or mdl.sys_r.p != full.p:
            raise ValueError(f"reduced model r={mdl.r} has mismatched input, output or noise dimensions")

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Yf, _ = _integrate(full, U, dM, np.zeros(full.n), dt)
        out = np.empty((len(models), count))
        for k, mdl in enumerate(models):
            Yr, _ = _integrate(mdl.sys_r, U, dM, np.zeros(mdl.r), dt)
            out[k] = _trapezoid(np.sum((Yf - Yr) ** 2, axis=2), dt)
        return out

    per_path = np.concatenate(_map_chunks(run, int(n_paths), workers), axis=1)
    unorm = 0.0 if u is None else l2_norm(u, T)
    reports = []
    for k, mdl in enumerate(models):
        mean, se = _mean_se(per_path[k])
        est = math.sqrt(max(mean, 0.0))
        est_se = _sqrt_se(mean, se)
        bound = error_bound(mdl, unorm)
        reports.append(BoundCheckReport(
            r=mdl.r, mc_error_estimate=est, mc_stderr=est_se, theoretical_bound=bound,
            bound_with_multiplicity=error_bound_with_multiplicity(mdl, unorm),
            satisfied=bool(est + 3.0 * est_se <= bound + atol), paths=int(n_paths), dt=float(dt),
            u_l2_norm=unorm, mean_sq=mean, mean_sq_stderr=se))
    return reports


def monte_carlo_output_error(full: StochasticBilinearSystem, rom: ReducedModel, u: ControlSignal | None,
                             T: float = 1.0, dt: float = 1e-3, n_paths: int = 2000, seed: int = 0,
                             theta: float = 1.0, jump_rate: float = 1.0, workers: int = 1,
                             atol: float = 1e-10) -> BoundCheckReport:
    """Estimate the output error of ``rom`` against ``full`` from zero initial states.

    Both systems are driven by the same increments on every path.  The
    squared error ``int_0^T ||y - y_r||^2 dt`` is integrated per path by the
    trapezoidal rule.  ``atol`` absorbs the integrator rounding floor, which
    matters only when the bound itself is zero.
    """
    levy = LevyConfig(full.K, theta=theta, jump_rate=jump_rate, seed=seed)
    return monte_carlo_error_sweep(full, [rom], u, levy, T, dt, n_paths, workers, atol)[0]


@dataclass(frozen=True)
class EnergyReport:
    """Per-row energy check; rows are ``(k, lhs, stderr, bound, margin, satisfied)``."""

    lhs: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    satisfied_rows: np.ndarray
    paths: int
    dt: float
    u_l2_norm: float
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def margin(self) -> np.ndarray:
        return self.bound - self.lhs

    @property
    def satisfied(self) -> bool:
        return bool(np.all(self.satisfied_rows))


def check_reachability_energy(sys: StochasticBilinearSystem, P, u: ControlSignal | None, T: float = 1.0,
                              dt: float = 1e-3, n_paths: int = 2000, seed: int = 0, theta: float = 1.0,
                              jump_rate: float = 1.0, workers: int = 1) -> EnergyReport:
    """Per eigendirection ``p_k`` of ``P`` compare
    ``sup_t (E <x(t), p_k>^2)^{1/2}`` on the grid with
    ``lambda_k^{1/2} ||u|| exp(||u||^2 / 2)``; a row fails when the
    estimate exceeds the bound by more than three standard errors.
    """
    P = np.asarray(P, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (P + P.T))
    levy = LevyConfig(sys.K, theta=theta, jump_rate=jump_rate, seed=seed)
    grid, steps, U, L = _setup(sys, levy, u, T, dt, n_paths, workers)
    # outputs are the coordinates <x, p_k>
    proj = sys.replace(C=V.T, p=sys.n)

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Y, _ = _integrate(proj, U, dM, np.zeros(sys.n), dt)
        sq = Y ** 2
        return np.sum(sq, axis=0), np.sum(sq ** 2, axis=0)

    parts = _map_chunks(run, int(n_paths), workers)
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    npaths = int(n_paths)
    mean = s1 / npaths
    var = np.clip((s2 - npaths * mean ** 2) / (npaths - 1), 0.0, None)
    se = np.sqrt(var / npaths)
    t_star = np.argmax(mean, axis=0)
    cols = np.arange(sys.n)
    m_star = mean[t_star, cols]
    lhs = np.sqrt(m_star)
    lhs_se = np.array([_sqrt_se(mk, sk) for mk, sk in zip(m_star, se[t_star, cols])])
    unorm = 0.0 if u is None else l2_norm(u, T)
    bound = np.sqrt(np.clip(lam, 0.0, None)) * unorm * math.exp(0.5 * unorm ** 2)
    ok = lhs - 3.0 * lhs_se <= bound
    return EnergyReport(lhs, lhs_se, bound, ok, npaths, float(dt), unorm, lam)


def check_observability_energy(sys: StochasticBilinearSystem, Q, x0, u: ControlSignal | None, T: float = 1.0,
                               dt: float = 1e-3, n_paths: int = 2000, seed: int = 0, theta: float = 1.0,
                               jump_rate: float = 1.0, workers: int = 1) -> EnergyReport:
    """Compare ``E int_0^T ||y||^2 dt`` (with ``B = 0``) to ``x0^T Q x0 exp(||u||^2)``."""
    Q = np.asarray(Q, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(sys.n)
    free = sys.replace(B=np.zeros_like(sys.B))
    levy = LevyConfig(sys.K, theta=theta, jump_rate=jump_rate, seed=seed)
    grid, steps, U, L = _setup(free, levy, u, T, dt, n_paths, workers)

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Y, _ = _integrate(free, U, dM, x0, dt)
        return _trapezoid(np.sum(Y ** 2, axis=2), dt)

    vals = np.concatenate(_map_chunks(run, int(n_paths), workers))
    mean, se = _mean_se(vals)
    unorm = 0.0 if u is None else l2_norm(u, T)
    bound = float(x0 @ Q @ x0) * math.exp(unorm ** 2)
    ok = mean - 3.0 * se <= bound
    return EnergyReport(np.array([mean]), np.array([se]), np.array([bound]), np.array([ok]), int(n_paths),
                        float(dt), unorm)


# ---------------------------------------------------------------------------
# stability cross-check


def white_noise_surrogate(sys: StochasticBilinearSystem) -> StochasticBilinearSystem:
    """Uncontrolled system whose second moment obeys the full lifted operator.

    The bilinear terms ``N_k x u_k`` enter the stability operator as
    ``N_k (x) N_k``, the same way a multiplicative noise with unit intensity
    would.  The surrogate keeps ``A``, drops the input and appends ``N_k``
    as noise matrices with ``K' = blkdiag(K, I_m)``, so its lifted operator
    equals that of ``sys`` and its simulated second moment decays iff
    ``sys`` is mean-square stable.
    """
    H = tuple(sys.H) + tuple(sys.N)
    K = np.zeros((sys.v + sys.m, sys.v + sys.m))
    K[: sys.v, : sys.v] = sys.K
    K[sys.v:, sys.v:] = np.eye(sys.m)
    return StochasticBilinearSystem.from_matrices(sys.A, np.zeros((sys.n, 1)), sys.C,
                                                  [np.zeros_like(sys.A)], H, K)


@dataclass(frozen=True)
class MomentTrendReport:
    """``E||x(T)||^2``, ``E||x(2T)||^2`` and the per-path difference statistics."""

    m_T: float
    m_2T: float
    se_T: float
    se_2T: float
    diff_mean: float
    diff_se: float
    half_diff_mean: float
    half_diff_se: float

    @property
    def decays_by_half(self) -> bool:
        """``E||x(2T)||^2 <= E||x(T)||^2 / 2`` within three standard errors."""
        return self.half_diff_mean <= 3.0 * self.half_diff_se

    @property
    def decays(self) -> bool:
        """``E||x(2T)||^2 < E||x(T)||^2`` by more than three standard errors."""
        return self.diff_mean < -3.0 * self.diff_se

    @property
    def grows(self) -> bool:
        """``E||x(2T)||^2 > E||x(T)||^2`` by more than three standard errors."""
        return self.diff_mean > 3.0 * self.diff_se


def second_moment_trend(sys: StochasticBilinearSystem, x0, T: float, dt: float, n_paths: int = 2000,
                        seed: int = 0, theta: float = 1.0, jump_rate: float = 1.0,
                        workers: int = 1) -> MomentTrendReport:
    """Uncontrolled second moment at ``T`` and ``2T`` from ``x0`` (``B`` is ignored, ``u = 0``)."""
    x0 = np.asarray(x0, dtype=float).reshape(sys.n)
    levy = LevyConfig(sys.K, theta=theta, jump_rate=jump_rate, seed=seed)
    _check_run(n_paths, workers)
    grid, steps = time_grid(2 * T, dt)
    if steps % 2:
        raise ValueError("T must be a multiple of dt")
    L = levy.factor()
    free = sys.replace(C=np.eye(sys.n), p=sys.n)
    U = np.zeros((steps, sys.m))

    def run(start, count):
        dM = np.stack([_path_increments(levy, L, steps, dt, start + p) for p in range(count)])
        Y, _ = _integrate(free, U, dM, x0, dt)
        return np.stack([np.sum(Y[:, steps // 2] ** 2, axis=1), np.sum(Y[:, -1] ** 2, axis=1)], axis=1)

    vals = np.concatenate(_map_chunks(run, int(n_paths), workers))
    mT, seT = _mean_se(vals[:, 0])
    m2T, se2T = _mean_se(vals[:, 1])
    dm, dse = _mean_se(vals[:, 1] - vals[:, 0])
    hm, hse = _mean_se(vals[:, 1] - 0.5 * vals[:, 0])
    return MomentTrendReport(mT, m2T, seT, se2T, dm, dse, hm, hse)


# ---------------------------------------------------------------------------
# CSV


def write_bound_check_csv(path, reports, informative_ratio: float | None = None) -> None:
    header = ["r", "mc_error", "stderr", "bound", "satisfied"]
    if informative_ratio is not None:
        header.append("bound_informative")
    rows = []
    for rep in reports:
        row = [rep.r, rep.mc_error_estimate, rep.mc_stderr, rep.theoretical_bound, rep.satisfied]
        if informative_ratio is not None:
            row.append(math.exp(0.5 * rep.u_l2_norm ** 2) <= informative_ratio)
        rows.append(row)
    write_csv(path, header, rows)


def write_energy_csv(path, report: EnergyReport) -> None:
    rows = [(k + 1, report.lhs[k], report.bound[k], report.margin[k]) for k in range(report.lhs.size)]
    write_csv(path, ["k", "lhs", "bound", "margin"], rows)
