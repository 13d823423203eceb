"""Command-line interface: ``stochbt {stability,gramians,reduce,validate}``.

Settings come from an optional TOML or JSON run configuration
(``--config``) and are overridden by command-line flags.  Exit codes:
0 success, 1 a mathematical gate failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__
from ._fmt import atomic_write
from .balancing import (MultiplicitySplitWarning, balance, check_inherited_inequalities, truncate,
                        write_bound_table, write_hsv_csv)
from .gramians import (ConvergenceError, DefinitenessError, SolverOptions, compute_gramians, load_gramians,
                       save_gramians)
from .simulation import (LevyConfig, SimulationBlowUpError, check_observability_energy,
                         check_reachability_energy, control_signal, monte_carlo_error_sweep,
                         write_bound_check_csv, write_energy_csv)
from .system import (DEFAULT_STABILITY_CAP, DimensionCapError, SystemFileError, SystemValidationError,
                     UnstableSystemError, build_heat_example, check_mean_square_stability, load_system,
                     save_system)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_GATE, EXIT_USAGE = 0, 1, 2

# name -> (type, default); every entry is a flag and a config key
SETTINGS = {
    "system": (str, None),
    "heat": (int, None),
    "noise_scale": (float, 0.0),
    "bilinear_scale": (float, 0.0),
    "r": (int, None),
    "r_sweep": (str, None),
    "paths": (int, 2000),
    "dt": (float, 1e-3),
    "horizon": (float, 1.0),
    "seed": (int, 0),
    "theta": (float, 1.0),
    "jump_rate": (float, 1.0),
    "out": (str, "out"),
    "epsilon": (float, None),
    "method": (str, "newton"),
    "inner_lyapunov": (str, "direct_kronecker"),
    "input_regularization": (float, 1e-6),
    "output_regularization": (float, 1e-6),
    "max_iterations": (int, 100),
    "gramians": (str, None),
    "control": (str, "decaying_exp"),
    "control_norm": (float, 1.0),
    "control_rate": (float, 1.0),
    "control_frequency": (float, 1.0),
    "workers": (int, 1),
    "informative_ratio": (float, 10.0),
    "max_dim": (int, DEFAULT_STABILITY_CAP),
    "energy": (bool, False),
}


class UsageError(Exception):
    pass


def _flatten(data: dict, out: dict | None = None) -> dict:
    out = {} if out is None else out
    for key, val in data.items():
        if isinstance(val, dict):
            _flatten(val, out)
        else:
            out[key.replace("-", "_")] = val
    return out


def load_config(path) -> dict:
    """Flat settings from a TOML or JSON file; tables are merged into one namespace."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        if str(path).endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a table")
    flat = _flatten(data)
    unknown = sorted(set(flat) - set(SETTINGS))
    if unknown:
        raise UsageError(f"{path}: unknown settings {unknown}")
    return flat


def resolve_settings(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    out = {}
    for name, (typ, default) in SETTINGS.items():
        val = getattr(args, name, None)
        if val is None:
            val = cfg.get(name, default)
        if val is not None and typ is not str:
            try:
                val = typ(val)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"setting {name}: cannot convert {val!r} to {typ.__name__}") from exc
        out[name] = val
    for name in ("paths", "workers", "max_iterations"):
        if out[name] < 1:
            raise UsageError(f"{name} must be at least 1")
    for name in ("dt", "horizon", "jump_rate"):
        if not out[name] > 0:
            raise UsageError(f"{name} must be positive")
    if not 0 <= out["theta"] <= 1:
        raise UsageError("theta must lie in [0, 1]")
    if out["system"] is not None and out["heat"] is not None:
        raise UsageError("give either --system or --heat, not both")
    if out["r"] is not None and out["r_sweep"] is not None:
        raise UsageError("give either --r or --r-sweep, not both")
    return out


def parse_sweep(text: str) -> list[int]:
    """``"A..B"`` (inclusive) or a comma list ``"2,5,10"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if lo > hi:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse r sweep {text!r}; use A..B or a comma list") from exc


def load_input_system(s: dict):
    if s["system"] is not None:
        try:
            return load_system(s["system"])
        except FileNotFoundError as exc:
            raise UsageError(f"system file not found: {s['system']}") from exc
        except OSError as exc:
            raise UsageError(f"cannot read system file {s['system']}: {exc.strerror}") from exc
        except (SystemFileError, SystemValidationError) as exc:
            raise UsageError(str(exc)) from exc
    if s["heat"] is not None:
        if s["heat"] < 1:
            raise UsageError("--heat needs a positive size")
        return build_heat_example(s["heat"], s["noise_scale"], s["bilinear_scale"])
    raise UsageError("no system given; use --system PATH or --heat N")


def solver_options(s: dict) -> SolverOptions:
    try:
        return SolverOptions(epsilon=s["epsilon"], method=s["method"], inner_lyapunov=s["inner_lyapunov"],
                             input_regularization=s["input_regularization"],
                             output_regularization=s["output_regularization"],
                             max_iterations=s["max_iterations"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def orders(s: dict, n: int) -> list[int]:
    if s["r"] is not None:
        rs = [s["r"]]
    elif s["r_sweep"] is not None:
        rs = parse_sweep(s["r_sweep"])
    else:
        rs = list(range(1, n))
    bad = [r for r in rs if not 1 <= r <= n]
    if bad or not rs:
        raise UsageError(f"reduction order(s) {bad} out of range 1..{n}")
    return rs


def make_control(s: dict, m: int):
    kind = s["control"]
    params = {}
    if kind == "decaying_exp":
        params["rate"] = s["control_rate"]
    elif kind == "sine":
        params["frequency"] = s["control_frequency"]
    elif kind not in ("zero", "constant"):
        raise UsageError(f"control kind {kind!r} is not available from the command line")
    u = control_signal(kind, m, **params)
    if kind == "zero" or s["control_norm"] == 0.0:
        return control_signal("zero", m)
    return u.normalized(s["horizon"], s["control_norm"])


def _warn(msg) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _gramians(sys_, s: dict):
    if s["gramians"] is not None:
        try:
            g = load_gramians(s["gramians"])
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot load Gramians from {s['gramians']}: {exc}") from exc
        if g.P.shape != (sys_.n, sys_.n):
            raise UsageError(f"Gramians in {s['gramians']} do not match system order {sys_.n}")
        return g
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g = compute_gramians(sys_, solver_options(s))
    for w in caught:
        _warn(w.message)
    return g


# ---------------------------------------------------------------------------
# commands


def cmd_stability(s: dict) -> int:
    sys_ = load_input_system(s)
    try:
        rep = check_mean_square_stability(sys_, max_dim=s["max_dim"])
    except DimensionCapError as exc:
        raise UsageError(str(exc)) from exc
    print(f"spectral_abscissa={rep.spectral_abscissa:.17g}")
    print(f"stable={'true' if rep.stable else 'false'}")
    return EXIT_OK if rep.stable else EXIT_GATE


def cmd_gramians(s: dict) -> int:
    sys_ = load_input_system(s)
    g = _gramians(sys_, s)
    tol_p = 1e-8 * float(np.linalg.norm(sys_.A, 2))
    tol_q = 1e-10 * max(1.0, float(np.linalg.norm(sys_.C.T @ sys_.C)))
    os.makedirs(s["out"], exist_ok=True)
    save_gramians(g, s["out"])
    print(f"method={g.metadata.get('method')} epsilon={g.epsilon:.6g} iterations={g.metadata.get('iterations')}")
    print(f"p_residual_mineig={g.p_residual_mineig:.6g} (gate >= {-tol_p:.3g})")
    print(f"q_residual_norm={g.q_residual_norm:.6g} (gate <= {tol_q:.3g})")
    if g.p_residual_mineig < -tol_p or g.q_residual_norm > tol_q:
        print("residual gate failed", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_reduce(s: dict) -> int:
    sys_ = load_input_system(s)
    rs = orders(s, sys_.n)
    g = _gramians(sys_, s)
    bal = balance(sys_, g)
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    save_system(bal.sys_balanced, os.path.join(out, "balanced.json"))
    write_hsv_csv(os.path.join(out, "hsv.csv"), bal.sigma)
    u = make_control(s, sys_.m)
    write_bound_table(os.path.join(out, "bounds.csv"), bal, u.l2_norm(s["horizon"]), rs)
    status = EXIT_OK
    for r in rs:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MultiplicitySplitWarning)
            model = truncate(bal, r)
        for w in caught:
            _warn(w.message)
        save_system(model.sys_r, os.path.join(out, f"rom_r{r}.json"))
        if r < sys_.n:
            rep = check_inherited_inequalities(model)
            if not rep.passed:
                _warn(f"r={r}: inherited inequalities fail (reach {rep.reach_max_eig:.3g}, obs {rep.obs_max_eig:.3g})")
                status = EXIT_GATE
    print(f"wrote balanced system, HSVs and {len(rs)} reduced model(s) to {out}")
    return status


def cmd_validate(s: dict) -> int:
    sys_ = load_input_system(s)
    rs = orders(s, sys_.n)
    g = _gramians(sys_, s)
    bal = balance(sys_, g)
    u = make_control(s, sys_.m)
    unorm = u.l2_norm(s["horizon"])
    levy = LevyConfig(sys_.K, theta=s["theta"], jump_rate=s["jump_rate"], seed=s["seed"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MultiplicitySplitWarning)
        models = [truncate(bal, r) for r in rs]
    for w in caught:
        _warn(w.message)
    sim = dict(T=s["horizon"], dt=s["dt"], n_paths=s["paths"], workers=s["workers"])
    try:
        reports = monte_carlo_error_sweep(sys_, models, u, levy, **sim)
    except SimulationBlowUpError:
        reports = []
        for mdl in models:
            try:
                reports.extend(monte_carlo_error_sweep(sys_, [mdl], u, levy, **sim))
            except SimulationBlowUpError as exc:
                _warn(f"r={mdl.r}: {exc}")
                reports.append(_failed_row(mdl.r, s, unorm))
    out = s["out"]
    os.makedirs(out, exist_ok=True)
    write_bound_check_csv(os.path.join(out, "bound_check.csv"), reports)
    exp_term = math.exp(0.5 * unorm ** 2)
    informative = exp_term <= s["informative_ratio"]
    for rep in reports:
        print(f"r={rep.r} mc_error={rep.mc_error_estimate:.6g} stderr={rep.mc_stderr:.3g} "
              f"bound={rep.theoretical_bound:.6g} satisfied={'true' if rep.satisfied else 'false'}")
    if not informative:
        print(f"bound not informative: exp(||u||^2/2) = {exp_term:.6g} exceeds ratio {s['informative_ratio']:.6g}")
    summary = {"u_l2_norm": unorm, "exp_factor": exp_term, "bound_informative": informative,
               "all_satisfied": all(r.satisfied for r in reports)}
    ok = summary["all_satisfied"]
    if s["energy"]:
        seeds = dict(seed=s["seed"], theta=s["theta"], jump_rate=s["jump_rate"], **sim)
        reach = check_reachability_energy(sys_, g.P, u, **seeds)
        write_energy_csv(os.path.join(out, "energy_reachability.csv"), reach)
        x0 = np.ones(sys_.n) / math.sqrt(sys_.n)
        obs = check_observability_energy(sys_, g.Q, x0, u, **seeds)
        write_energy_csv(os.path.join(out, "energy_observability.csv"), obs)
        print(f"reachability energy satisfied={'true' if reach.satisfied else 'false'}; "
              f"observability energy satisfied={'true' if obs.satisfied else 'false'}")
        summary["energy_satisfied"] = reach.satisfied and obs.satisfied
        ok = ok and summary["energy_satisfied"]
    atomic_write(os.path.join(out, "summary.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_GATE


def _failed_row(r, s, unorm):
    from .simulation import BoundCheckReport
    nan = float("nan")
    return BoundCheckReport(r=r, mc_error_estimate=nan, mc_stderr=nan, theoretical_bound=nan,
                            bound_with_multiplicity=nan, satisfied=False, paths=s["paths"], dt=s["dt"],
                            u_l2_norm=unorm, mean_sq=nan, mean_sq_stderr=nan)


COMMANDS = {"stability": cmd_stability, "gramians": cmd_gramians, "reduce": cmd_reduce, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    src = common.add_argument_group("system")
    src.add_argument("--system", help="system JSON file")
    src.add_argument("--heat", type=int, metavar="N", help="use the heat benchmark of order N")
    src.add_argument("--noise-scale", type=float)
    src.add_argument("--bilinear-scale", type=float)
    red = common.add_argument_group("reduction")
    red.add_argument("--r", type=int, help="single reduction order")
    red.add_argument("--r-sweep", metavar="A..B", help="inclusive range A..B or comma list")
    red.add_argument("--gramians", metavar="DIR", help="reuse P.json/Q.json from DIR")
    sol = common.add_argument_group("solver")
    sol.add_argument("--epsilon", type=float)
    sol.add_argument("--method", choices=["newton", "lagged_fixed_point", "direct_kronecker"])
    sol.add_argument("--inner-lyapunov", choices=["direct_kronecker", "lagged_bartels_stewart"])
    sol.add_argument("--input-regularization", type=float)
    sol.add_argument("--output-regularization", type=float)
    sol.add_argument("--max-iterations", type=int)
    sol.add_argument("--max-dim", type=int, help="state dimension cap of the stability test")
    sim = common.add_argument_group("simulation")
    sim.add_argument("--paths", type=int)
    sim.add_argument("--dt", type=float)
    sim.add_argument("--horizon", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--theta", type=float)
    sim.add_argument("--jump-rate", type=float)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--control", choices=["zero", "constant", "sine", "decaying_exp"])
    sim.add_argument("--control-norm", type=float)
    sim.add_argument("--control-rate", type=float)
    sim.add_argument("--control-frequency", type=float)
    sim.add_argument("--energy", action="store_true", default=None, help="also run the energy checks")
    sim.add_argument("--informative-ratio", type=float)
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="stochbt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stability", parents=[common], help="mean-square stability test")
    sub.add_parser("gramians", parents=[common], help="compute and write P and Q")
    sub.add_parser("reduce", parents=[common], help="balance and truncate")
    sub.add_parser("validate", parents=[common], help="Monte Carlo check of the error bound")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        settings = resolve_settings(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnstableSystemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (ConvergenceError, DefinitenessError, np.linalg.LinAlgError, SimulationBlowUpError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except ValueError as exc:
        # numerical preconditions (e.g. an unbalanceable system)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
