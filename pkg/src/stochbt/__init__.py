"""Balanced truncation for stochastic bilinear systems driven by Levy noise."""

__version__ = "0.1.0"

from .system import (StochasticBilinearSystem, StabilityReport, ValidationReport, build_heat_example,
                     check_mean_square_stability, lifted_operator, load_system, save_system, validate_system)
from .gramians import (GramianPair, SolverOptions, apply_noise_operator, compute_gramians, residual_reachability,
                       schur_block, solve_generalized_lyapunov, solve_observability_gramian,
                       solve_reachability_gramian)
from .balancing import (BalancedRealization, ReducedModel, balance, check_inherited_inequalities, error_bound,
                        error_bound_with_multiplicity, hankel_singular_values, truncate)
from .simulation import (BoundCheckReport, ControlSignal, LevyConfig, TrajectoryEnsemble, check_observability_energy,
                         check_reachability_energy, control_signal, l2_norm, monte_carlo_error_sweep,
                         monte_carlo_output_error, sample_levy_increments, simulate_ensemble, simulate_path,
                         verify_second_moment)
