"""Interacting-particle flocking simulations driven by one shared noise.

The package integrates a velocity-alignment particle system whose every
member feels the same scalar Brownian motion through a deviation-proportional
coefficient, checks the resulting trajectories against exponential decay and
comparison bounds, measures empirical distances in Wasserstein metrics, and
packages batch experiments behind a CLI.
"""

from .brownian import (BrownianPath, derive_seed, load_path, refine,
                       sample_path, save_path, value_at)
from .dynamics import (Ensemble, GaussianBump, ObservableSeries,
                       PathwiseBoundsReport, PolynomialCutoff, SimConfig,
                       check_pathwise_bounds, export_observables_csv,
                       export_trajectory_csv, kinetic_energy,
                       make_test_function, mean_velocity, simulate, step_ito,
                       step_stratonovich_heun, support_radius,
                       tolerance_epsilon, validate_gradients,
                       variance_functional, weak_form_residual)
from .errors import BlowupError, ConfigError
from .experiments import (GronwallInstance, RateFit, as_decay_check,
                          concentration_study, fit_decay_rate, gronwall_check,
                          meanfield_study, phase_sweep, scheme_gap_study,
                          simulate_study, stability_experiment,
                          stability_sweep, weak_residual_study)
from .kernels import (CommunicationKernel, alignment_force,
                      alignment_force_all, eval_psi)
from .laws import GaussianBox, TwoClusterBox, UniformBox, make_law
from .report import SCHEMA_VERSION, ExperimentReport
from .transport import (EmpiricalMeasure, TransportPlan, export_plan_csv,
                        quantization_error_bound, quantize_grid, sinkhorn_w2,
                        to_uniform_ensemble, w1_general, w2_bruteforce,
                        w2_exact_uniform, w2_general)

__version__ = "0.1.0"

__all__ = [
    "BlowupError", "BrownianPath", "CommunicationKernel", "ConfigError",
    "EmpiricalMeasure", "Ensemble", "ExperimentReport", "GaussianBox",
    "GaussianBump", "GronwallInstance", "ObservableSeries",
    "PathwiseBoundsReport", "PolynomialCutoff", "RateFit", "SCHEMA_VERSION",
    "SimConfig", "TransportPlan", "TwoClusterBox", "UniformBox",
    "alignment_force", "alignment_force_all", "as_decay_check",
    "check_pathwise_bounds", "concentration_study", "derive_seed",
    "eval_psi", "export_observables_csv", "export_plan_csv",
    "export_trajectory_csv", "fit_decay_rate", "gronwall_check",
    "kinetic_energy", "load_path", "make_law", "make_test_function",
    "mean_velocity", "meanfield_study", "phase_sweep",
    "quantization_error_bound", "quantize_grid", "refine", "sample_path",
    "save_path", "scheme_gap_study", "simulate", "simulate_study",
    "sinkhorn_w2", "stability_experiment", "stability_sweep", "step_ito",
    "step_stratonovich_heun", "support_radius", "to_uniform_ensemble",
    "tolerance_epsilon", "validate_gradients", "value_at",
    "variance_functional", "w1_general", "w2_bruteforce", "w2_exact_uniform",
    "w2_general", "weak_form_residual", "weak_residual_study",
]
