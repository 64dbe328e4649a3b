"""Monte Carlo toolkit for noisy slow passage through a pitchfork bifurcation.

The package is organized around one scalar normal form: a slowly destabilized
double-well coordinate driven by small additive noise and a small symmetry
breaking tilt.  Modules:

    airy      Airy functions and exponentially weighted Airy integrals.
    model     Drift, potential, equilibrium branches, deterministic dynamics.
    linear    Gaussian linearization, its closed-form limit statistics.
    sde       Time grids, reproducible noise, path integrators.
    analysis  Path classification, strip exits, estimators, audits.
    cli       Command line front end.
"""

__version__ = "0.1.0"

from .airy import AiryValue, airy_eval, airy_laplace, j_integral
from .model import (
    EquilibriumBranches,
    NormalFormParams,
    PotentialSpec,
    chain_drift,
    default_potential,
    deterministic_solve,
    drift_normal_form,
    drift_unscaled,
    equilibrium_branches,
    fold_time,
    potential_v,
    xi_variance,
)
from ._grid import Path, TimeGrid
from .sde import (
    CoupledSpec,
    NoiseStream,
    dump_paths,
    integrate_chain,
    integrate_coupled,
    integrate_ou_pair,
    integrate_overdamped,
    integrate_underdamped,
    load_paths,
    sandwich_bias,
)
from .analysis import (
    EnsembleConfig,
    McSummary,
    Outcome,
    StripSpec,
    classify_path,
    comparison_audit,
    comparison_envelope,
    exit_time,
    mc_estimate,
    strip_exit_symmetry,
    threshold_sweep,
    wilson_interval,
)
from .linear import (
    GaussianLimitStats,
    limit_stats,
    linear_path,
    renormalized_tail,
    simulate_linear,
    tail_ensemble,
)

__all__ = [
    "AiryValue",
    "CoupledSpec",
    "EnsembleConfig",
    "EquilibriumBranches",
    "GaussianLimitStats",
    "McSummary",
    "NoiseStream",
    "NormalFormParams",
    "Outcome",
    "Path",
    "PotentialSpec",
    "StripSpec",
    "TimeGrid",
    "airy_eval",
    "airy_laplace",
    "chain_drift",
    "classify_path",
    "comparison_audit",
    "comparison_envelope",
    "default_potential",
    "deterministic_solve",
    "drift_normal_form",
    "drift_unscaled",
    "dump_paths",
    "equilibrium_branches",
    "exit_time",
    "fold_time",
    "integrate_chain",
    "integrate_coupled",
    "integrate_ou_pair",
    "integrate_overdamped",
    "integrate_underdamped",
    "j_integral",
    "limit_stats",
    "linear_path",
    "load_paths",
    "mc_estimate",
    "potential_v",
    "renormalized_tail",
    "sandwich_bias",
    "simulate_linear",
    "strip_exit_symmetry",
    "tail_ensemble",
    "threshold_sweep",
    "wilson_interval",
    "xi_variance",
    "__version__",
]
