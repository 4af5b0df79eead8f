"""Optimal measurement unravellings for LQG feedback control.

Given a linear open quantum system monitored through L output
channels, this package derives the conditional (Kalman-Bucy) filter
for any continuous Gaussian measurement strategy, minimizes the
steady-state quadratic control cost over all strategies via a small
semidefinite program, recovers the optimizing strategy, synthesizes
state-based or current-based feedback, and Monte-Carlo-verifies the
closed loop.
"""

from .errors import NumericalError, UnravelOptError, ValidationError
from .linalg import (
    DEFAULT_TOL,
    PsdResult,
    ToleranceConfig,
    hermitian_embed,
    involution,
    is_psd,
    psd_sqrt,
    solve_lyapunov,
    symplectic_form,
)
from .system import (
    DetectabilityResult,
    MomentModel,
    SystemSpec,
    derive_moment_model,
    pbh_detectable,
    unconditional_evolution,
    validate_spec,
)
from .unravelling import (
    FilterModel,
    RecoveredUnravelling,
    UnravellingMatrix,
    compose_U,
    decompose_U,
    filter_model,
    heterodyne,
    homodyne,
    recover_U,
)
from .riccati import (
    RiccatiSolution,
    certify_stabilizing,
    solve_control_care,
    solve_filter_care,
)
from .optimizer import (
    CostWeight,
    OptimizationResult,
    OracleResult,
    cost_weight,
    grid_oracle,
    optimize_unravelling,
    solve_sdp,
)
from .feedback import (
    ControllerDesign,
    ControlProblem,
    closed_loop_matrix,
    design_markovian,
    design_optimal,
    markovian_gain,
    optimal_cost,
    optimal_gain,
)
from .simulator import (
    BACKEND_NAME,
    ConsistencyReport,
    CostEstimate,
    SimConfig,
    SimulationResult,
    TrajectoryRecord,
    available_backends,
    ensemble_consistency_check,
    estimate_steady_cost,
    reconstruct_complex_current,
    simulate_conditional,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "UnravelOptError",
    "ValidationError",
    "NumericalError",
    "ToleranceConfig",
    "DEFAULT_TOL",
    "PsdResult",
    "symplectic_form",
    "involution",
    "is_psd",
    "hermitian_embed",
    "psd_sqrt",
    "solve_lyapunov",
    "SystemSpec",
    "MomentModel",
    "DetectabilityResult",
    "validate_spec",
    "derive_moment_model",
    "pbh_detectable",
    "unconditional_evolution",
    "UnravellingMatrix",
    "FilterModel",
    "RecoveredUnravelling",
    "compose_U",
    "decompose_U",
    "heterodyne",
    "homodyne",
    "filter_model",
    "recover_U",
    "RiccatiSolution",
    "solve_filter_care",
    "solve_control_care",
    "certify_stabilizing",
    "CostWeight",
    "OptimizationResult",
    "OracleResult",
    "cost_weight",
    "solve_sdp",
    "grid_oracle",
    "optimize_unravelling",
    "ControlProblem",
    "ControllerDesign",
    "optimal_gain",
    "optimal_cost",
    "markovian_gain",
    "closed_loop_matrix",
    "design_optimal",
    "design_markovian",
    "SimConfig",
    "TrajectoryRecord",
    "SimulationResult",
    "CostEstimate",
    "ConsistencyReport",
    "BACKEND_NAME",
    "available_backends",
    "simulate_conditional",
    "estimate_steady_cost",
    "ensemble_consistency_check",
    "reconstruct_complex_current",
]
