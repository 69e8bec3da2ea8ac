"""Batched SQP trajectory optimization with a block-tridiagonal PCG solver.

The pipeline per SQP iteration: Taylor-expand cost and dynamics along the
iterate, eliminate the primal variables into a block-tridiagonal multiplier
system, solve it by preconditioned conjugate gradient under a symmetric stair
preconditioner, recover the step, and line-search it under an L1 merit
function. A batch engine runs many solves deterministically in parallel, and
an MPC harness layers warm starting and disturbance-hypothesis selection on
top.
"""

from .batch import BatchResult, BatchSpec, batch_solve, bench_scaling
from .blocktri import BlockTriMatrix, PcgResult, PcgSettings, btmv, densify, pcg
from .dynamics import (
    Cartpole,
    DoubleIntegrator,
    DynamicsModel,
    ExternalForce,
    Pendulum,
    PlantConfig,
    SwingingLoadProfile,
    TwoLinkArm,
    simulate_plant,
    step,
    step_jacobians,
)
from .errors import ConfigError, DimensionError, FactorizationError, PcgBreakdownError
from .mpc import (
    HypothesisMode,
    HypothesisSet,
    MpcTrace,
    ReachingMetrics,
    ReachingScenario,
    RhoSweepMode,
    SingleMode,
    rho_grid,
    run_mpc,
    run_reaching_suite,
    sample_hypotheses,
    select_hypothesis,
    shift_warm_start,
)
from .qpform import (
    CostSpec,
    KktSystem,
    KnotLinearization,
    ProblemSpec,
    SchurSystem,
    StepDirection,
    form_kkt,
    form_preconditioner,
    form_schur,
    linearize,
    recover_step,
)
from .sqp import (
    IterationRecord,
    LineSearchSettings,
    SolverSettings,
    SqpResult,
    adapt_rho,
    line_search,
    merit,
    sqp_solve,
)

__version__ = "0.1.0"

__all__ = [
    "BatchResult",
    "BatchSpec",
    "BlockTriMatrix",
    "Cartpole",
    "ConfigError",
    "CostSpec",
    "DimensionError",
    "DoubleIntegrator",
    "DynamicsModel",
    "ExternalForce",
    "FactorizationError",
    "HypothesisMode",
    "HypothesisSet",
    "IterationRecord",
    "KktSystem",
    "KnotLinearization",
    "LineSearchSettings",
    "MpcTrace",
    "PcgBreakdownError",
    "PcgResult",
    "PcgSettings",
    "Pendulum",
    "PlantConfig",
    "ProblemSpec",
    "ReachingMetrics",
    "ReachingScenario",
    "RhoSweepMode",
    "SchurSystem",
    "SingleMode",
    "SolverSettings",
    "SqpResult",
    "StepDirection",
    "SwingingLoadProfile",
    "TwoLinkArm",
    "adapt_rho",
    "batch_solve",
    "bench_scaling",
    "btmv",
    "densify",
    "form_kkt",
    "form_preconditioner",
    "form_schur",
    "line_search",
    "linearize",
    "merit",
    "pcg",
    "recover_step",
    "rho_grid",
    "run_mpc",
    "run_reaching_suite",
    "sample_hypotheses",
    "select_hypothesis",
    "shift_warm_start",
    "simulate_plant",
    "sqp_solve",
    "step",
    "step_jacobians",
]
