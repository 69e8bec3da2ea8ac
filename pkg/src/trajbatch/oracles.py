"""Independent reference solvers and the verification suites built on them.

Everything here deliberately avoids the block-tridiagonal/PCG path: the KKT
oracle is a dense saddle-point solve, and the LQR oracle is a backward
Riccati recursion with a forward rollout. The suites generate random
instances, run both routes, and report per-instance errors; the test suite
and the CLI's verification command both consume them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocktri import BlockTriMatrix, PcgSettings, pcg
from .dynamics import (
    Cartpole,
    DoubleIntegrator,
    ExternalForce,
    Pendulum,
    TwoLinkArm,
    step,
    step_jacobians,
)
from .qpform import (
    CostSpec,
    KktSystem,
    ProblemSpec,
    StepDirection,
    form_kkt,
    form_preconditioner,
    form_schur,
    linearize,
    recover_step,
)
from .sqp import SolverSettings, sqp_solve


def solve_kkt_dense(kkt: KktSystem) -> tuple[np.ndarray, np.ndarray]:
    """Solve the full saddle-point system directly.

    Returns (dZ, lam) where dZ satisfies the linearized constraints
    C dZ = c and lam matches the multiplier produced by the Schur route.
    """
    nz = kkt.G.shape[0]
    nc = kkt.C.shape[0]
    kkt_matrix = np.zeros((nz + nc, nz + nc))
    kkt_matrix[:nz, :nz] = kkt.G
    kkt_matrix[:nz, nz:] = kkt.C.T
    kkt_matrix[nz:, :nz] = kkt.C
    rhs = np.concatenate([-kkt.g, kkt.c])
    solution = np.linalg.solve(kkt_matrix, rhs)
    return solution[:nz], -solution[nz:]


def split_step(dZ: np.ndarray, N: int, n: int, m: int) -> StepDirection:
    """Split a stacked [dx_0, du_0, ..., dx_N] vector into per-knot arrays."""
    dX = np.empty((N + 1, n))
    dU = np.empty((N, m))
    for k in range(N):
        base = k * (n + m)
        dX[k] = dZ[base:base + n]
        dU[k] = dZ[base + n:base + n + m]
    dX[N] = dZ[N * (n + m):]
    return StepDirection(dX, dU)


def riccati_lqr(
    A: np.ndarray,
    B: np.ndarray,
    d: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    QN: np.ndarray,
    goal: np.ndarray,
    x_start: np.ndarray,
    N: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon tracking LQR for x' = A x + B u + d via backward Riccati.

    Cost is 0.5 (x - g_k)^T Q (x - g_k) + 0.5 u^T R u per stage with a QN
    terminal term; ``goal`` may be a single state or an (N+1, n) sequence.
    Returns the optimal (X, U).
    """
    n = A.shape[0]
    m = B.shape[1]
    goal = np.asarray(goal, dtype=float)

    def goal_at(k):
        return goal if goal.ndim == 1 else goal[k]

    P = QN.copy()
    p = -QN @ goal_at(N)
    gains = np.empty((N, m, n))
    feedforward = np.empty((N, m))
    for k in reversed(range(N)):
        H = R + B.T @ P @ B
        K = np.linalg.solve(H, B.T @ P @ A)
        kff = np.linalg.solve(H, B.T @ (P @ d + p))
        gains[k] = K
        feedforward[k] = kff
        Acl = A - B @ K
        P_new = Q + K.T @ R @ K + Acl.T @ P @ Acl
        p = (-Q @ goal_at(k)) + K.T @ R @ kff + Acl.T @ (P @ (d - B @ kff) + p)
        P = 0.5 * (P_new + P_new.T)

    X = np.empty((N + 1, n))
    U = np.empty((N, m))
    X[0] = x_start
    for k in range(N):
        U[k] = -gains[k] @ X[k] - feedforward[k]
        X[k + 1] = A @ X[k] + B @ U[k] + d
    return X, U


# --------------------------------------------------------------------------- #
# Random instances                                                             #
# --------------------------------------------------------------------------- #

def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    W = rng.standard_normal((n, n))
    return scale * (W @ W.T / n + 0.5 * np.eye(n))


def _model_pool():
    return [
        DoubleIntegrator(dims=1),
        Pendulum(),
        Cartpole(),
        TwoLinkArm(),
        DoubleIntegrator(dims=2),
    ]


def random_problem(
    rng: np.random.Generator,
    model=None,
    N: int | None = None,
) -> tuple[ProblemSpec, np.ndarray, np.ndarray]:
    """A random problem plus a random (generally infeasible) trajectory."""
    if model is None:
        model = _model_pool()[rng.integers(len(_model_pool()))]
    if N is None:
        N = int(rng.choice([4, 8]))
    n, m = model.state_dim, model.control_dim
    cost = CostSpec(
        Q=random_spd(rng, n),
        R=random_spd(rng, m),
        QN=random_spd(rng, n, scale=3.0),
        goal=0.5 * rng.standard_normal(n),
    )
    problem = ProblemSpec(
        model=model,
        cost=cost,
        horizon=N,
        timestep=float(rng.uniform(0.02, 0.08)),
        x_start=0.3 * rng.standard_normal(n),
        force=ExternalForce.constant(0.2 * rng.standard_normal(model.force_dim)),
    )
    X = 0.4 * rng.standard_normal((N + 1, n))
    U = 0.4 * rng.standard_normal((N, m))
    return problem, X, U


def relative_inf_error(actual: np.ndarray, reference: np.ndarray) -> float:
    denom = max(1.0, float(np.max(np.abs(reference))))
    return float(np.max(np.abs(actual - reference))) / denom


# --------------------------------------------------------------------------- #
# Verification suites                                                          #
# --------------------------------------------------------------------------- #

@dataclass
class SuiteRecord:
    label: str
    error: float
    passed: bool
    detail: dict


def schur_kkt_suite(
    count: int = 100,
    seed: int = 0,
    rho: float = 1e-6,
    tolerance: float = 1e-6,
    with_identity: bool = True,
) -> list[SuiteRecord]:
    """Compare the Schur/PCG/recover step against the dense KKT solve.

    With ``with_identity`` the suite also solves each system under an identity
    preconditioner and records both PCG iteration counts, for
    preconditioner-effectiveness comparisons.
    """
    rng = np.random.default_rng(seed)
    pool = _model_pool()
    records = []
    for i in range(count):
        model = pool[i % len(pool)]
        problem, X, U = random_problem(rng, model=model, N=int(rng.choice([4, 8])))
        blocks = linearize(problem, X, U, rho)
        kkt = form_kkt(blocks, problem.x_start, X)
        dZ, _ = solve_kkt_dense(kkt)
        reference = split_step(dZ, problem.horizon, model.state_dim, model.control_dim)

        system = form_schur(blocks, problem.x_start, X)
        phi_inv = form_preconditioner(system)
        settings = PcgSettings(tolerance=1e-12)
        result = pcg(system.S, system.gamma, phi_inv, settings)
        direction = recover_step(system, blocks, result.solution)

        detail = {
            "model": model.name,
            "N": problem.horizon,
            "pcg_iterations": result.iterations,
        }
        if with_identity:
            identity = BlockTriMatrix.identity(system.S.n_blockrows, system.S.block_dim)
            detail["pcg_iterations_identity"] = pcg(
                system.S, system.gamma, identity, settings
            ).iterations

        err = max(
            relative_inf_error(direction.dX, reference.dX),
            relative_inf_error(direction.dU, reference.dU),
        )
        records.append(SuiteRecord(
            label=f"schur_kkt[{i}:{model.name},N={problem.horizon}]",
            error=err,
            passed=err <= tolerance,
            detail=detail,
        ))
    return records


def random_lqr_problem(rng: np.random.Generator) -> ProblemSpec:
    """A random tracking problem on exactly-linear dynamics (point masses)."""
    model = DoubleIntegrator(dims=int(rng.integers(1, 4)))
    n, m = model.state_dim, model.control_dim
    cost = CostSpec(
        Q=random_spd(rng, n),
        R=random_spd(rng, m),
        QN=random_spd(rng, n, scale=4.0),
        goal=rng.standard_normal(n),
    )
    return ProblemSpec(
        model=model,
        cost=cost,
        horizon=int(rng.integers(4, 11)),
        timestep=float(rng.uniform(0.02, 0.1)),
        x_start=rng.standard_normal(n),
        force=ExternalForce.constant(0.5 * rng.standard_normal(model.force_dim)),
    )


def riccati_suite(count: int = 20, seed: int = 1, tolerance: float = 1e-6) -> list[SuiteRecord]:
    """One full-step SQP iteration on LQR instances versus the Riccati oracle.

    The solver starts from a dynamically feasible zero-control rollout with
    zero damping, so a single accepted unit step must land on the optimum.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        problem = random_lqr_problem(rng)
        model = problem.model
        n, m = model.state_dim, model.control_dim

        U0 = np.zeros((problem.horizon, m))
        X0 = problem.rollout(U0)
        settings = SolverSettings(
            max_sqp_iterations=1,
            pcg=PcgSettings(tolerance=1e-12),
            rho_init=0.0,
            rho_min=0.0,
            step_tolerance=None,
        )
        result = sqp_solve(problem, X0, U0, settings)

        # Discrete dynamics are exactly linear: extract A, B once and the
        # affine offset from the zero step.
        fvec = problem.force_at_knot(0)
        A, B = step_jacobians(model, np.zeros(n), np.zeros(m), problem.timestep, fvec)
        d = step(model, np.zeros(n), np.zeros(m), problem.timestep, fvec)
        X_ref, U_ref = riccati_lqr(
            A, B, d, problem.cost.Q, problem.cost.R, problem.cost.QN,
            problem.cost.goal, problem.x_start, problem.horizon,
        )

        err = max(
            relative_inf_error(result.X, X_ref),
            relative_inf_error(result.U, U_ref),
        )
        alpha = result.trace[-1].alpha if result.trace else None
        records.append(SuiteRecord(
            label=f"riccati[{i}:dims={model.dims},N={problem.horizon}]",
            error=err,
            passed=err <= tolerance and alpha == 1.0,
            detail={"alpha": alpha, "N": problem.horizon, "dims": model.dims},
        ))
    return records
