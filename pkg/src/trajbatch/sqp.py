"""Outer SQP loop: linearize, Schur/PCG solve, merit line search, damping update.

Each iteration expands the problem at the current iterate, solves the
multiplier system by preconditioned conjugate gradient, recovers the primal
step, and accepts the best step length from a geometric candidate set under
an L1-penalty merit function. The damping rho shrinks after accepted steps
and grows after rejections (clamped to configured bounds), so the solver
degrades toward gradient-like steps when the local model is poor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocktri import PcgSettings, pcg
from .dynamics import step_many
from .errors import FactorizationError, PcgBreakdownError
from .qpform import (
    ProblemSpec,
    StepDirection,
    form_preconditioner,
    form_schur,
    linearize,
    recover_step,
)


@dataclass(frozen=True)
class LineSearchSettings:
    """Merit penalty and the geometric step-length candidate set.

    Candidates are exactly [1, 1/beta, ..., 1/beta**num_shrinks], so the set
    has num_shrinks + 1 entries.
    """

    mu: float = 10.0
    beta: float = 2.0
    num_shrinks: int = 8

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.beta <= 1:
            raise ValueError("beta must be > 1")
        if self.num_shrinks < 1:
            raise ValueError("num_shrinks must be >= 1")

    def candidates(self) -> np.ndarray:
        return self.beta ** -np.arange(self.num_shrinks + 1, dtype=float)


@dataclass(frozen=True)
class SolverSettings:
    max_sqp_iterations: int = 50
    pcg: PcgSettings = field(default_factory=lambda: PcgSettings(tolerance=1e-8))
    line_search: LineSearchSettings = field(default_factory=LineSearchSettings)
    rho_init: float = 1e-4
    rho_min: float = 1e-8
    rho_max: float = 1e1
    rho_factor: float = 5.0
    # Tolerance-based exit: step_tolerance None runs the fixed iteration
    # budget to completion (the mode used for timing comparisons).
    step_tolerance: float | None = 1e-6
    feasibility_tolerance: float = 1e-6
    regularize_r: bool = True
    pcg_retry_limit: int = 3

    def __post_init__(self):
        if not (self.rho_min <= self.rho_init <= self.rho_max):
            raise ValueError("rho_init must lie in [rho_min, rho_max]")
        if self.rho_factor <= 1:
            raise ValueError("rho_factor must be > 1")
        if self.max_sqp_iterations < 1:
            raise ValueError("max_sqp_iterations must be >= 1")


@dataclass
class IterationRecord:
    """One SQP iteration. ``alpha`` is None only on the final record of a
    tolerance-based exit, where no line search runs."""

    iteration: int
    merit: float
    constraint_l1: float
    alpha: float | None
    rho: float
    pcg_iterations: int
    accepted: bool
    step_inf_norm: float


@dataclass
class SqpResult:
    X: np.ndarray
    U: np.ndarray
    trace: list[IterationRecord]
    converged: bool

    @property
    def final_merit(self) -> float:
        return self.trace[-1].merit if self.trace else math.nan

    @property
    def iterations(self) -> int:
        return len(self.trace)


def constraint_l1(problem: ProblemSpec, X: np.ndarray, U: np.ndarray) -> float:
    """L1 norm of all dynamics defects plus the initial-state defect."""
    total = float(np.sum(np.abs(problem.x_start - X[0])))
    total += float(np.sum(np.abs(problem.defects(X, U))))
    return total


def merit(problem: ProblemSpec, X: np.ndarray, U: np.ndarray, mu: float) -> float:
    """L1 merit: tracking cost plus mu times the total constraint violation.

    Non-finite trajectories score +inf so they lose every comparison.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
        return math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        value = problem.cost.evaluate(X, U) + mu * constraint_l1(problem, X, U)
    return value if math.isfinite(value) else math.inf


def merit_many(problem: ProblemSpec, Xs: np.ndarray, Us: np.ndarray, mu: float) -> np.ndarray:
    """Merit values of C candidate trajectories, shapes (C, N+1, n), (C, N, m).

    Candidates are independent, so defects and quadratic forms are evaluated
    in one batched pass; non-finite candidates score +inf.
    """
    C, Np1, n = Xs.shape
    N = Np1 - 1
    m = Us.shape[2]
    model = problem.model
    cost = problem.cost

    finite = np.isfinite(Xs).all(axis=(1, 2)) & np.isfinite(Us).all(axis=(1, 2))
    if not finite.all():
        Xs = np.where(finite[:, None, None], Xs, 0.0)
        Us = np.where(finite[:, None, None], Us, 0.0)

    forces = np.tile(problem.force_matrix(), (C, 1))
    with np.errstate(over="ignore", invalid="ignore"):
        pred = step_many(
            model, Xs[:, :-1].reshape(C * N, n), Us.reshape(C * N, m),
            problem.timestep, forces,
        ).reshape(C, N, n)
        defect = pred - Xs[:, 1:]
        violation = np.abs(problem.x_start - Xs[:, 0]).sum(axis=1)
        violation += np.abs(defect).sum(axis=(1, 2))

        goals = cost.goal if cost.goal.ndim == 2 else np.broadcast_to(cost.goal, (Np1, n))
        dx = Xs[:, :-1] - goals[:-1]
        values = 0.5 * np.einsum("cki,ij,ckj->c", dx, cost.Q, dx)
        values += 0.5 * np.einsum("cki,ij,ckj->c", Us, cost.R, Us)
        dxN = Xs[:, -1] - goals[-1]
        values += 0.5 * np.einsum("ci,ij,cj->c", dxN, cost.QN, dxN)
        values += mu * violation
    return np.where(finite & np.isfinite(values), values, math.inf)


def line_search(
    problem: ProblemSpec,
    X: np.ndarray,
    U: np.ndarray,
    dX: np.ndarray,
    dU: np.ndarray,
    settings: LineSearchSettings,
    current_merit: float | None = None,
) -> tuple[float, float, bool]:
    """Pick the best step length from the geometric candidate set.

    The merit is evaluated at every candidate (one batched pass; candidates
    are independent). Returns (alpha*, merit at alpha*, accepted). Ties break
    toward the largest alpha; a step is accepted only if it strictly
    decreases the merit, otherwise the iterate must be left unchanged.
    ``current_merit`` avoids recomputing the merit of (X, U) when the caller
    already tracks it.
    """
    if current_merit is None:
        current_merit = merit(problem, X, U, settings.mu)
    alphas = settings.candidates()
    Xs = X[None, :, :] + alphas[:, None, None] * dX[None, :, :]
    Us = U[None, :, :] + alphas[:, None, None] * dU[None, :, :]
    values = merit_many(problem, Xs, Us, settings.mu)
    best = int(np.argmin(values))  # argmin takes the first (largest-alpha) tie
    best_merit = float(values[best])
    return float(alphas[best]), best_merit, best_merit < current_merit


def adapt_rho(rho: float, accepted: bool, settings: SolverSettings) -> float:
    """Levenberg-Marquardt-style update driven by the line-search outcome."""
    rho = rho / settings.rho_factor if accepted else rho * settings.rho_factor
    return float(min(max(rho, settings.rho_min), settings.rho_max))


def sqp_solve(
    problem: ProblemSpec,
    X_init: np.ndarray,
    U_init: np.ndarray,
    settings: SolverSettings | None = None,
) -> SqpResult:
    """Solve one trajectory-optimization problem from the given initialization.

    Any initialization is accepted, including all zeros; infeasibility is
    absorbed by the defect right-hand side. Terminates when the iteration
    budget is exhausted, or (when step_tolerance is set) when the step is
    below tolerance at a feasible iterate. A PCG curvature breakdown raises
    the damping and retries up to ``pcg_retry_limit`` times before
    propagating; factorization failures propagate with iteration context.
    """
    if settings is None:
        settings = SolverSettings()
    N, n, m = problem.horizon, problem.model.state_dim, problem.model.control_dim
    X = np.array(X_init, dtype=float).reshape(N + 1, n)
    U = np.array(U_init, dtype=float).reshape(N, m)

    ls = settings.line_search
    rho = settings.rho_init
    trace: list[IterationRecord] = []
    converged = False
    merit_current = merit(problem, X, U, ls.mu)

    for it in range(settings.max_sqp_iterations):
        retries = 0
        while True:
            try:
                blocks = linearize(problem, X, U, rho, settings.regularize_r)
                system = form_schur(blocks, problem.x_start, X)
                phi_inv = form_preconditioner(system)
                pcg_result = pcg(system.S, system.gamma, phi_inv, settings.pcg)
                break
            except PcgBreakdownError as exc:
                retries += 1
                if retries > settings.pcg_retry_limit:
                    raise PcgBreakdownError(
                        f"SQP iteration {it}: PCG broke down {retries} times "
                        f"(last at inner iteration {exc.iteration})",
                        exc.iteration,
                    ) from exc
                rho = float(min(rho * settings.rho_factor, settings.rho_max))
            except FactorizationError as exc:
                raise FactorizationError(f"SQP iteration {it}: {exc}", exc.knot) from exc

        direction = recover_step(system, blocks, pcg_result.solution)
        step_inf = direction.inf_norm
        violation = constraint_l1(problem, X, U)

        if (
            settings.step_tolerance is not None
            and step_inf <= settings.step_tolerance
            and violation <= settings.feasibility_tolerance
        ):
            trace.append(IterationRecord(
                iteration=it,
                merit=merit_current,
                constraint_l1=violation,
                alpha=None,
                rho=rho,
                pcg_iterations=pcg_result.iterations,
                accepted=False,
                step_inf_norm=step_inf,
            ))
            converged = True
            break

        alpha, merit_star, accepted = line_search(
            problem, X, U, direction.dX, direction.dU, ls, current_merit=merit_current
        )
        if accepted:
            X = X + alpha * direction.dX
            U = U + alpha * direction.dU
            merit_current = merit_star
            violation = constraint_l1(problem, X, U)

        trace.append(IterationRecord(
            iteration=it,
            merit=merit_current,
            constraint_l1=violation,
            alpha=alpha,
            rho=rho,
            pcg_iterations=pcg_result.iterations,
            accepted=accepted,
            step_inf_norm=step_inf,
        ))
        rho = adapt_rho(rho, accepted, settings)

    return SqpResult(X, U, trace, converged)
