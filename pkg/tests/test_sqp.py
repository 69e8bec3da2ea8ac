"""Outer SQP loop: merit, line search, damping adaptation, full solves."""

import math

import numpy as np
import pytest

from trajbatch.blocktri import PcgSettings
from trajbatch.dynamics import DoubleIntegrator, Pendulum, step
from trajbatch.oracles import random_lqr_problem, random_problem, riccati_suite
from trajbatch.qpform import CostSpec, ProblemSpec
from trajbatch.sqp import (
    LineSearchSettings,
    SolverSettings,
    adapt_rho,
    constraint_l1,
    line_search,
    merit,
    merit_many,
    sqp_solve,
)

from conftest import results_bitwise_equal


def swingup_problem(N=64, h=0.05):
    cost = CostSpec(
        Q=np.diag([1.0, 0.1]),
        R=np.diag([0.01]),
        QN=np.diag([100.0, 10.0]),
        goal=np.array([np.pi, 0.0]),
    )
    return ProblemSpec(model=Pendulum(), cost=cost, horizon=N, timestep=h,
                       x_start=np.zeros(2))


class TestMerit:
    def test_feasible_rollout_equals_cost(self, rng):
        problem, _, _ = random_problem(rng, model=Pendulum(), N=6)
        U = 0.3 * rng.standard_normal((6, 1))
        X = problem.rollout(U)
        assert merit(problem, X, U, mu=10.0) == problem.cost.evaluate(X, U)

    def test_l1_arithmetic_on_single_defect(self):
        model = DoubleIntegrator(dims=1)
        cost = CostSpec(Q=np.zeros((2, 2)), R=np.zeros((1, 1)), QN=np.zeros((2, 2)),
                        goal=np.zeros(2))
        problem = ProblemSpec(model=model, cost=cost, horizon=1, timestep=0.1,
                              x_start=np.zeros(2))
        U = np.zeros((1, 1))
        X = np.zeros((2, 2))
        X[1] = step(model, X[0], U[0], 0.1) - np.array([0.5, -0.25])
        assert merit(problem, X, U, mu=10.0) == pytest.approx(7.5, abs=1e-12)

    def test_matches_term_by_term_recomputation(self, rng):
        problem, X, U = random_problem(rng, N=5)
        mu = 3.7
        value = merit(problem, X, U, mu)

        total = 0.0
        for k in range(5):
            dx = X[k] - problem.cost.goal_at(k)
            total += 0.5 * dx @ problem.cost.Q @ dx
            total += 0.5 * U[k] @ problem.cost.R @ U[k]
        dxN = X[5] - problem.cost.goal_at(5)
        total += 0.5 * dxN @ problem.cost.QN @ dxN
        total += mu * np.sum(np.abs(problem.x_start - X[0]))
        for k in range(5):
            e = step(problem.model, X[k], U[k], problem.timestep,
                     problem.force_at_knot(k)) - X[k + 1]
            total += mu * np.sum(np.abs(e))
        assert value == pytest.approx(total, rel=1e-12)

    def test_non_finite_trajectory_scores_infinity(self, rng):
        problem, X, U = random_problem(rng, N=4)
        X[2, 0] = np.nan
        assert merit(problem, X, U, 10.0) == math.inf
        X[2, 0] = np.inf
        assert merit(problem, X, U, 10.0) == math.inf

    def test_merit_many_matches_scalar_merit(self, rng):
        problem, _, _ = random_problem(rng, N=6)
        n, m = problem.model.state_dim, problem.model.control_dim
        Xs = rng.standard_normal((4, 7, n))
        Us = rng.standard_normal((4, 6, m))
        Xs[1, 0, 0] = np.nan
        batched = merit_many(problem, Xs, Us, 2.5)
        for i in range(4):
            single = merit(problem, Xs[i], Us[i], 2.5)
            if math.isinf(single):
                assert math.isinf(batched[i])
            else:
                assert batched[i] == pytest.approx(single, rel=1e-12)


class TestLineSearch:
    def test_zero_direction_ties_to_unit_alpha_not_accepted(self, rng):
        problem, X, U = random_problem(rng, N=4)
        alpha, value, accepted = line_search(
            problem, X, U, np.zeros_like(X), np.zeros_like(U), LineSearchSettings()
        )
        assert alpha == 1.0
        assert not accepted
        assert value == merit(problem, X, U, 10.0)

    def test_newton_direction_on_lqr_takes_full_step(self, rng):
        problem = random_lqr_problem(rng)
        N, n, m = problem.horizon, problem.model.state_dim, problem.model.control_dim
        U0 = np.zeros((N, m))
        X0 = problem.rollout(U0)

        from trajbatch.blocktri import pcg
        from trajbatch.qpform import form_preconditioner, form_schur, linearize, recover_step

        blocks = linearize(problem, X0, U0, rho=0.0)
        system = form_schur(blocks, problem.x_start, X0)
        phi_inv = form_preconditioner(system)
        lam = pcg(system.S, system.gamma, phi_inv, PcgSettings(tolerance=1e-13)).solution
        direction = recover_step(system, blocks, lam)

        settings = LineSearchSettings()
        alpha, value, accepted = line_search(
            problem, X0, U0, direction.dX, direction.dU, settings
        )
        # Exhaustive candidate evaluation oracle.
        best = min(
            settings.candidates(),
            key=lambda a: merit(problem, X0 + a * direction.dX, U0 + a * direction.dU, settings.mu),
        )
        assert alpha == best == 1.0
        assert accepted

    def test_uphill_direction_rejected(self, rng):
        problem, _, _ = random_problem(rng, model=Pendulum(), N=4)
        U = np.zeros((4, 1))
        X = problem.rollout(U)
        dX = 1e3 * np.ones_like(X)
        dU = 1e3 * np.ones_like(U)
        _, _, accepted = line_search(problem, X, U, dX, dU, LineSearchSettings())
        assert not accepted

    def test_candidate_set_is_geometric(self):
        settings = LineSearchSettings(beta=2.0, num_shrinks=3)
        np.testing.assert_allclose(settings.candidates(), [1.0, 0.5, 0.25, 0.125])

    def test_mu_scale_invariance_with_zero_cost(self, rng):
        model = Pendulum()
        cost = CostSpec(Q=np.zeros((2, 2)), R=np.zeros((1, 1)), QN=np.zeros((2, 2)),
                        goal=np.zeros(2))
        problem = ProblemSpec(model=model, cost=cost, horizon=4, timestep=0.05,
                              x_start=np.array([0.4, 0.0]))
        X = 0.3 * rng.standard_normal((5, 2))
        U = 0.3 * rng.standard_normal((4, 1))
        dX = 0.2 * rng.standard_normal((5, 2))
        dU = 0.2 * rng.standard_normal((4, 1))
        alphas = set()
        for mu in (0.1, 10.0, 1e4):
            alpha, _, _ = line_search(problem, X, U, dX, dU,
                                      LineSearchSettings(mu=mu))
            alphas.add(alpha)
        assert len(alphas) == 1


class TestAdaptRho:
    def test_accepted_shrinks_by_factor(self):
        settings = SolverSettings(rho_factor=5.0)
        assert adapt_rho(1e-3, True, settings) == pytest.approx(2e-4)

    def test_clamps_at_lower_bound(self):
        settings = SolverSettings(rho_factor=5.0)
        assert adapt_rho(1e-8, True, settings) == 1e-8

    def test_clamps_at_upper_bound(self):
        settings = SolverSettings(rho_factor=5.0)
        assert adapt_rho(1e1, False, settings) == 1e1

    def test_rejected_grows_by_factor(self):
        settings = SolverSettings(rho_factor=5.0)
        assert adapt_rho(1e-3, False, settings) == pytest.approx(5e-3)


class TestSqpSolve:
    def test_lqr_matches_riccati_oracle(self):
        records = riccati_suite(count=5, seed=7)
        for record in records:
            assert record.passed, record

    def test_restart_at_solution_returns_immediately(self):
        problem = swingup_problem(N=24)
        settings = SolverSettings(max_sqp_iterations=60)
        first = sqp_solve(problem, np.zeros((25, 2)), np.zeros((24, 1)), settings)
        assert first.converged

        again = sqp_solve(problem, first.X, first.U, settings)
        assert again.converged
        assert len(again.trace) == 1
        assert again.trace[0].alpha is None
        assert np.array_equal(again.X, first.X)
        assert np.array_equal(again.U, first.U)

    def test_pendulum_swingup_reaches_goal(self):
        problem = swingup_problem()
        result = sqp_solve(problem, np.zeros((65, 2)), np.zeros((64, 1)),
                           SolverSettings(max_sqp_iterations=100))
        assert result.converged

        x = np.zeros(2)
        for k in range(64):
            x = step(problem.model, x, result.U[k], 0.05)
        # Reference run reaches [pi, 0] to ~2.5e-4; assert with 20x margin.
        assert np.max(np.abs(x - np.array([np.pi, 0.0]))) <= 5e-3

    def test_accepted_merits_strictly_decrease(self):
        problem = swingup_problem(N=32)
        result = sqp_solve(problem, np.zeros((33, 2)), np.zeros((32, 1)),
                           SolverSettings(max_sqp_iterations=40))
        accepted = [rec.merit for rec in result.trace if rec.accepted]
        assert len(accepted) >= 3
        assert all(b < a for a, b in zip(accepted, accepted[1:]))

    def test_rejected_iteration_leaves_iterate_bitwise_unchanged(self, rng):
        # Scan seeded nonlinear instances for a rejection, then re-run to the
        # boundary on each side of it and compare iterates exactly.
        found = False
        for seed in range(40):
            gen = np.random.default_rng(seed)
            problem, _, _ = random_problem(gen, N=8)
            n, m = problem.model.state_dim, problem.model.control_dim
            settings = SolverSettings(max_sqp_iterations=15, step_tolerance=None)
            result = sqp_solve(problem, np.zeros((9, n)), np.zeros((8, m)), settings)
            rejected = [rec.iteration for rec in result.trace if not rec.accepted]
            if not rejected:
                continue
            found = True
            idx = rejected[0]
            if idx == 0:
                before = (np.zeros((9, n)), np.zeros((8, m)))
            else:
                partial = sqp_solve(
                    problem, np.zeros((9, n)), np.zeros((8, m)),
                    SolverSettings(max_sqp_iterations=idx, step_tolerance=None),
                )
                before = (partial.X, partial.U)
            after = sqp_solve(
                problem, np.zeros((9, n)), np.zeros((8, m)),
                SolverSettings(max_sqp_iterations=idx + 1, step_tolerance=None),
            )
            assert np.array_equal(before[0], after.X)
            assert np.array_equal(before[1], after.U)
            break
        assert found, "no rejected iteration found across seeds"

    def test_trace_integrity(self):
        problem = swingup_problem(N=32)
        settings = SolverSettings(max_sqp_iterations=30)
        result = sqp_solve(problem, np.zeros((33, 2)), np.zeros((32, 1)), settings)
        candidates = set(settings.line_search.candidates().tolist())
        assert len(result.trace) <= settings.max_sqp_iterations
        for rec in result.trace:
            assert rec.pcg_iterations <= settings.pcg.iteration_cap(33 * 2)
            assert rec.alpha is None or rec.alpha in candidates
            assert settings.rho_min <= rec.rho <= settings.rho_max

    def test_fixed_budget_mode_runs_all_iterations(self):
        problem = swingup_problem(N=16)
        settings = SolverSettings(max_sqp_iterations=12, step_tolerance=None)
        result = sqp_solve(problem, np.zeros((17, 2)), np.zeros((16, 1)), settings)
        assert len(result.trace) == 12
        assert not result.converged

    def test_determinism_across_repeated_solves(self):
        problem = swingup_problem(N=24)
        settings = SolverSettings(max_sqp_iterations=20, step_tolerance=None)
        a = sqp_solve(problem, np.zeros((25, 2)), np.zeros((24, 1)), settings)
        b = sqp_solve(problem, np.zeros((25, 2)), np.zeros((24, 1)), settings)
        assert results_bitwise_equal(a, b)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(rho_init=1e2)
        with pytest.raises(ValueError):
            SolverSettings(rho_factor=0.5)
        with pytest.raises(ValueError):
            LineSearchSettings(mu=-1.0)
        with pytest.raises(ValueError):
            LineSearchSettings(beta=1.0)


class TestConstraintL1:
    def test_initial_state_defect_included(self, rng):
        problem, X, U = random_problem(rng, N=3)
        X_shifted = X.copy()
        X_shifted[0] = problem.x_start + np.array([1.0] * problem.model.state_dim)
        base = constraint_l1(problem, X, U)
        shifted = constraint_l1(problem, X_shifted, U)
        assert shifted != base
