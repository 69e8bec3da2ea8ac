"""Dynamics models, RK4 stepping, analytic Jacobians, plant simulation."""

import numpy as np
import pytest

from trajbatch.dynamics import (
    Cartpole,
    DoubleIntegrator,
    ExternalForce,
    Pendulum,
    PlantConfig,
    SwingingLoadProfile,
    TwoLinkArm,
    simulate_plant,
    step,
    step_jacobians,
    step_jacobians_many,
    step_many,
)
from trajbatch.errors import ConfigError, DimensionError

from conftest import ALL_MODELS


def finite_difference_jacobians(model, x, u, h, f, delta=1e-5):
    n, m = model.state_dim, model.control_dim
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = delta
        A[:, i] = (step(model, x + dx, u, h, f) - step(model, x - dx, u, h, f)) / (2 * delta)
    for i in range(m):
        du = np.zeros(m)
        du[i] = delta
        B[:, i] = (step(model, x, u + du, h, f) - step(model, x, u - du, h, f)) / (2 * delta)
    return A, B


class TestStep:
    def test_double_integrator_closed_form(self):
        model = DoubleIntegrator(dims=1)
        out = step(model, np.zeros(2), np.array([1.0]), 0.1)
        np.testing.assert_allclose(out, [0.005, 0.1], atol=1e-15)

    def test_pendulum_equilibrium_is_fixed_point(self):
        model = Pendulum()
        out = step(model, np.zeros(2), np.zeros(1), 0.05)
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_cartpole_matches_fine_integration(self, rng):
        model = Cartpole()
        x = 0.5 * rng.standard_normal(4)
        u = rng.standard_normal(1)
        h = 0.01
        coarse = step(model, x, u, h)
        fine = simulate_plant(model, x, u, h, PlantConfig(h_plant=h / 1000))
        np.testing.assert_allclose(coarse, fine, atol=1e-6)

    def test_non_finite_state_rejected(self):
        model = Pendulum()
        with pytest.raises(ValueError):
            step(model, np.array([np.nan, 0.0]), np.zeros(1), 0.05)
        with pytest.raises(ValueError):
            step(model, np.zeros(2), np.array([np.inf]), 0.05)

    def test_wrong_shapes_rejected(self):
        model = Pendulum()
        with pytest.raises(DimensionError):
            step(model, np.zeros(3), np.zeros(1), 0.05)
        with pytest.raises(DimensionError):
            step(model, np.zeros(2), np.zeros(2), 0.05)
        with pytest.raises(DimensionError):
            step(model, np.zeros(2), np.zeros(1), 0.05, np.zeros(2))


class TestStepJacobians:
    def test_double_integrator_exact(self, rng):
        model = DoubleIntegrator(dims=1)
        h = 0.07
        for _ in range(5):
            x = rng.standard_normal(2)
            u = rng.standard_normal(1)
            A, B = step_jacobians(model, x, u, h)
            np.testing.assert_allclose(A, [[1.0, h], [0.0, 1.0]], atol=1e-15)
            np.testing.assert_allclose(B, [[h ** 2 / 2], [h]], atol=1e-15)

    def test_pendulum_matches_finite_differences(self):
        model = Pendulum()
        x = np.array([0.3, 0.1])
        u = np.array([0.2])
        A, B = step_jacobians(model, x, u, 0.05)
        A_fd, B_fd = finite_difference_jacobians(model, x, u, 0.05, None)
        assert np.max(np.abs(A - A_fd)) <= 1e-5
        assert np.max(np.abs(B - B_fd)) <= 1e-5

    def test_cartpole_control_reaches_all_coordinates(self):
        model = Cartpole()
        _, B = step_jacobians(model, np.array([0.1, 0.4, -0.2, 0.3]), np.array([0.5]), 0.05)
        assert np.any(B != 0.0)

    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: f"{m.name}{getattr(m, 'dims', '')}")
    def test_jacobian_consistency_random_points(self, model, rng):
        h = 0.03
        for _ in range(100):
            x = 0.8 * rng.standard_normal(model.state_dim)
            u = 0.8 * rng.standard_normal(model.control_dim)
            f = 0.5 * rng.standard_normal(model.force_dim)
            A, B = step_jacobians(model, x, u, h, f)
            A_fd, B_fd = finite_difference_jacobians(model, x, u, h, f)
            assert np.max(np.abs(A - A_fd)) <= 1e-4
            assert np.max(np.abs(B - B_fd)) <= 1e-4


class TestBatchedPaths:
    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: f"{m.name}{getattr(m, 'dims', '')}")
    def test_step_many_matches_scalar(self, model, rng):
        B = 25
        X = rng.standard_normal((B, model.state_dim))
        U = rng.standard_normal((B, model.control_dim))
        F = rng.standard_normal((B, model.force_dim))
        batched = step_many(model, X, U, 0.04, F)
        for i in range(B):
            np.testing.assert_allclose(
                batched[i], step(model, X[i], U[i], 0.04, F[i]), atol=1e-13
            )

    @pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: f"{m.name}{getattr(m, 'dims', '')}")
    def test_step_jacobians_many_matches_scalar(self, model, rng):
        B = 25
        X = rng.standard_normal((B, model.state_dim))
        U = rng.standard_normal((B, model.control_dim))
        F = rng.standard_normal((B, model.force_dim))
        As, Bs = step_jacobians_many(model, X, U, 0.04, F)
        for i in range(B):
            A, Bm = step_jacobians(model, X[i], U[i], 0.04, F[i])
            np.testing.assert_allclose(As[i], A, atol=1e-13)
            np.testing.assert_allclose(Bs[i], Bm, atol=1e-13)


class TestEquilibria:
    @pytest.mark.parametrize(
        "model,x_eq",
        [
            (DoubleIntegrator(dims=2), np.zeros(4)),
            (Pendulum(), np.zeros(2)),
            (Cartpole(), np.array([0.3, 0.0, 0.0, 0.0])),
            (TwoLinkArm(), np.array([0.7, -0.4, 0.0, 0.0])),
        ],
        ids=["double_integrator", "pendulum", "cartpole", "two_link_arm"],
    )
    def test_equilibrium_preserved_over_many_steps(self, model, x_eq):
        x = x_eq.copy()
        for _ in range(50):
            x = step(model, x, np.zeros(model.control_dim), 0.05)
        assert np.max(np.abs(x - x_eq)) <= 1e-12


class TestForceChannel:
    def test_double_integrator_force_equals_control_shift(self, rng):
        model = DoubleIntegrator(dims=2, mass=2.5)
        x = rng.standard_normal(4)
        u = rng.standard_normal(2)
        phi = rng.standard_normal(2)
        with_force = step(model, x, u, 0.05, phi)
        shifted = step(model, x, u + phi / model.mass, 0.05)
        np.testing.assert_array_equal(with_force, shifted)

    def test_arm_tip_force_maps_through_jacobian_transpose(self):
        arm = TwoLinkArm(joint_damping=0.0)
        x = np.array([0.4, 0.8, 0.0, 0.0])
        f = np.array([1.5, -0.7])
        tau_equiv = arm.tip_jacobian(x[:2]).T @ f
        via_force = arm.deriv(x, np.zeros(2), f)
        via_torque = arm.deriv(x, tau_equiv, np.zeros(2))
        np.testing.assert_allclose(via_force, via_torque, atol=1e-14)

    def test_time_varying_profile_evaluated_at_substep_starts(self):
        profile = SwingingLoadProfile(weight=1.0, amplitude=2.0, frequency_hz=0.5)
        force = ExternalForce.time_varying(profile, dim=2)
        np.testing.assert_allclose(force.at(0.25), profile(0.25))
        assert not force.is_constant


class TestSimulatePlant:
    def test_single_substep_reduces_to_step(self, rng):
        model = Pendulum()
        x = rng.standard_normal(2)
        u = rng.standard_normal(1)
        out = simulate_plant(model, x, u, 0.01, PlantConfig(h_plant=0.01))
        np.testing.assert_array_equal(out, step(model, x, u, 0.01))

    def test_ballistic_closed_form(self):
        model = DoubleIntegrator(dims=1, mass=2.0)
        x0 = np.array([1.0, -0.5])
        u = np.array([0.3])
        f = ExternalForce.constant([0.8])
        T = 0.01
        out = simulate_plant(model, x0, u, T, PlantConfig(h_plant=0.001), f)
        accel = u[0] + 0.8 / model.mass
        expected = np.array([x0[0] + x0[1] * T + 0.5 * accel * T ** 2, x0[1] + accel * T])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_substep_refinement_converges(self, rng):
        model = Pendulum()
        x = np.array([0.5, -0.2])
        u = np.array([0.4])
        coarse = simulate_plant(model, x, u, 0.1, PlantConfig(h_plant=0.01))
        fine = simulate_plant(model, x, u, 0.1, PlantConfig(h_plant=0.0001))
        np.testing.assert_allclose(coarse, fine, atol=1e-7)

    def test_non_divisible_period_rejected(self):
        with pytest.raises(ConfigError):
            simulate_plant(Pendulum(), np.zeros(2), np.zeros(1), 0.015, PlantConfig(h_plant=0.01))

    def test_time_varying_force_uses_global_time(self):
        model = DoubleIntegrator(dims=2)
        profile = SwingingLoadProfile(weight=0.0, amplitude=1.0, frequency_hz=1.0, decay=0.0)
        force = ExternalForce.time_varying(profile, dim=2)
        a = simulate_plant(model, np.zeros(4), np.zeros(2), 0.05, PlantConfig(h_plant=0.01), force, t0=0.0)
        b = simulate_plant(model, np.zeros(4), np.zeros(2), 0.05, PlantConfig(h_plant=0.01), force, t0=0.25)
        assert not np.allclose(a, b)


class TestArmKinematics:
    def test_inverse_kinematics_round_trip(self, rng):
        arm = TwoLinkArm()
        for _ in range(20):
            radius = rng.uniform(0.15, 0.95)
            angle = rng.uniform(-np.pi, np.pi)
            target = radius * np.array([np.cos(angle), np.sin(angle)])
            q = arm.inverse_kinematics(target)
            np.testing.assert_allclose(arm.ee_position(q), target, atol=1e-10)

    def test_unreachable_target_clips_to_boundary(self):
        arm = TwoLinkArm()
        q = arm.inverse_kinematics(np.array([5.0, 0.0]))
        assert np.linalg.norm(arm.ee_position(q)) <= arm.l1 + arm.l2 + 1e-12
