"""Discrete-time dynamics models with analytic Jacobians.

Every model exposes a continuous-time derivative ``deriv(x, u, f)`` and its
closed-form partials ``deriv_jacobians(x, u, f)``. The discrete step used by
the solver is a single RK4 step of that derivative; ``step_jacobians`` chains
the partials through the four RK4 stages so (A, B) are the exact Jacobians of
the discrete map, consistent with the defect computed by ``step``.

State layout for all provided models is ``[positions, velocities]``.
External forces enter additively in each model's generalized-force channel:

  - DoubleIntegrator: acceleration offset f / mass per axis
  - Pendulum:         torque at the pivot
  - Cartpole:         [force on the cart, torque at the pole pivot]
  - TwoLinkArm:       planar force at the end effector, mapped through J(q)^T
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError


# --------------------------------------------------------------------------- #
# External forces                                                              #
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ExternalForce:
    """A force in a model's generalized-force channel.

    ``value`` is used when ``profile`` is None (constant force); otherwise
    ``profile(t)`` gives the force at time t and ``value`` only fixes the
    dimension. Profiles must be picklable (module-level callables or
    dataclasses with __call__) so problems can cross process boundaries.
    """

    value: np.ndarray
    profile: Callable[[float], np.ndarray] | None = None

    @classmethod
    def constant(cls, value) -> "ExternalForce":
        return cls(np.atleast_1d(np.asarray(value, dtype=float)))

    @classmethod
    def zero(cls, dim: int) -> "ExternalForce":
        return cls(np.zeros(dim))

    @classmethod
    def time_varying(cls, profile: Callable[[float], np.ndarray], dim: int) -> "ExternalForce":
        return cls(np.zeros(dim), profile)

    @property
    def dim(self) -> int:
        return self.value.shape[0]

    @property
    def is_constant(self) -> bool:
        return self.profile is None

    def at(self, t: float) -> np.ndarray:
        if self.profile is None:
            return self.value
        return np.asarray(self.profile(t), dtype=float)


@dataclass(frozen=True)
class SwingingLoadProfile:
    """Tip-force profile of an unmodeled suspended load: a constant pull plus
    a decaying sinusoidal swing component. Picklable by construction."""

    weight: float = 0.0          # steady pull along -y
    amplitude: float = 2.0       # swing force magnitude at t=0
    frequency_hz: float = 1.0
    decay: float = 0.2           # exponential envelope rate, 1/s
    phase: float = 0.0

    def __call__(self, t: float) -> np.ndarray:
        envelope = self.amplitude * np.exp(-self.decay * t)
        angle = 2.0 * np.pi * self.frequency_hz * t + self.phase
        return np.array(
            [envelope * np.sin(angle), -self.weight + envelope * np.cos(angle)]
        )


# --------------------------------------------------------------------------- #
# Models                                                                       #
# --------------------------------------------------------------------------- #

class DynamicsModel:
    """Interface for continuous-time dynamics with analytic partials."""

    name: str = "model"

    @property
    def state_dim(self) -> int:
        raise NotImplementedError

    @property
    def control_dim(self) -> int:
        raise NotImplementedError

    @property
    def force_dim(self) -> int:
        raise NotImplementedError

    @property
    def position_dim(self) -> int:
        return self.state_dim // 2

    def deriv(self, x: np.ndarray, u: np.ndarray, f: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def deriv_jacobians(self, x, u, f) -> tuple[np.ndarray, np.ndarray]:
        """Partials (d xdot / dx, d xdot / du) of ``deriv`` at (x, u, f)."""
        raise NotImplementedError

    def deriv_many(self, X: np.ndarray, U: np.ndarray, F: np.ndarray) -> np.ndarray:
        """Row-wise ``deriv`` over (B, n), (B, m), (B, force_dim) stacks.

        Subclasses override with vectorized formulas; this fallback loops.
        """
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            out[i] = self.deriv(X[i], U[i], F[i])
        return out

    def deriv_jacobians_many(self, X, U, F) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise ``deriv_jacobians``: (B, n, n) and (B, n, m) stacks."""
        B = X.shape[0]
        fx = np.empty((B, self.state_dim, self.state_dim))
        fu = np.empty((B, self.state_dim, self.control_dim))
        for i in range(B):
            fx[i], fu[i] = self.deriv_jacobians(X[i], U[i], F[i])
        return fx, fu

    def zero_force(self) -> ExternalForce:
        return ExternalForce.zero(self.force_dim)


@dataclass(frozen=True)
class DoubleIntegrator(DynamicsModel):
    """d decoupled point masses: positions then velocities, vdot = u + f/mass."""

    dims: int = 1
    mass: float = 1.0
    name: str = "double_integrator"

    @property
    def state_dim(self) -> int:
        return 2 * self.dims

    @property
    def control_dim(self) -> int:
        return self.dims

    @property
    def force_dim(self) -> int:
        return self.dims

    def deriv(self, x, u, f):
        d = self.dims
        return np.concatenate([x[d:], u + f / self.mass])

    def deriv_jacobians(self, x, u, f):
        d = self.dims
        fx = np.zeros((2 * d, 2 * d))
        fx[:d, d:] = np.eye(d)
        fu = np.zeros((2 * d, d))
        fu[d:, :] = np.eye(d)
        return fx, fu

    def deriv_many(self, X, U, F):
        d = self.dims
        return np.concatenate([X[:, d:], U + F / self.mass], axis=1)

    def deriv_jacobians_many(self, X, U, F):
        fx, fu = self.deriv_jacobians(X[0], U[0], F[0])
        B = X.shape[0]
        return (
            np.broadcast_to(fx, (B,) + fx.shape).copy(),
            np.broadcast_to(fu, (B,) + fu.shape).copy(),
        )


@dataclass(frozen=True)
class Pendulum(DynamicsModel):
    """Damped pendulum, theta = 0 hanging; force channel is pivot torque."""

    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    damping: float = 0.1
    name: str = "pendulum"

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def control_dim(self) -> int:
        return 1

    @property
    def force_dim(self) -> int:
        return 1

    @property
    def inertia(self) -> float:
        return self.mass * self.length ** 2

    def deriv(self, x, u, f):
        theta, omega = x
        torque = u[0] + f[0]
        accel = (
            torque
            - self.mass * self.gravity * self.length * np.sin(theta)
            - self.damping * omega
        ) / self.inertia
        return np.array([omega, accel])

    def deriv_jacobians(self, x, u, f):
        theta = x[0]
        fx = np.array([
            [0.0, 1.0],
            [-self.gravity / self.length * np.cos(theta), -self.damping / self.inertia],
        ])
        fu = np.array([[0.0], [1.0 / self.inertia]])
        return fx, fu

    def deriv_many(self, X, U, F):
        theta, omega = X[:, 0], X[:, 1]
        accel = (
            U[:, 0] + F[:, 0]
            - self.mass * self.gravity * self.length * np.sin(theta)
            - self.damping * omega
        ) / self.inertia
        return np.stack([omega, accel], axis=1)

    def deriv_jacobians_many(self, X, U, F):
        B = X.shape[0]
        fx = np.zeros((B, 2, 2))
        fx[:, 0, 1] = 1.0
        fx[:, 1, 0] = -self.gravity / self.length * np.cos(X[:, 0])
        fx[:, 1, 1] = -self.damping / self.inertia
        fu = np.zeros((B, 2, 1))
        fu[:, 1, 0] = 1.0 / self.inertia
        return fx, fu


@dataclass(frozen=True)
class Cartpole(DynamicsModel):
    """Cart with a hanging pole, theta = 0 down. State [p, theta, pdot, thetadot].

    Force channel is [disturbance force on the cart, disturbance torque at the
    pivot]; the control actuates the cart only.
    """

    cart_mass: float = 1.0
    pole_mass: float = 0.2
    pole_length: float = 0.5
    gravity: float = 9.81
    name: str = "cartpole"

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def control_dim(self) -> int:
        return 1

    @property
    def force_dim(self) -> int:
        return 2

    def _mass_matrix(self, theta):
        mp, length = self.pole_mass, self.pole_length
        coupling = mp * length * np.cos(theta)
        return np.array([
            [self.cart_mass + mp, coupling],
            [coupling, mp * length ** 2],
        ])

    def _bias(self, theta, thetadot):
        # Coriolis plus gravity terms on [cart, pole] generalized coordinates.
        mp, length = self.pole_mass, self.pole_length
        return np.array([
            -mp * length * np.sin(theta) * thetadot ** 2,
            mp * self.gravity * length * np.sin(theta),
        ])

    def deriv(self, x, u, f):
        _, theta, pdot, thetadot = x
        tau = np.array([u[0] + f[0], f[1]])
        qdd = np.linalg.solve(self._mass_matrix(theta), tau - self._bias(theta, thetadot))
        return np.array([pdot, thetadot, qdd[0], qdd[1]])

    def deriv_jacobians(self, x, u, f):
        _, theta, pdot, thetadot = x
        mp, length = self.pole_mass, self.pole_length
        sin_t, cos_t = np.sin(theta), np.cos(theta)

        M = self._mass_matrix(theta)
        Minv = np.linalg.inv(M)
        tau = np.array([u[0] + f[0], f[1]])
        qdd = Minv @ (tau - self._bias(theta, thetadot))

        dM_dtheta = np.array([[0.0, -mp * length * sin_t], [-mp * length * sin_t, 0.0]])
        dbias_dtheta = np.array([
            -mp * length * cos_t * thetadot ** 2,
            mp * self.gravity * length * cos_t,
        ])
        dbias_dthetadot = np.array([-2.0 * mp * length * sin_t * thetadot, 0.0])

        dqdd_dtheta = Minv @ (-dbias_dtheta - dM_dtheta @ qdd)
        dqdd_dthetadot = Minv @ (-dbias_dthetadot)

        fx = np.zeros((4, 4))
        fx[0, 2] = 1.0
        fx[1, 3] = 1.0
        fx[2:, 1] = dqdd_dtheta
        fx[2:, 3] = dqdd_dthetadot
        fu = np.zeros((4, 1))
        fu[2:, 0] = Minv[:, 0]
        return fx, fu

    def deriv_many(self, X, U, F):
        mp_, length = self.pole_mass, self.pole_length
        theta, thetadot = X[:, 1], X[:, 3]
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        B = X.shape[0]

        M = np.empty((B, 2, 2))
        M[:, 0, 0] = self.cart_mass + mp_
        M[:, 0, 1] = M[:, 1, 0] = mp_ * length * cos_t
        M[:, 1, 1] = mp_ * length ** 2
        rhs = np.empty((B, 2))
        rhs[:, 0] = U[:, 0] + F[:, 0] + mp_ * length * sin_t * thetadot ** 2
        rhs[:, 1] = F[:, 1] - mp_ * self.gravity * length * sin_t
        qdd = np.linalg.solve(M, rhs[:, :, None])[:, :, 0]
        return np.concatenate([X[:, 2:], qdd], axis=1)

    def deriv_jacobians_many(self, X, U, F):
        mp_, length = self.pole_mass, self.pole_length
        theta, thetadot = X[:, 1], X[:, 3]
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        B = X.shape[0]

        M = np.empty((B, 2, 2))
        M[:, 0, 0] = self.cart_mass + mp_
        M[:, 0, 1] = M[:, 1, 0] = mp_ * length * cos_t
        M[:, 1, 1] = mp_ * length ** 2
        Minv = np.linalg.inv(M)

        rhs = np.empty((B, 2))
        rhs[:, 0] = U[:, 0] + F[:, 0] + mp_ * length * sin_t * thetadot ** 2
        rhs[:, 1] = F[:, 1] - mp_ * self.gravity * length * sin_t
        qdd = np.einsum("bij,bj->bi", Minv, rhs)

        dM_dtheta = np.zeros((B, 2, 2))
        dM_dtheta[:, 0, 1] = dM_dtheta[:, 1, 0] = -mp_ * length * sin_t
        drhs_dtheta = np.empty((B, 2))
        drhs_dtheta[:, 0] = mp_ * length * cos_t * thetadot ** 2
        drhs_dtheta[:, 1] = -mp_ * self.gravity * length * cos_t
        drhs_dthetadot = np.zeros((B, 2))
        drhs_dthetadot[:, 0] = 2.0 * mp_ * length * sin_t * thetadot

        dqdd_dtheta = np.einsum(
            "bij,bj->bi", Minv, drhs_dtheta - np.einsum("bij,bj->bi", dM_dtheta, qdd)
        )
        dqdd_dthetadot = np.einsum("bij,bj->bi", Minv, drhs_dthetadot)

        fx = np.zeros((B, 4, 4))
        fx[:, 0, 2] = 1.0
        fx[:, 1, 3] = 1.0
        fx[:, 2:, 1] = dqdd_dtheta
        fx[:, 2:, 3] = dqdd_dthetadot
        fu = np.zeros((B, 4, 1))
        fu[:, 2:, 0] = Minv[:, :, 0]
        return fx, fu


@dataclass(frozen=True)
class TwoLinkArm(DynamicsModel):
    """Planar 2R arm with analytic Lagrangian dynamics and a tip-force channel.

    Gravity defaults to zero (tabletop arm) so disturbance studies are not
    confounded by uncompensated gravity torques. The external force is a
    planar force at the end effector, applied as J(q)^T f in joint space.
    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    gravity: float = 0.0
    joint_damping: float = 0.05
    name: str = "two_link_arm"

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def control_dim(self) -> int:
        return 2

    @property
    def force_dim(self) -> int:
        return 2

    # COM at mid-link, thin-rod inertia about the COM.
    @property
    def lc1(self) -> float:
        return 0.5 * self.l1

    @property
    def lc2(self) -> float:
        return 0.5 * self.l2

    @property
    def _inertias(self) -> tuple[float, float]:
        return (self.m1 * self.l1 ** 2 / 12.0, self.m2 * self.l2 ** 2 / 12.0)

    @property
    def _abc(self) -> tuple[float, float, float]:
        I1, I2 = self._inertias
        alpha = I1 + I2 + self.m1 * self.lc1 ** 2 + self.m2 * (self.l1 ** 2 + self.lc2 ** 2)
        beta = self.m2 * self.l1 * self.lc2
        delta = I2 + self.m2 * self.lc2 ** 2
        return alpha, beta, delta

    def ee_position(self, q: np.ndarray) -> np.ndarray:
        q1, q2 = q[0], q[1]
        return np.array([
            self.l1 * np.cos(q1) + self.l2 * np.cos(q1 + q2),
            self.l1 * np.sin(q1) + self.l2 * np.sin(q1 + q2),
        ])

    def tip_jacobian(self, q: np.ndarray) -> np.ndarray:
        q1, q2 = q[0], q[1]
        s1, c1 = np.sin(q1), np.cos(q1)
        s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
        return np.array([
            [-self.l1 * s1 - self.l2 * s12, -self.l2 * s12],
            [self.l1 * c1 + self.l2 * c12, self.l2 * c12],
        ])

    def inverse_kinematics(self, target: np.ndarray, elbow_up: bool = False) -> np.ndarray:
        """Joint angles reaching a planar target, clipped to the reachable annulus."""
        x, y = float(target[0]), float(target[1])
        r2 = x * x + y * y
        cos_q2 = (r2 - self.l1 ** 2 - self.l2 ** 2) / (2.0 * self.l1 * self.l2)
        cos_q2 = float(np.clip(cos_q2, -1.0, 1.0))
        q2 = np.arccos(cos_q2)
        if elbow_up:
            q2 = -q2
        q1 = np.arctan2(y, x) - np.arctan2(self.l2 * np.sin(q2), self.l1 + self.l2 * np.cos(q2))
        return np.array([q1, q2])

    def _mass_matrix(self, q2):
        alpha, beta, delta = self._abc
        c2 = np.cos(q2)
        return np.array([
            [alpha + 2.0 * beta * c2, delta + beta * c2],
            [delta + beta * c2, delta],
        ])

    def _coriolis(self, q2, qd):
        _, beta, _ = self._abc
        s2 = np.sin(q2)
        return np.array([
            -beta * s2 * (2.0 * qd[0] * qd[1] + qd[1] ** 2),
            beta * s2 * qd[0] ** 2,
        ])

    def _gravity_torque(self, q):
        if self.gravity == 0.0:
            return np.zeros(2)
        g = self.gravity
        c1 = np.cos(q[0])
        c12 = np.cos(q[0] + q[1])
        return np.array([
            (self.m1 * self.lc1 + self.m2 * self.l1) * g * c1 + self.m2 * self.lc2 * g * c12,
            self.m2 * self.lc2 * g * c12,
        ])

    def deriv(self, x, u, f):
        q, qd = x[:2], x[2:]
        tau = (
            u
            + self.tip_jacobian(q).T @ f
            - self._coriolis(q[1], qd)
            - self._gravity_torque(q)
            - self.joint_damping * qd
        )
        qdd = np.linalg.solve(self._mass_matrix(q[1]), tau)
        return np.concatenate([qd, qdd])

    def deriv_jacobians(self, x, u, f):
        q, qd = x[:2], x[2:]
        _, beta, _ = self._abc
        s2, c2 = np.sin(q[1]), np.cos(q[1])

        M = self._mass_matrix(q[1])
        Minv = np.linalg.inv(M)
        tau = (
            u
            + self.tip_jacobian(q).T @ f
            - self._coriolis(q[1], qd)
            - self._gravity_torque(q)
            - self.joint_damping * qd
        )
        qdd = Minv @ tau

        # d(J^T f)/dq entries from the closed-form tip Jacobian.
        s1, c1 = np.sin(q[0]), np.cos(q[0])
        s12, c12 = np.sin(q[0] + q[1]), np.cos(q[0] + q[1])
        fxc, fyc = f[0], f[1]
        dtip = np.array([
            [(-self.l1 * c1 - self.l2 * c12) * fxc + (-self.l1 * s1 - self.l2 * s12) * fyc,
             -self.l2 * c12 * fxc - self.l2 * s12 * fyc],
            [-self.l2 * c12 * fxc - self.l2 * s12 * fyc,
             -self.l2 * c12 * fxc - self.l2 * s12 * fyc],
        ])

        dM_dq2 = np.array([[-2.0 * beta * s2, -beta * s2], [-beta * s2, 0.0]])
        dcor_dq2 = np.array([
            -beta * c2 * (2.0 * qd[0] * qd[1] + qd[1] ** 2),
            beta * c2 * qd[0] ** 2,
        ])
        dcor_dqd = np.array([
            [-2.0 * beta * s2 * qd[1], -2.0 * beta * s2 * (qd[0] + qd[1])],
            [2.0 * beta * s2 * qd[0], 0.0],
        ])

        if self.gravity != 0.0:
            g = self.gravity
            dg = np.array([
                [-(self.m1 * self.lc1 + self.m2 * self.l1) * g * s1 - self.m2 * self.lc2 * g * s12,
                 -self.m2 * self.lc2 * g * s12],
                [-self.m2 * self.lc2 * g * s12, -self.m2 * self.lc2 * g * s12],
            ])
        else:
            dg = np.zeros((2, 2))

        dqdd_dq = np.empty((2, 2))
        dqdd_dq[:, 0] = Minv @ (dtip[:, 0] - dg[:, 0])
        dqdd_dq[:, 1] = Minv @ (dtip[:, 1] - dcor_dq2 - dg[:, 1] - dM_dq2 @ qdd)
        dqdd_dqd = Minv @ (-dcor_dqd - self.joint_damping * np.eye(2))

        fx = np.zeros((4, 4))
        fx[0, 2] = 1.0
        fx[1, 3] = 1.0
        fx[2:, :2] = dqdd_dq
        fx[2:, 2:] = dqdd_dqd
        fu = np.zeros((4, 2))
        fu[2:, :] = Minv
        return fx, fu

    def deriv_many(self, X, U, F):
        alpha, beta, delta = self._abc
        q1, q2, qd1, qd2 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
        s1, c1 = np.sin(q1), np.cos(q1)
        s2, c2 = np.sin(q2), np.cos(q2)
        s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
        B = X.shape[0]

        M = np.empty((B, 2, 2))
        M[:, 0, 0] = alpha + 2.0 * beta * c2
        M[:, 0, 1] = M[:, 1, 0] = delta + beta * c2
        M[:, 1, 1] = delta

        tau = np.empty((B, 2))
        tau[:, 0] = (
            U[:, 0]
            + (-self.l1 * s1 - self.l2 * s12) * F[:, 0]
            + (self.l1 * c1 + self.l2 * c12) * F[:, 1]
            + beta * s2 * (2.0 * qd1 * qd2 + qd2 ** 2)
            - self.joint_damping * qd1
        )
        tau[:, 1] = (
            U[:, 1]
            - self.l2 * s12 * F[:, 0]
            + self.l2 * c12 * F[:, 1]
            - beta * s2 * qd1 ** 2
            - self.joint_damping * qd2
        )
        if self.gravity != 0.0:
            g = self.gravity
            tau[:, 0] -= (self.m1 * self.lc1 + self.m2 * self.l1) * g * c1 + self.m2 * self.lc2 * g * c12
            tau[:, 1] -= self.m2 * self.lc2 * g * c12
        qdd = np.linalg.solve(M, tau[:, :, None])[:, :, 0]
        return np.concatenate([X[:, 2:], qdd], axis=1)

    def deriv_jacobians_many(self, X, U, F):
        alpha, beta, delta = self._abc
        q1, q2, qd1, qd2 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
        s1, c1 = np.sin(q1), np.cos(q1)
        s2, c2 = np.sin(q2), np.cos(q2)
        s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
        fxc, fyc = F[:, 0], F[:, 1]
        B = X.shape[0]

        M = np.empty((B, 2, 2))
        M[:, 0, 0] = alpha + 2.0 * beta * c2
        M[:, 0, 1] = M[:, 1, 0] = delta + beta * c2
        M[:, 1, 1] = delta
        Minv = np.linalg.inv(M)

        tau = np.empty((B, 2))
        tau[:, 0] = (
            U[:, 0]
            + (-self.l1 * s1 - self.l2 * s12) * fxc
            + (self.l1 * c1 + self.l2 * c12) * fyc
            + beta * s2 * (2.0 * qd1 * qd2 + qd2 ** 2)
            - self.joint_damping * qd1
        )
        tau[:, 1] = (
            U[:, 1]
            - self.l2 * s12 * fxc
            + self.l2 * c12 * fyc
            - beta * s2 * qd1 ** 2
            - self.joint_damping * qd2
        )
        if self.gravity != 0.0:
            g = self.gravity
            tau[:, 0] -= (self.m1 * self.lc1 + self.m2 * self.l1) * g * c1 + self.m2 * self.lc2 * g * c12
            tau[:, 1] -= self.m2 * self.lc2 * g * c12
        qdd = np.einsum("bij,bj->bi", Minv, tau)

        dtip = np.empty((B, 2, 2))
        dtip[:, 0, 0] = (-self.l1 * c1 - self.l2 * c12) * fxc + (-self.l1 * s1 - self.l2 * s12) * fyc
        dtip[:, 0, 1] = -self.l2 * c12 * fxc - self.l2 * s12 * fyc
        dtip[:, 1, 0] = dtip[:, 0, 1]
        dtip[:, 1, 1] = dtip[:, 0, 1]

        dM_dq2 = np.zeros((B, 2, 2))
        dM_dq2[:, 0, 0] = -2.0 * beta * s2
        dM_dq2[:, 0, 1] = dM_dq2[:, 1, 0] = -beta * s2

        dcor_dq2 = np.empty((B, 2))
        dcor_dq2[:, 0] = -beta * c2 * (2.0 * qd1 * qd2 + qd2 ** 2)
        dcor_dq2[:, 1] = beta * c2 * qd1 ** 2
        dcor_dqd = np.empty((B, 2, 2))
        dcor_dqd[:, 0, 0] = -2.0 * beta * s2 * qd2
        dcor_dqd[:, 0, 1] = -2.0 * beta * s2 * (qd1 + qd2)
        dcor_dqd[:, 1, 0] = 2.0 * beta * s2 * qd1
        dcor_dqd[:, 1, 1] = 0.0

        if self.gravity != 0.0:
            g = self.gravity
            dg = np.empty((B, 2, 2))
            dg[:, 0, 0] = (
                -(self.m1 * self.lc1 + self.m2 * self.l1) * g * s1
                - self.m2 * self.lc2 * g * s12
            )
            dg[:, 0, 1] = -self.m2 * self.lc2 * g * s12
            dg[:, 1, 0] = dg[:, 0, 1]
            dg[:, 1, 1] = dg[:, 0, 1]
        else:
            dg = np.zeros((B, 2, 2))

        col0 = np.einsum("bij,bj->bi", Minv, dtip[:, :, 0] - dg[:, :, 0])
        col1 = np.einsum(
            "bij,bj->bi",
            Minv,
            dtip[:, :, 1] - dcor_dq2 - dg[:, :, 1] - np.einsum("bij,bj->bi", dM_dq2, qdd),
        )
        damp = self.joint_damping * np.eye(2)
        dqdd_dqd = np.matmul(Minv, -dcor_dqd - damp)

        fx = np.zeros((B, 4, 4))
        fx[:, 0, 2] = 1.0
        fx[:, 1, 3] = 1.0
        fx[:, 2:, 0] = col0
        fx[:, 2:, 1] = col1
        fx[:, 2:, 2:] = dqdd_dqd
        fu = np.zeros((B, 4, 2))
        fu[:, 2:, :] = Minv
        return fx, fu


# --------------------------------------------------------------------------- #
# Integration                                                                  #
# --------------------------------------------------------------------------- #

def _force_vector(model: DynamicsModel, f_ext, t: float = 0.0) -> np.ndarray:
    if f_ext is None:
        return np.zeros(model.force_dim)
    if isinstance(f_ext, ExternalForce):
        vec = f_ext.at(t)
    else:
        vec = np.asarray(f_ext, dtype=float)
    if vec.shape != (model.force_dim,):
        raise DimensionError(
            f"force dimension {vec.shape} does not match {model.name}'s "
            f"force channel ({model.force_dim},)"
        )
    return vec


def _rk4(model: DynamicsModel, x, u, h, fvec):
    k1 = model.deriv(x, u, fvec)
    k2 = model.deriv(x + 0.5 * h * k1, u, fvec)
    k3 = model.deriv(x + 0.5 * h * k2, u, fvec)
    k4 = model.deriv(x + h * k3, u, fvec)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(model: DynamicsModel, x, u, h: float, f_ext=None) -> np.ndarray:
    """One RK4 step of duration h with u and f_ext held constant."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,):
        raise DimensionError(f"state shape {x.shape} != ({model.state_dim},)")
    if u.shape != (model.control_dim,):
        raise DimensionError(f"control shape {u.shape} != ({model.control_dim},)")
    if h <= 0:
        raise ValueError("timestep must be positive")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    return _rk4(model, x, u, h, _force_vector(model, f_ext))


def step_jacobians(model: DynamicsModel, x, u, h: float, f_ext=None):
    """Exact Jacobians (A, B) of the RK4 discrete map at (x, u).

    These differentiate the discretized step itself (chain rule through the
    four stages), not the continuous derivative, so they are consistent with
    defects computed from ``step``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,) or u.shape != (model.control_dim,):
        raise DimensionError("state/control dimensions do not match the model")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    fvec = _force_vector(model, f_ext)
    n = model.state_dim
    eye = np.eye(n)

    k1 = model.deriv(x, u, fvec)
    f1x, f1u = model.deriv_jacobians(x, u, fvec)
    dk1x, dk1u = f1x, f1u

    x2 = x + 0.5 * h * k1
    k2 = model.deriv(x2, u, fvec)
    f2x, f2u = model.deriv_jacobians(x2, u, fvec)
    dk2x = f2x @ (eye + 0.5 * h * dk1x)
    dk2u = f2x @ (0.5 * h * dk1u) + f2u

    x3 = x + 0.5 * h * k2
    k3 = model.deriv(x3, u, fvec)
    f3x, f3u = model.deriv_jacobians(x3, u, fvec)
    dk3x = f3x @ (eye + 0.5 * h * dk2x)
    dk3u = f3x @ (0.5 * h * dk2u) + f3u

    x4 = x + h * k3
    f4x, f4u = model.deriv_jacobians(x4, u, fvec)
    dk4x = f4x @ (eye + h * dk3x)
    dk4u = f4x @ (h * dk3u) + f4u

    A = eye + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    B = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return A, B


def step_jacobians_many(model: DynamicsModel, X, U, h: float, F):
    """Row-wise ``step_jacobians``: the same four-stage chain rule, batched."""
    B, n = X.shape
    eye = np.broadcast_to(np.eye(n), (B, n, n))

    k1 = model.deriv_many(X, U, F)
    f1x, f1u = model.deriv_jacobians_many(X, U, F)
    dk1x, dk1u = f1x, f1u

    X2 = X + 0.5 * h * k1
    k2 = model.deriv_many(X2, U, F)
    f2x, f2u = model.deriv_jacobians_many(X2, U, F)
    dk2x = np.matmul(f2x, eye + 0.5 * h * dk1x)
    dk2u = np.matmul(f2x, 0.5 * h * dk1u) + f2u

    X3 = X + 0.5 * h * k2
    k3 = model.deriv_many(X3, U, F)
    f3x, f3u = model.deriv_jacobians_many(X3, U, F)
    dk3x = np.matmul(f3x, eye + 0.5 * h * dk2x)
    dk3u = np.matmul(f3x, 0.5 * h * dk2u) + f3u

    X4 = X + h * k3
    f4x, f4u = model.deriv_jacobians_many(X4, U, F)
    dk4x = np.matmul(f4x, eye + h * dk3x)
    dk4u = np.matmul(f4x, h * dk3u) + f4u

    A = eye + (h / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    Bmat = (h / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return A, Bmat


def step_many(model: DynamicsModel, X: np.ndarray, U: np.ndarray, h: float, F: np.ndarray) -> np.ndarray:
    """Row-wise RK4 steps for stacked (state, control, force) triples.

    Used on hot paths (defect/merit evaluation) where per-row ``step`` calls
    would dominate; the arithmetic matches ``step`` up to elementwise
    vectorization.
    """
    k1 = model.deriv_many(X, U, F)
    k2 = model.deriv_many(X + 0.5 * h * k1, U, F)
    k3 = model.deriv_many(X + 0.5 * h * k2, U, F)
    k4 = model.deriv_many(X + h * k3, U, F)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True)
class PlantConfig:
    """Closed-loop plant integrator: fixed-substep RK4 at h_plant seconds."""

    h_plant: float = 0.001
    scheme: str = "rk4"

    def __post_init__(self):
        if self.h_plant <= 0:
            raise ConfigError("h_plant must be positive")
        if self.scheme != "rk4":
            raise ConfigError(f"unsupported integration scheme {self.scheme!r}")

    def substeps(self, control_period: float) -> int:
        ratio = control_period / self.h_plant
        k = round(ratio)
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, abs(ratio)):
            raise ConfigError(
                f"control period {control_period} is not an integer multiple "
                f"of plant substep {self.h_plant}"
            )
        return k


def simulate_plant(
    model: DynamicsModel,
    x,
    u,
    control_period: float,
    cfg: PlantConfig,
    f_ext=None,
    t0: float = 0.0,
) -> np.ndarray:
    """Integrate the plant over one control period with zero-order-held u.

    Time-varying forces are evaluated at each substep start (t0 is the global
    time of the period start, so disturbance profiles stay phase-consistent
    across control steps).
    """
    k = cfg.substeps(control_period)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    for i in range(k):
        fvec = _force_vector(model, f_ext, t0 + i * cfg.h_plant)
        x = _rk4(model, x, u, cfg.h_plant, fvec)
    return x
