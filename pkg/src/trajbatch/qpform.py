"""Per-iteration QP formation: Taylor expansion, KKT assembly, Schur system.

The QP at an iterate (X, U) minimizes the quadratic cost expansion subject to
linearized dynamics ``dx_{k+1} - A_k dx_k - B_k du_k = e_k`` and the
initial-condition row ``dx_0 = x_s - x_0``. Eliminating the primal variables
through the block-diagonal Hessian G yields a block-tridiagonal system in the
multipliers, solved by PCG with a symmetric stair preconditioner.

Sign convention: the assembled ``S`` is the positive-definite matrix
``C G^-1 C^T`` and ``gamma = C G^-1 g + c``, so PCG always sees an SPD system
and the recovered step satisfies the linearized constraints with the sign
that cancels (rather than amplifies) the defects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .blocktri import BlockTriMatrix
from .dynamics import (
    DynamicsModel,
    ExternalForce,
    step,
    step_jacobians_many,
    step_many,
)
from .errors import DimensionError, FactorizationError


# --------------------------------------------------------------------------- #
# Problem data                                                                 #
# --------------------------------------------------------------------------- #

def _check_symmetric(mat: np.ndarray, label: str):
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"{label} must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError(f"{label} must be symmetric")


@dataclass
class CostSpec:
    """Quadratic tracking cost: constant stage weights, optional per-knot goal.

    ``goal`` is either a single state (shape (n,)) or a reference sequence of
    shape (N+1, n) for tracking tasks.
    """

    Q: np.ndarray
    R: np.ndarray
    QN: np.ndarray
    goal: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.QN = np.asarray(self.QN, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        _check_symmetric(self.Q, "Q")
        _check_symmetric(self.R, "R")
        _check_symmetric(self.QN, "QN")

    def goal_at(self, k: int) -> np.ndarray:
        if self.goal.ndim == 1:
            return self.goal
        return self.goal[k]

    def evaluate(self, X: np.ndarray, U: np.ndarray) -> float:
        """Total tracking cost of a trajectory (the J in the merit function)."""
        goals = self.goal if self.goal.ndim == 2 else self.goal[None, :]
        dx = X[:-1] - (goals[:-1] if goals.shape[0] > 1 else goals)
        total = 0.5 * float(np.einsum("ki,ij,kj->", dx, self.Q, dx))
        total += 0.5 * float(np.einsum("ki,ij,kj->", U, self.R, U))
        dxN = X[-1] - (goals[-1] if goals.shape[0] > 1 else goals[0])
        return total + 0.5 * float(dxN @ self.QN @ dxN)


@dataclass
class ProblemSpec:
    """One trajectory-optimization problem over an N-step horizon."""

    model: DynamicsModel
    cost: CostSpec
    horizon: int
    timestep: float
    x_start: np.ndarray
    force: ExternalForce | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.timestep <= 0:
            raise ValueError("timestep must be positive")
        self.x_start = np.asarray(self.x_start, dtype=float)
        n = self.model.state_dim
        if self.x_start.shape != (n,):
            raise DimensionError(f"x_start shape {self.x_start.shape} != ({n},)")
        if self.cost.Q.shape != (n, n) or self.cost.QN.shape != (n, n):
            raise DimensionError("cost state weights do not match the model dimension")
        m = self.model.control_dim
        if self.cost.R.shape != (m, m):
            raise DimensionError("cost control weight does not match the model")
        if self.cost.goal.ndim == 2 and self.cost.goal.shape != (self.horizon + 1, n):
            raise DimensionError(
                f"per-knot goal must have shape ({self.horizon + 1}, {n})"
            )
        if self.force is None:
            self.force = self.model.zero_force()

    def force_at_knot(self, k: int) -> np.ndarray:
        """Assumed force at knot k (profiles evaluated at the knot start time)."""
        return self.force.at(k * self.timestep)

    def force_matrix(self) -> np.ndarray:
        """Assumed force stacked over all N stage knots, shape (N, force_dim)."""
        if self.force.is_constant:
            return np.broadcast_to(
                self.force.value, (self.horizon, self.force.dim)
            )
        return np.stack([self.force_at_knot(k) for k in range(self.horizon)])

    def rollout(self, U: np.ndarray) -> np.ndarray:
        """Integrate the solver-step dynamics from x_start under controls U."""
        X = np.empty((self.horizon + 1, self.model.state_dim))
        X[0] = self.x_start
        for k in range(self.horizon):
            X[k + 1] = step(self.model, X[k], U[k], self.timestep, self.force_at_knot(k))
        return X

    def defects(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Dynamics defects e_k = f(x_k, u_k, h) - x_{k+1}, shape (N, n).

        Knots are independent, so this uses the vectorized step.
        """
        return step_many(
            self.model, X[:-1], U, self.timestep, self.force_matrix()
        ) - X[1:]


@dataclass
class KnotLinearization:
    """Expansion blocks at one knot; dynamics entries are None at the last knot."""

    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    e: np.ndarray | None = None
    R: np.ndarray | None = None
    r: np.ndarray | None = None


def linearize(
    problem: ProblemSpec,
    X: np.ndarray,
    U: np.ndarray,
    rho: float,
    regularize_r: bool = True,
) -> list[KnotLinearization]:
    """Taylor-expand cost and dynamics along (X, U).

    The quadratic blocks are damped: Q_k = Q + rho*I (R_k likewise when
    ``regularize_r``), while the gradients q_k = Q (x_k - goal_k) and
    r_k = R u_k stay those of the undamped cost.
    """
    N, n, m = problem.horizon, problem.model.state_dim, problem.model.control_dim
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.shape != (N + 1, n) or U.shape != (N, m):
        raise DimensionError(f"expected X ({N + 1}, {n}) and U ({N}, {m})")
    if rho < 0:
        raise ValueError("rho must be >= 0")

    cost = problem.cost
    Qreg = cost.Q + rho * np.eye(n)
    Rreg = cost.R + rho * np.eye(m) if regularize_r else cost.R.copy()

    forces = problem.force_matrix()
    A, B = step_jacobians_many(problem.model, X[:-1], U, problem.timestep, forces)
    E = step_many(problem.model, X[:-1], U, problem.timestep, forces) - X[1:]
    goals = cost.goal if cost.goal.ndim == 2 else np.broadcast_to(cost.goal, (N + 1, n))
    qs = (X[:-1] - goals[:-1]) @ cost.Q.T
    rs = U @ cost.R.T

    blocks = []
    for k in range(N):
        blocks.append(KnotLinearization(
            Q=Qreg, q=qs[k], A=A[k], B=B[k], e=E[k], R=Rreg, r=rs[k],
        ))
    blocks.append(KnotLinearization(
        Q=cost.QN + rho * np.eye(n),
        q=cost.QN @ (X[N] - cost.goal_at(N)),
    ))
    return blocks


# --------------------------------------------------------------------------- #
# Dense KKT assembly (oracle path)                                             #
# --------------------------------------------------------------------------- #

@dataclass
class KktSystem:
    """Dense saddle-point data: block-diagonal G, stair constraint Jacobian C."""

    G: np.ndarray
    g: np.ndarray
    C: np.ndarray
    c: np.ndarray
    horizon: int
    state_dim: int
    control_dim: int


def form_kkt(blocks: list[KnotLinearization], x_s: np.ndarray, X: np.ndarray) -> KktSystem:
    """Assemble the dense QP data with decision order [dx_0, du_0, ..., dx_N]."""
    N = len(blocks) - 1
    n = blocks[0].Q.shape[0]
    m = blocks[0].R.shape[0]
    nz = (N + 1) * n + N * m
    nc = (N + 1) * n

    G = np.zeros((nz, nz))
    g = np.zeros(nz)
    C = np.zeros((nc, nz))
    c = np.zeros(nc)

    def x_off(k):
        return k * (n + m)

    def u_off(k):
        return k * (n + m) + n

    for k in range(N):
        blk = blocks[k]
        G[x_off(k):x_off(k) + n, x_off(k):x_off(k) + n] = blk.Q
        G[u_off(k):u_off(k) + m, u_off(k):u_off(k) + m] = blk.R
        g[x_off(k):x_off(k) + n] = blk.q
        g[u_off(k):u_off(k) + m] = blk.r
    G[x_off(N):x_off(N) + n, x_off(N):x_off(N) + n] = blocks[N].Q
    g[x_off(N):x_off(N) + n] = blocks[N].q

    C[0:n, 0:n] = np.eye(n)
    c[0:n] = x_s - X[0]
    for k in range(N):
        row = (k + 1) * n
        C[row:row + n, x_off(k):x_off(k) + n] = -blocks[k].A
        C[row:row + n, u_off(k):u_off(k) + m] = -blocks[k].B
        C[row:row + n, x_off(k + 1):x_off(k + 1) + n] = np.eye(n)
        c[row:row + n] = blocks[k].e

    return KktSystem(G, g, C, c, N, n, m)


# --------------------------------------------------------------------------- #
# Schur-complement system                                                      #
# --------------------------------------------------------------------------- #

def _spd_inverse(mat: np.ndarray, label: str, knot: int | None = None) -> np.ndarray:
    """Explicit SPD inverse via Cholesky, symmetrized against rounding drift."""
    try:
        factor = scipy.linalg.cho_factor(mat, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise FactorizationError(f"{label} is not positive definite: {exc}", knot) from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(mat.shape[0]), check_finite=False)
    return 0.5 * (inv + inv.T)


@dataclass
class SchurSystem:
    """Multiplier system S lam = gamma plus the pieces needed downstream.

    ``theta``, ``phi``, ``zeta`` are the intermediate per-knot blocks (kept
    for testing); ``q_inv``/``r_inv`` are the Hessian block inverses reused by
    ``recover_step``; ``phi_inv`` is filled by ``form_preconditioner``.
    """

    S: BlockTriMatrix
    gamma: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    zeta: np.ndarray
    q_inv: np.ndarray
    r_inv: np.ndarray
    phi_inv: BlockTriMatrix | None = None


def form_schur(blocks: list[KnotLinearization], x_s: np.ndarray, X: np.ndarray) -> SchurSystem:
    """Eliminate the primal variables and build the block-tridiagonal system."""
    N = len(blocks) - 1
    n = blocks[0].Q.shape[0]
    m = blocks[0].R.shape[0]

    # The damped cost blocks are typically one shared array per stage, so
    # memoize inverses by object identity within this call.
    inverse_cache: dict[int, np.ndarray] = {}

    def cached_inverse(mat, label, knot):
        key = id(mat)
        if key not in inverse_cache:
            inverse_cache[key] = _spd_inverse(mat, label, knot)
        return inverse_cache[key]

    q_inv = np.empty((N + 1, n, n))
    r_inv = np.empty((N, m, m))
    for k in range(N + 1):
        q_inv[k] = cached_inverse(blocks[k].Q, f"Q_{k}", k)
    for k in range(N):
        r_inv[k] = cached_inverse(blocks[k].R, f"R_{k}", k)

    A = np.stack([blocks[k].A for k in range(N)])
    B = np.stack([blocks[k].B for k in range(N)])
    q = np.stack([blocks[k].q for k in range(N + 1)])
    r = np.stack([blocks[k].r for k in range(N)])
    e = np.stack([blocks[k].e for k in range(N)])

    AQ = A @ q_inv[:-1]
    BR = B @ r_inv
    theta = AQ @ A.transpose(0, 2, 1) + BR @ B.transpose(0, 2, 1) + q_inv[1:]
    phi = -AQ
    qinv_q = np.einsum("kij,kj->ki", q_inv, q)
    zeta = (
        -np.einsum("kij,kj->ki", AQ, q[:-1])
        - np.einsum("kij,kj->ki", BR, r)
        + qinv_q[1:]
    )

    diag = np.empty((N + 1, n, n))
    diag[0] = q_inv[0]
    diag[1:] = theta
    S = BlockTriMatrix(diag, phi.copy())

    gamma = np.empty((N + 1, n))
    gamma[0] = qinv_q[0] + (np.asarray(x_s, dtype=float) - X[0])
    gamma[1:] = zeta + e

    return SchurSystem(S, gamma.reshape(-1), theta, phi, zeta, q_inv, r_inv)


def form_preconditioner(sys: SchurSystem) -> BlockTriMatrix:
    """Symmetric stair preconditioner: an approximate inverse of S.

    Diagonal blocks are the inverses of S's diagonal blocks (so the corner
    block is the regularized Q_0 itself); the sub-diagonal block at row k+1 is
    ``-inv(S_{k+1,k+1}) S_{k+1,k} inv(S_{k,k})``. When S is block diagonal the
    result is its exact inverse. The result is cached on ``sys.phi_inv``.
    """
    nb = sys.S.n_blockrows
    dinv = np.empty_like(sys.S.diag_blocks)
    for k in range(nb):
        dinv[k] = _spd_inverse(sys.S.diag_blocks[k], f"S diagonal block {k}", k)
    off = np.empty_like(sys.S.offdiag_blocks)
    for k in range(nb - 1):
        off[k] = -dinv[k + 1] @ sys.S.offdiag_blocks[k] @ dinv[k]
    phi_inv = BlockTriMatrix(dinv, off)
    sys.phi_inv = phi_inv
    return phi_inv


@dataclass
class StepDirection:
    """Primal step split by knot: dX is (N+1, n), dU is (N, m)."""

    dX: np.ndarray
    dU: np.ndarray

    @property
    def inf_norm(self) -> float:
        du = float(np.max(np.abs(self.dU))) if self.dU.size else 0.0
        return max(float(np.max(np.abs(self.dX))), du)


def recover_step(sys: SchurSystem, blocks: list[KnotLinearization], lam: np.ndarray) -> StepDirection:
    """Back-substitute multipliers into the primal step via block-diagonal G."""
    N = len(blocks) - 1
    n = blocks[0].Q.shape[0]
    m = blocks[0].R.shape[0]
    lam = np.asarray(lam, dtype=float)
    if lam.shape != ((N + 1) * n,):
        raise DimensionError(f"multiplier length {lam.shape} != ({(N + 1) * n},)")
    lam_blocks = lam.reshape(N + 1, n)

    A = np.stack([blocks[k].A for k in range(N)])
    B = np.stack([blocks[k].B for k in range(N)])
    q = np.stack([blocks[k].q for k in range(N + 1)])
    r = np.stack([blocks[k].r for k in range(N)])

    grad_x = q.copy()
    grad_x -= lam_blocks
    grad_x[:-1] += np.einsum("kji,kj->ki", A, lam_blocks[1:])
    grad_u = r + np.einsum("kji,kj->ki", B, lam_blocks[1:])

    dX = -np.einsum("kij,kj->ki", sys.q_inv, grad_x)
    dU = -np.einsum("kij,kj->ki", sys.r_inv, grad_u)
    return StepDirection(dX, dU)
