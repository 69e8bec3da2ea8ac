"""Symmetric block-tridiagonal matrices and the PCG solver that consumes them.

A matrix is stored as its diagonal blocks plus its sub-diagonal blocks; the
super-diagonal is never stored and is applied as the transpose of the
sub-diagonal, so densification is symmetric by construction. Blocks live in
C-contiguous ``(rows, dim, dim)`` arrays, packed row-major by block row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PcgBreakdownError


@dataclass
class BlockTriMatrix:
    """Symmetric block-tridiagonal matrix.

    diag_blocks:    (n_blockrows, block_dim, block_dim)
    offdiag_blocks: (n_blockrows - 1, block_dim, block_dim), sub-diagonal;
                    block k sits at block position (k + 1, k).
    """

    diag_blocks: np.ndarray
    offdiag_blocks: np.ndarray

    def __post_init__(self):
        self.diag_blocks = np.ascontiguousarray(self.diag_blocks, dtype=float)
        self.offdiag_blocks = np.ascontiguousarray(self.offdiag_blocks, dtype=float)
        nb, bd = self.n_blockrows, self.block_dim
        if self.diag_blocks.ndim != 3 or self.diag_blocks.shape[1:] != (bd, bd):
            raise DimensionError("diag_blocks must have shape (n_blockrows, d, d)")
        if self.offdiag_blocks.shape != (max(nb - 1, 0), bd, bd):
            raise DimensionError(
                f"expected {nb - 1} off-diagonal blocks of shape ({bd}, {bd}), "
                f"got {self.offdiag_blocks.shape}"
            )

    @property
    def n_blockrows(self) -> int:
        return self.diag_blocks.shape[0]

    @property
    def block_dim(self) -> int:
        return self.diag_blocks.shape[1]

    @property
    def size(self) -> int:
        return self.n_blockrows * self.block_dim

    @classmethod
    def identity(cls, n_blockrows: int, block_dim: int) -> "BlockTriMatrix":
        eye = np.broadcast_to(np.eye(block_dim), (n_blockrows, block_dim, block_dim))
        off = np.zeros((n_blockrows - 1, block_dim, block_dim))
        return cls(np.array(eye), off)


@dataclass(frozen=True)
class PcgSettings:
    """Stopping rule for the preconditioned conjugate gradient solve.

    ``tolerance`` is an absolute threshold on the true residual 2-norm;
    ``max_iterations`` defaults (when None) to 10x the unknown count.
    """

    tolerance: float = 1e-8
    max_iterations: int | None = None

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def iteration_cap(self, system_size: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return 10 * system_size


@dataclass
class PcgResult:
    solution: np.ndarray
    iterations: int
    converged: bool
    final_residual_norm: float


def densify(mat: BlockTriMatrix) -> np.ndarray:
    """Expand to a full dense symmetric matrix (oracle support, not a hot path)."""
    nb, bd = mat.n_blockrows, mat.block_dim
    dense = np.zeros((nb * bd, nb * bd))
    for i in range(nb):
        dense[i * bd:(i + 1) * bd, i * bd:(i + 1) * bd] = mat.diag_blocks[i]
    for k in range(nb - 1):
        block = mat.offdiag_blocks[k]
        dense[(k + 1) * bd:(k + 2) * bd, k * bd:(k + 1) * bd] = block
        dense[k * bd:(k + 1) * bd, (k + 1) * bd:(k + 2) * bd] = block.T
    return dense


def btmv(mat: BlockTriMatrix, v: np.ndarray) -> np.ndarray:
    """Block-tridiagonal matrix-vector product, densify(mat) @ v.

    Summation order is fixed (diagonal term, then sub-diagonal term, then
    super-diagonal term) so identical inputs give bitwise-identical output.
    """
    v = np.asarray(v, dtype=float)
    nb, bd = mat.n_blockrows, mat.block_dim
    if v.shape != (nb * bd,):
        raise DimensionError(f"vector length {v.shape} does not match system size {nb * bd}")
    blocks = v.reshape(nb, bd)
    out = np.einsum("kij,kj->ki", mat.diag_blocks, blocks)
    if nb > 1:
        out[1:] += np.einsum("kij,kj->ki", mat.offdiag_blocks, blocks[:-1])
        out[:-1] += np.einsum("kji,kj->ki", mat.offdiag_blocks, blocks[1:])
    return out.reshape(-1)


def pcg(
    S: BlockTriMatrix,
    gamma: np.ndarray,
    phi_inv: BlockTriMatrix,
    settings: PcgSettings,
) -> PcgResult:
    """Solve S @ lam = gamma for SPD S by preconditioned conjugate gradient.

    The preconditioner is applied as a matrix-vector product with ``phi_inv``
    (an approximate inverse of S). Convergence is declared on the true
    residual norm ||S lam - gamma||_2, recomputed each iteration, against the
    absolute tolerance in ``settings``. A non-positive curvature direction
    raises PcgBreakdownError, which signals a non-SPD input.
    """
    gamma = np.asarray(gamma, dtype=float)
    size = S.size
    if gamma.shape != (size,):
        raise DimensionError(f"rhs length {gamma.shape} does not match system size {size}")
    if phi_inv.n_blockrows != S.n_blockrows or phi_inv.block_dim != S.block_dim:
        raise DimensionError("preconditioner dimensions do not match the system")

    lam = np.zeros(size)
    r = gamma.copy()
    res_norm = float(np.linalg.norm(r))
    if res_norm <= settings.tolerance:
        return PcgResult(lam, 0, True, res_norm)

    z = btmv(phi_inv, r)
    p = z
    rz = float(r @ z)
    cap = settings.iteration_cap(size)

    for it in range(1, cap + 1):
        Sp = btmv(S, p)
        curvature = float(p @ Sp)
        if curvature <= 0.0:
            raise PcgBreakdownError(
                f"non-positive curvature {curvature:.3e} at PCG iteration {it}", it
            )
        alpha = rz / curvature
        lam = lam + alpha * p
        r = r - alpha * Sp
        res_norm = float(np.linalg.norm(btmv(S, lam) - gamma))
        if res_norm <= settings.tolerance:
            return PcgResult(lam, it, True, res_norm)
        z = btmv(phi_inv, r)
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next

    return PcgResult(lam, cap, False, res_norm)
