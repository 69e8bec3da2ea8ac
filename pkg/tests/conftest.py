"""Shared helpers for the test suite."""

import numpy as np
import pytest

from trajbatch.dynamics import Cartpole, DoubleIntegrator, Pendulum, TwoLinkArm


ALL_MODELS = [
    DoubleIntegrator(dims=1),
    DoubleIntegrator(dims=2),
    Pendulum(),
    Cartpole(),
    TwoLinkArm(),
    TwoLinkArm(gravity=9.81),
]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_block_tridiagonal(rng, n_blockrows, block_dim, spd=True):
    """Random symmetric block-tridiagonal matrix, diagonally dominant when spd."""
    from trajbatch.blocktri import BlockTriMatrix

    diag = np.empty((n_blockrows, block_dim, block_dim))
    off = 0.3 * rng.standard_normal((max(n_blockrows - 1, 0), block_dim, block_dim))
    for i in range(n_blockrows):
        W = rng.standard_normal((block_dim, block_dim))
        diag[i] = W @ W.T / block_dim
        diag[i] += (3.0 * block_dim if spd else 0.0) * np.eye(block_dim)
        diag[i] = 0.5 * (diag[i] + diag[i].T)
    return BlockTriMatrix(diag, off)


def results_bitwise_equal(a, b) -> bool:
    """Exact equality of two SqpResults including their traces."""
    if not (np.array_equal(a.X, b.X) and np.array_equal(a.U, b.U)):
        return False
    if a.converged != b.converged or len(a.trace) != len(b.trace):
        return False
    for ra, rb in zip(a.trace, b.trace):
        if (
            ra.merit != rb.merit
            or ra.constraint_l1 != rb.constraint_l1
            or ra.alpha != rb.alpha
            or ra.rho != rb.rho
            or ra.pcg_iterations != rb.pcg_iterations
            or ra.accepted != rb.accepted
            or ra.step_inf_norm != rb.step_inf_norm
        ):
            return False
    return True
