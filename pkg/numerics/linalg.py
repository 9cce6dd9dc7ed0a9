"""
Symmetric positive-definite solves and deterministic cross-products for IRLS.
"""

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import LinearOperator, cg

from .exceptions import NotPositiveDefiniteError

logger = logging.getLogger(__name__)

# Sparse systems up to this order are factorized densely (covariances need the
# full inverse anyway); larger ones go through preconditioned CG.
DENSE_LIMIT = 4000
BLOCK_ROWS = 65536
PIVOT_TOL = 1e-13


def _check_symmetric(matrix):
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if not np.allclose(matrix, matrix.T, rtol=1e-10, atol=1e-12 * scale):
        raise NotPositiveDefiniteError("matrix is not symmetric")


def cholesky(matrix):
    """Cholesky factor of an SPD matrix, raising NotPositiveDefiniteError."""
    matrix = np.asarray(matrix, dtype=float)
    _check_symmetric(matrix)
    try:
        factor = linalg.cho_factor(matrix, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefiniteError(
            f"matrix of order {matrix.shape[0]} is not positive definite "
            f"(collinear design?): {exc}"
        ) from exc
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() <= PIVOT_TOL * pivots.max():
        raise NotPositiveDefiniteError(
            f"matrix of order {matrix.shape[0]} is numerically singular "
            f"(pivot ratio {pivots.min() / pivots.max():.2e})"
        )
    return factor


def _solve_sparse_cg(matrix, rhs, tol):
    diagonal = matrix.diagonal()
    if np.any(diagonal <= 0.0):
        raise NotPositiveDefiniteError("sparse matrix has non-positive diagonal entries")
    preconditioner = LinearOperator(matrix.shape, matvec=lambda v: v / diagonal)
    solution, info = cg(matrix, rhs, rtol=tol * 1e-2, maxiter=10 * matrix.shape[0], M=preconditioner)
    if info != 0:
        raise NotPositiveDefiniteError(f"conjugate gradient failed to converge (info={info})")
    return solution


def solve_spd(matrix, rhs, tol=1e-8):
    """
    Solve ``matrix @ x = rhs`` for a symmetric positive-definite matrix.

    Args:
        matrix: Dense ndarray or scipy.sparse matrix, SPD within tolerance.
        rhs: Right-hand side vector.
        tol: Required relative residual ``||A x - b|| / ||b||``.

    Returns:
        ndarray: Solution vector.

    Raises:
        NotPositiveDefiniteError: If the matrix is not SPD (collinear design).
    """
    rhs = np.asarray(rhs, dtype=float)
    if sparse.issparse(matrix) and matrix.shape[0] > DENSE_LIMIT:
        matrix = sparse.csr_matrix(matrix)
        solution = _solve_sparse_cg(matrix, rhs, tol)
    else:
        if sparse.issparse(matrix):
            matrix = matrix.toarray()
        matrix = np.asarray(matrix, dtype=float)
        factor = cholesky(matrix)
        solution = linalg.cho_solve(factor, rhs)
        # one step of iterative refinement
        residual = rhs - matrix @ solution
        solution = solution + linalg.cho_solve(factor, residual)

    residual_norm = np.linalg.norm(matrix @ solution - rhs)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm > 0 and residual_norm > tol * rhs_norm:
        raise NotPositiveDefiniteError(
            f"solve residual {residual_norm:.3e} exceeds {tol:.1e} x ||rhs|| "
            "(matrix is numerically singular)"
        )
    return solution


def spd_inverse(matrix):
    """Inverse of an SPD matrix via its Cholesky factor."""
    if sparse.issparse(matrix):
        matrix = matrix.toarray()
    factor = cholesky(matrix)
    inverse = linalg.cho_solve(factor, np.eye(factor[0].shape[0]))
    return 0.5 * (inverse + inverse.T)


def pairwise_sum(parts):
    """Sum a list of arrays along a fixed binary tree (order-independent of scheduling)."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to sum")
    while len(parts) > 1:
        merged = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def _blocks(n_rows, block_rows):
    return [(start, min(start + block_rows, n_rows)) for start in range(0, n_rows, block_rows)]


def weighted_crossprod(X, weights, response=None, block_rows=BLOCK_ROWS, workers=1):
    """
    Compute ``X' diag(w) X`` (and ``X' diag(w) z`` when ``response`` is given).

    Rows are processed in fixed blocks whose partial sums are merged by
    ``pairwise_sum``; results are bit-identical for any ``workers`` count.

    Returns:
        ndarray or tuple(ndarray, ndarray): Dense cross-product matrix, and the
        weighted cross-product with the response if requested.
    """
    n_rows = X.shape[0]
    weights = np.asarray(weights, dtype=float)

    def block(bounds):
        start, stop = bounds
        rows = X[start:stop]
        w = weights[start:stop]
        if sparse.issparse(rows):
            weighted = sparse.diags(w) @ rows
            xtwx = (rows.T @ weighted).toarray()
        else:
            weighted = rows * w[:, None]
            xtwx = rows.T @ weighted
        xtwz = None
        if response is not None:
            xtwz = np.asarray(weighted.T @ response[start:stop]).ravel()
        return xtwx, xtwz

    bounds = _blocks(n_rows, block_rows) or [(0, 0)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(block, bounds))
    else:
        results = [block(b) for b in bounds]

    xtwx = pairwise_sum([r[0] for r in results])
    if response is None:
        return xtwx
    return xtwx, pairwise_sum([r[1] for r in results])
