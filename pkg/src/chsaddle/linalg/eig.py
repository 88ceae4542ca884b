"""Dense symmetric (generalized) eigensolver built on cyclic Jacobi
rotations.

The generalized problem A x = lambda B x with symmetric A and SPD B is
reduced by the Cholesky factor B = L L^T to the ordinary symmetric
problem (L^{-1} A L^{-T}) y = lambda y, which Jacobi rotations
diagonalize.  Sizes are capped: the harness only ever needs desk-scale
pencils and the O(n^3)-per-sweep cost is then negligible.
"""

import numpy as np
import scipy.linalg

from .. import _kernels
from ..errors import EigenSolveError, SizeGuardError

DIM_GUARD = 2048
SYM_TOL = 1e-12


def jacobi_eigh(A, compute_vectors=False, rel_tol=1e-13, max_sweeps=50):
    """Eigenvalues (ascending) of a symmetric dense matrix by cyclic Jacobi.

    Returns (w, V, off_history) where V is None unless compute_vectors,
    and off_history holds the off-diagonal Frobenius norm before each
    sweep (strictly decreasing until convergence).
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise EigenSolveError("matrix must be square")
    V = np.eye(n) if compute_vectors else np.zeros((0, 0))
    off_history = np.zeros(max_sweeps + 1)
    sweeps = _kernels.jacobi_sweeps(A, V, compute_vectors, rel_tol,
                                    max_sweeps, off_history)
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    w = w[order]
    vecs = V[:, order] if compute_vectors else None
    return w, vecs, off_history[:sweeps + 1]


def dense_generalized_eig(A, B, compute_vectors=False, check_residuals=False):
    """Sorted real eigenvalues of B^{-1} A for symmetric A and SPD B.

    check_residuals additionally verifies ||A v - lambda B v|| <= 1e-9 ||A||
    for every pair (this forces eigenvector accumulation).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape != (n, n):
        raise EigenSolveError("A and B must be square and of equal size")
    if n > DIM_GUARD:
        raise SizeGuardError(f"dense eigensolve of size {n} > {DIM_GUARD}")
    anorm = np.linalg.norm(A, ord="fro")
    if anorm > 0 and np.max(np.abs(A - A.T)) > SYM_TOL * anorm:
        raise EigenSolveError("A is not symmetric within tolerance")
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError("B is not SPD (Cholesky failed)") from exc
    # C = L^{-1} A L^{-T}, symmetrized to remove round-off skew
    C = scipy.linalg.solve_triangular(L, A, lower=True)
    C = scipy.linalg.solve_triangular(L, C.T, lower=True).T
    C = 0.5 * (C + C.T)
    want_vecs = compute_vectors or check_residuals
    w, Y, _ = jacobi_eigh(C, compute_vectors=want_vecs)
    X = None
    if want_vecs:
        X = scipy.linalg.solve_triangular(L.T, Y, lower=False)
        if check_residuals:
            R = A @ X - B @ X * w[np.newaxis, :]
            worst = np.max(np.linalg.norm(R, axis=0))
            if worst > 1e-9 * max(anorm, 1e-300):
                raise EigenSolveError(
                    f"eigenpair residual {worst:.3e} exceeds 1e-9*||A||")
    if compute_vectors:
        return w, X
    return w


def charpoly_roots(A, B):
    """Roots of det(A - lambda B), via polynomial interpolation of the
    determinant.  Independent of any eigendecomposition; oracle use only."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n = A.shape[0]
    if n > 12:
        raise SizeGuardError("charpoly oracle limited to n <= 12")
    # interpolation points sized to the pencil's eigenvalue radius
    radius = max(1.0, np.linalg.norm(np.linalg.solve(B, A), 2))
    pts = 1.5 * radius * np.polynomial.chebyshev.chebpts1(n + 1)
    scale = max(np.max(np.abs(A)), np.max(np.abs(B)), 1.0)
    dets = [np.linalg.det((A - lam * B) / scale) for lam in pts]
    coeffs = np.polyfit(pts, dets, n)
    roots = np.roots(coeffs)
    return np.sort(roots.real[np.abs(roots.imag) < 1e-7 * radius])
