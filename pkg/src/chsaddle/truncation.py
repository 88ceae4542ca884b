"""Active-set truncation operators.

An iterate u marks node j active when |u_j| = 1 (up to a round-off
tolerance; the obstacle solver clamps exactly).  T zeroes active rows
and columns, That = Id - T restores unit diagonal entries there, so
TAT + That replaces active rows/columns of A by unit vectors.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError, InfeasibleIterateError
from .linalg import SparseMatrix, apply_operator, operator_dim, to_dense

ACTIVITY_TOL = 1e-12


@dataclass(frozen=True)
class TruncationMask:
    """Diagonals of T and That as 0/1 float vectors."""

    t_diag: np.ndarray
    that_diag: np.ndarray
    active_count: int

    @classmethod
    def from_active(cls, active):
        active = np.asarray(active, dtype=bool)
        t = (~active).astype(np.float64)
        return cls(t, 1.0 - t, int(active.sum()))

    @property
    def n(self):
        return self.t_diag.shape[0]

    @property
    def active(self):
        return self.that_diag > 0.5

    @property
    def inactive(self):
        return self.t_diag > 0.5


def mask_from_iterate(u, tol=ACTIVITY_TOL):
    """Mask with t=0 exactly where |u_j| >= 1 - tol.

    Raises InfeasibleIterateError when any |u_j| > 1 + tol.
    """
    u = np.asarray(u, dtype=np.float64)
    worst = np.max(np.abs(u)) if u.size else 0.0
    if worst > 1.0 + tol:
        raise InfeasibleIterateError(
            f"iterate leaves [-1,1] by {worst - 1.0:.3e} (tol {tol:.1e})")
    return TruncationMask.from_active(np.abs(u) >= 1.0 - tol)


class TruncatedOperator:
    """Implicit T A T + That around a base operator (matvec form)."""

    def __init__(self, base, mask):
        n = operator_dim(base)
        if n != mask.n:
            raise DimensionMismatchError(
                f"operator dim {n} vs mask dim {mask.n}")
        self.base = base
        self.mask = mask

    @property
    def shape(self):
        n = self.mask.n
        return (n, n)

    def matvec(self, x):
        t, that = self.mask.t_diag, self.mask.that_diag
        return t * apply_operator(self.base, t * x) + that * x

    def materialize(self):
        """Explicit sparse T A T + That (base must be a SparseMatrix)."""
        if not isinstance(self.base, SparseMatrix):
            raise TypeError("materialize requires a SparseMatrix base")
        return truncate_spd_matrix(self.base, self.mask)


def truncate_spd(A, mask):
    """The operator T A T + That; truncated rows/columns become unit ones."""
    return TruncatedOperator(A, mask)


def truncate_spd_matrix(A, mask):
    """Materialized T A T + That as a SparseMatrix."""
    if A.n_rows != mask.n or A.n_cols != mask.n:
        raise DimensionMismatchError("matrix/mask dimension mismatch")
    T = sp.diags(mask.t_diag)
    S = T @ A.to_scipy() @ T + sp.diags(mask.that_diag)
    out = sp.csr_matrix(S)
    out.eliminate_zeros()
    return SparseMatrix.from_scipy(out, symmetric=A.symmetric)


def truncate_rows(B, mask):
    """T B: rows with t=0 zeroed, the rest bit-identical."""
    if B.n_rows != mask.n:
        raise DimensionMismatchError("row count does not match mask")
    row_of = np.repeat(np.arange(B.n_rows), np.diff(B.indptr))
    data = B.data * mask.t_diag[row_of]
    return SparseMatrix(B.n_rows, B.n_cols, B.indptr.copy(),
                        B.indices.copy(), data)


@dataclass
class MMatrixCertificate:
    passed: bool
    violated: str | None
    positive_diagonal: bool
    nonpositive_offdiagonal: bool
    diagonally_dominant: bool
    inverse_nonnegative: bool | None   # None when the dense check was skipped

    def __bool__(self):
        return self.passed


def certify_m_matrix(A, strict=False, inverse_tol=-1e-12, dense_limit=400):
    """Check the M-matrix conditions on a square matrix.

    Sign conditions: a_ii > 0 and a_ij <= 0 for i != j.  Dominance:
    strictly diagonally dominant, or (unless strict) irreducibly
    diagonally dominant with at least one strict row.  For n <=
    dense_limit the inverse is formed and checked entrywise >=
    inverse_tol.  Never raises; returns a certificate naming the first
    violated condition.
    """
    if isinstance(A, SparseMatrix):
        S = A.to_scipy()
    else:
        S = sp.csr_matrix(np.asarray(A, dtype=np.float64))
    n = S.shape[0]
    if S.shape[0] != S.shape[1]:
        raise DimensionMismatchError("M-matrix certificate needs a square matrix")
    diag = S.diagonal()
    off = S - sp.diags(diag)
    off.eliminate_zeros()

    pos_diag = bool(np.all(diag > 0.0))
    nonpos_off = bool(off.nnz == 0 or np.all(off.data <= 0.0))

    offsums = np.abs(off).sum(axis=1).A.ravel() if off.nnz else np.zeros(n)
    slack = np.abs(diag) - offsums
    if np.all(slack > 0.0):
        dominant = True
    elif strict:
        dominant = False
    else:
        # irreducible diagonal dominance, applied per connected component
        # (truncation decouples unit rows, so the graph may split; each
        # component must be weakly dominant with at least one strict row)
        ncomp, labels = sp.csgraph.connected_components(S, directed=False)
        dominant = True
        for comp in range(ncomp):
            rows = labels == comp
            weak_ok = bool(np.all(slack[rows] >= -1e-14 * np.abs(diag[rows])))
            has_strict = bool(np.any(slack[rows] > 1e-14 * np.abs(diag[rows])))
            if not (weak_ok and has_strict):
                dominant = False
                break

    inv_ok = None
    if n <= dense_limit:
        try:
            inv = np.linalg.inv(to_dense(SparseMatrix.from_scipy(S)))
            inv_ok = bool(np.all(inv >= inverse_tol))
        except np.linalg.LinAlgError:
            inv_ok = False

    violated = None
    if not pos_diag:
        violated = "positive diagonal"
    elif not nonpos_off:
        violated = "nonpositive off-diagonal"
    elif not dominant:
        violated = "diagonal dominance"
    elif inv_ok is False:
        violated = "inverse nonnegativity"
    return MMatrixCertificate(violated is None, violated, pos_diag,
                              nonpos_off, dominant, inv_ok)
