"""Compressed sparse row storage and the small operator algebra used
throughout the package.

``SparseMatrix`` is a thin immutable CSR container; scipy.sparse backs the
setup-time manipulations (products, slicing, transposes) while the
performance-critical sweeps read the raw arrays directly.
"""

import numpy as np
import scipy.sparse as sp

from .. import _kernels
from ..errors import DimensionMismatchError, SizeGuardError

DENSE_ENTRY_GUARD = 4_000_000


class SparseMatrix:
    """Real CSR matrix.

    Invariants: monotone row offsets, strictly increasing column indices
    within each row, finite values.  ``symmetric`` flags matrices that are
    exactly equal to their transpose.
    """

    __slots__ = ("n_rows", "n_cols", "indptr", "indices", "data", "symmetric")

    def __init__(self, n_rows, n_cols, indptr, indices, data, symmetric=False):
        indptr = np.asarray(indptr)
        indices = np.asarray(indices)
        data = np.asarray(data, dtype=np.float64)
        if indptr.shape != (n_rows + 1,) or indptr[0] != 0 or indptr[-1] != len(data):
            raise ValueError("malformed CSR offsets")
        if len(indices) != len(data):
            raise ValueError("indices/data length mismatch")
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.indptr = indptr
        self.indices = indices
        self.data = data
        self.symmetric = bool(symmetric)

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.data)

    @classmethod
    def from_scipy(cls, A, symmetric=False):
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr, A.indices, A.data,
                   symmetric=symmetric)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals, symmetric=False):
        """Build CSR from COO triplets with a canonical accumulation order.

        Duplicates are summed after sorting by (row, col, value), so the
        result is bit-identical under any permutation of the input
        triplets.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (len(rows) == len(cols) == len(vals)):
            raise ValueError("COO triplet arrays must have equal length")
        order = np.lexsort((vals, cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(vals):
            new_entry = np.empty(len(vals), dtype=bool)
            new_entry[0] = True
            new_entry[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new_entry)
            summed = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        else:
            summed = vals
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        return cls(n_rows, n_cols, indptr, cols, summed, symmetric=symmetric)

    @classmethod
    def identity(cls, n):
        return cls.from_scipy(sp.identity(n, format="csr"), symmetric=True)

    def to_scipy(self):
        """Zero-copy scipy view sharing this matrix's arrays."""
        return sp.csr_matrix((self.data, self.indices, self.indptr),
                             shape=self.shape)

    def diagonal(self):
        return self.to_scipy().diagonal()

    def transpose(self):
        return SparseMatrix.from_scipy(self.to_scipy().T,
                                       symmetric=self.symmetric)

    def matvec(self, x):
        return spmv(self, x)

    def validate(self):
        """Check the CSR invariants; raises ValueError on violation."""
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("row offsets not monotone")
        for i in range(self.n_rows):
            cols = self.indices[self.indptr[i]:self.indptr[i + 1]]
            if cols.size and (np.any(np.diff(cols) <= 0)
                              or cols[0] < 0 or cols[-1] >= self.n_cols):
                raise ValueError(f"row {i}: column indices not strictly "
                                 "increasing or out of range")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite values")
        if self.symmetric:
            S = self.to_scipy()
            D = S - S.T
            if D.nnz and np.any(D.data != 0.0):
                raise ValueError("symmetric flag set but A != A^T")
        return True


def spmv(A, x):
    """Sparse matrix-vector product with deterministic row-wise accumulation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.n_cols,):
        raise DimensionMismatchError(
            f"spmv: operand is {A.shape}, vector has length {x.shape}")
    out = np.empty(A.n_rows)
    _kernels.csr_matvec(A.indptr, A.indices, A.data, x, out)
    return out


def to_dense(A):
    """Expand a SparseMatrix to a dense array (guarded)."""
    if A.n_rows * A.n_cols > DENSE_ENTRY_GUARD:
        raise SizeGuardError(
            f"to_dense: {A.n_rows}x{A.n_cols} exceeds {DENSE_ENTRY_GUARD} entries")
    return np.asarray(A.to_scipy().todense())


class RankOneUpdated:
    """Operator base + u v^T applied lazily: x -> base(x) + u (v^T x)."""

    def __init__(self, base, u_vec, v_vec):
        self.base = base
        self.u_vec = np.asarray(u_vec, dtype=np.float64)
        self.v_vec = np.asarray(v_vec, dtype=np.float64)
        n = operator_dim(base)
        if self.u_vec.shape != (n,) or self.v_vec.shape != (n,):
            raise DimensionMismatchError("rank-one vectors do not match base")

    @property
    def shape(self):
        n = operator_dim(self.base)
        return (n, n)

    def matvec(self, x):
        return apply_operator(self.base, x) + self.u_vec * (self.v_vec @ x)


def operator_dim(op):
    """Number of rows/columns of a square operator handle."""
    if hasattr(op, "shape"):
        return op.shape[0]
    raise TypeError(f"cannot infer dimension of {type(op)}")


def apply_operator(op, x):
    """Apply a SparseMatrix, ndarray, callable, or .matvec object to x."""
    if isinstance(op, SparseMatrix):
        return spmv(op, x)
    if isinstance(op, np.ndarray):
        return op @ x
    if callable(op):
        return op(x)
    if hasattr(op, "matvec"):
        return op.matvec(x)
    raise TypeError(f"not an operator: {type(op)}")
