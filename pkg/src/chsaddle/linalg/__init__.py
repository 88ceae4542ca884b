"""Sparse and small-dense linear algebra kernels."""

from .sparse import (SparseMatrix, RankOneUpdated, spmv, to_dense,
                     apply_operator, operator_dim)
from .gmres import (GmresConfig, GmresResult, ShermanResult, gmres,
                    sherman_woodbury_solve)
from .eig import dense_generalized_eig, jacobi_eigh, charpoly_roots

__all__ = [
    "SparseMatrix", "RankOneUpdated", "spmv", "to_dense", "apply_operator",
    "operator_dim", "GmresConfig", "GmresResult", "ShermanResult", "gmres",
    "sherman_woodbury_solve", "dense_generalized_eig", "jacobi_eigh",
    "charpoly_roots",
]
