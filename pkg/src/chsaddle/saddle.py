"""The eta-rescaled truncated saddle-point system and its preconditioners.

After the change of variable y' = y/eps, the descent-direction system of
the outer iteration becomes (Ahat + mbar mbar^T) v = [0; b] with

    Ahat = [[T Kbar T + That,  T M ],
            [      M T,       -eta Kbar]],      mbar = [0; sqrt(eta) m],

solved by a Sherman-Woodbury pair of GMRES solves on Ahat.  The
preconditioners follow the untruncated analysis:

* bd     diag(Kbar + eta^{-1/2} M,  eta Kbar + eta^{1/2} M); truncated
         form replaces the (1,1) block by Khat + eta^{-1/2} T M T and the
         mass in the (2,2) block by T M T.
* bdsc   diag(Khat, Spre) with the factored Schur approximation
         Spre = (TM + sqrt(eta) Kbar) Khat^{-1} (TM + sqrt(eta) Khat),
         applied inverse-factored (two solves and one matvec).
* btdsc  block lower triangular [[Ahat11, 0], [M T, -Spre]]: forward
         substitution x1 = Ahat11^{-1} r1, x2 = Spre^{-1}(M T x1 - r2).

With no truncation all three fall back to the paper forms built from
Kbar and Spre = (M + sqrt(eta) Kbar) Kbar^{-1} (M + sqrt(eta) Kbar).

Inner block solves run to a fixed relative tolerance (default 1e-7) so
each preconditioner acts as an effectively constant linear operator;
``exact=True`` switches every block to a dense factorization for the
spectral harness.  Truncated rows are never fed to the multigrid: blocks
containing That are solved on the inactive set and extended trivially.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DimensionMismatchError, SolverFailureError
from .fem import FemOperators
from .linalg import (GmresConfig, SparseMatrix, gmres, sherman_woodbury_solve,
                     spmv)
from .multilevel import (LevelOperator, amg_vcycle,
                         build_aggregation_hierarchy, pcg_solve)
from .truncation import TruncationMask


class TruncatedSaddleSystem:
    """2n x 2n operator of the rescaled truncated system plus its
    rank-one term; solutions carry y = eps * y' back to the caller."""

    def __init__(self, ops: FemOperators, mask: TruncationMask):
        if mask.n != ops.n:
            raise DimensionMismatchError("mask does not match operators")
        self.ops = ops
        self.mask = mask
        self.n = ops.n
        self.eta = ops.eta
        m = ops.m
        self.mbar = np.concatenate([np.zeros(self.n),
                                    np.sqrt(self.eta) * m])

    @property
    def shape(self):
        return (2 * self.n, 2 * self.n)

    def _kbar(self, x):
        return spmv(self.ops.K, x) + self.ops.m * (self.ops.m @ x)

    def matvec_base(self, z):
        """Ahat z (no rank-one term)."""
        n = self.n
        t, that = self.mask.t_diag, self.mask.that_diag
        x, y = z[:n], z[n:]
        tx = t * x
        r1 = t * self._kbar(tx) + that * x + t * spmv(self.ops.M, y)
        r2 = spmv(self.ops.M, tx) - self.eta * self._kbar(y)
        return np.concatenate([r1, r2])

    def matvec(self, z):
        """(Ahat + mbar mbar^T) z."""
        return self.matvec_base(z) + self.mbar * (self.mbar @ z)

    def to_dense_base(self):
        from .linalg import to_dense
        n = self.n
        Kb = to_dense(self.ops.K) + np.outer(self.ops.m, self.ops.m)
        Md = to_dense(self.ops.M)
        t = self.mask.t_diag
        A11 = (t[:, None] * Kb * t[None, :]) + np.diag(self.mask.that_diag)
        A12 = t[:, None] * Md
        out = np.block([[A11, A12], [A12.T, -self.eta * Kb]])
        return out


def build_system(ops, mask, rhs_g):
    """Assemble the truncated system and the right-hand side [0; rhs_g]."""
    rhs_g = np.asarray(rhs_g, dtype=np.float64)
    if rhs_g.shape != (ops.n,):
        raise DimensionMismatchError("rhs_g must have one entry per node")
    sys_ = TruncatedSaddleSystem(ops, mask)
    rhs = np.concatenate([np.zeros(ops.n), rhs_g])
    return sys_, rhs


# ----------------------------------------------------------------------
# block solvers


def _dense_lu_solver(D):
    lu = scipy.linalg.lu_factor(D)
    return lambda r: scipy.linalg.lu_solve(lu, r)


def _spd_pcg_solver(op, tol):
    h = build_aggregation_hierarchy(op)
    return lambda r: pcg_solve(op, h, r, tol=tol)


class _MaskedSolver:
    """Solve a block that is (scaled) identity on the active set and an
    SPD operator on the inactive set, with optional active->inactive
    coupling: x_a = r_a / act_diag, x_i = B_ii^{-1}(r_i - C x_a)."""

    def __init__(self, n, act, inact, act_solve, coupling, inner_solve):
        self.n = n
        self.act = act
        self.inact = inact
        self.act_solve = act_solve
        self.coupling = coupling      # callable x_a -> contribution to r_i
        self.inner_solve = inner_solve

    def __call__(self, r):
        x = np.zeros(self.n)
        xa = self.act_solve(r[self.act]) if self.act.size else np.zeros(0)
        x[self.act] = xa
        ri = r[self.inact]
        if self.coupling is not None and self.act.size:
            ri = ri - self.coupling(xa)
        if self.inact.size:
            x[self.inact] = self.inner_solve(ri)
        return x


def _submatrix(S, rows, cols):
    return sp.csr_matrix(S[np.ix_(rows, cols)])


def _triangular_gmres_solver(system, alpha, beta, inner_tol, label):
    """Inner solver for G = alpha Kbar + beta T M (nonsymmetric when the
    mask is nontrivial).

    In (active, inactive) ordering G is block lower triangular up to the
    strictly-upper coupling alpha Kbar_ai, so GMRES preconditioned by the
    exact lower triangular part sees eigenvalues clustered at one and
    converges in a few steps.  The two triangular blocks (Kbar_aa and
    (alpha Kbar + beta M)_ii) are SPD and solved by multigrid PCG.
    """
    ops, mask = system.ops, system.mask
    n = system.n
    t = mask.t_diag
    M_sp, K_sp, m = ops.M.to_scipy(), ops.K.to_scipy(), ops.m
    act = np.where(mask.active)[0]
    inact = np.where(mask.inactive)[0]
    m_a, m_i = m[act], m[inact]

    # triangular blocks are applied as single V-cycles: the inner GMRES
    # only needs a spectrally clustered preconditioner, not exact solves
    aa_op = LevelOperator(SparseMatrix.from_scipy(
        _submatrix(K_sp, act, act), symmetric=True), m_a, 1.0)
    aa_h = build_aggregation_hierarchy(aa_op)
    C_ia = _submatrix(alpha * K_sp + beta * M_sp, inact, act)
    if inact.size:
        ii_op = LevelOperator(SparseMatrix.from_scipy(
            _submatrix(alpha * K_sp + beta * M_sp, inact, inact),
            symmetric=True), m_i, alpha)
        ii_h = build_aggregation_hierarchy(ii_op)

    def tri(r):
        x = np.zeros(n)
        xa = amg_vcycle(aa_h, r[act] / alpha, np.zeros(act.size))
        x[act] = xa
        if inact.size:
            ri = r[inact] - C_ia @ xa - alpha * m_i * (m_a @ xa)
            x[inact] = amg_vcycle(ii_h, ri, np.zeros(inact.size))
        return x

    def mv(x):
        return alpha * system._kbar(x) + beta * (t * spmv(ops.M, x))

    cfg = GmresConfig(restart=30, max_iters=60, rel_tol=inner_tol)

    def solve(r):
        out = gmres(mv, tri, r, cfg)
        if not out.converged:
            raise SolverFailureError(
                f"inner solve for {label} stalled (residual "
                f"{out.residual:.3e})")
        return out.x

    return solve


@dataclass
class Preconditioner:
    """Assembled block solvers for one of {bd, bdsc, btdsc}."""

    kind: str
    apply: callable
    inner_tol: float
    exact: bool
    parts: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        n = self.parts["n"]
        return (2 * n, 2 * n)

    def matvec(self, r):
        return self.apply(r)


def _schur_pre_solvers(system, inner_tol, exact):
    """Solvers implementing Spre^{-1} (factored) and its building blocks.

    Untruncated:  Spre^{-1} = G^{-1} Kbar G^{-1},  G = M + sqrt(eta) Kbar.
    Truncated:    Spre^{-1} = F1^{-1} Khat F2^{-1} with
                  F1 = TM + sqrt(eta) Khat (block triangular, solved
                  directly) and F2 = TM + sqrt(eta) Kbar (inner GMRES with
                  an exact block-lower-triangular preconditioner, which
                  leaves a nilpotent defect and converges in a few steps).
    """
    ops, mask = system.ops, system.mask
    n, eta = system.n, system.eta
    se = np.sqrt(eta)
    M_sp, K_sp, m = ops.M.to_scipy(), ops.K.to_scipy(), ops.m
    t = mask.t_diag

    if mask.active_count == 0:
        G = LevelOperator(SparseMatrix.from_scipy(M_sp + se * K_sp,
                                                  symmetric=True), m, se)
        if exact:
            g_solve = _dense_lu_solver(G.to_dense())
        else:
            g_solve = _spd_pcg_solver(G, inner_tol)
        kbar = lambda x: system._kbar(x)

        def spre_inv(r):
            return g_solve(kbar(g_solve(r)))

        return spre_inv, {"G": G}

    act = np.where(mask.active)[0]
    inact = np.where(mask.inactive)[0]

    def khat_mv(x):
        return t * spmv(ops.K, t * x) + mask.that_diag * x

    # F1 = TM + sqrt(eta) Khat: active rows are sqrt(eta) e_i, inactive
    # rows couple to active columns only through M.
    MK_ii = _submatrix(M_sp + se * K_sp, inact, inact)
    M_ia = _submatrix(M_sp, inact, act)
    if exact:
        Td = sp.diags(t)
        F1 = Td @ M_sp + se * (Td @ K_sp @ Td + sp.diags(mask.that_diag))
        f1_solve = _dense_lu_solver(F1.toarray())
        F2 = (Td @ M_sp + se * K_sp).toarray() + se * np.outer(m, m)
        f2_solve = _dense_lu_solver(F2)
    else:
        ii_op = LevelOperator(SparseMatrix.from_scipy(MK_ii, symmetric=True))
        ii_solve = _spd_pcg_solver(ii_op, inner_tol)
        f1_solve = _MaskedSolver(n, act, inact, lambda ra: ra / se,
                                 lambda xa: M_ia @ xa, ii_solve)
        f2_solve = _triangular_gmres_solver(system, alpha=se, beta=1.0,
                                            inner_tol=inner_tol,
                                            label="truncated Schur factor")

    def spre_inv(r):
        return f1_solve(khat_mv(f2_solve(r)))

    return spre_inv, {"inact": inact, "act": act}


def _block11_solver(system, with_rank_one, inner_tol, exact):
    """Solver for the (1,1) block: Kbar (untruncated) or Khat, plus the
    truncated rank-one (Tm)(Tm)^T when with_rank_one."""
    ops, mask = system.ops, system.mask
    n = system.n
    K_sp, m = ops.K.to_scipy(), ops.m
    if mask.active_count == 0:
        op = LevelOperator(ops.K, m, 1.0)
        if exact:
            return _dense_lu_solver(op.to_dense())
        return _spd_pcg_solver(op, inner_tol)
    act = np.where(mask.active)[0]
    inact = np.where(mask.inactive)[0]
    if exact:
        t = mask.t_diag
        Td = sp.diags(t)
        D = (Td @ K_sp @ Td + sp.diags(mask.that_diag)).toarray()
        if with_rank_one:
            tm = t * m
            D = D + np.outer(tm, tm)
        return _dense_lu_solver(D)
    K_ii = _submatrix(K_sp, inact, inact)
    if with_rank_one:
        op = LevelOperator(SparseMatrix.from_scipy(K_ii, symmetric=True),
                           m[inact], 1.0)
    else:
        op = LevelOperator(SparseMatrix.from_scipy(K_ii, symmetric=True))
    inner = _spd_pcg_solver(op, inner_tol)
    return _MaskedSolver(n, act, inact, lambda ra: ra, None, inner)


def build_preconditioner(system, kind, inner_tol=1e-7, exact=False):
    """Assemble the bd/bdsc/btdsc preconditioner for a truncated system."""
    ops, mask = system.ops, system.mask
    n, eta = system.n, system.eta
    se = np.sqrt(eta)
    ie = 1.0 / se
    M_sp, K_sp, m = ops.M.to_scipy(), ops.K.to_scipy(), ops.m
    t = mask.t_diag
    parts = {"n": n}

    if kind == "bd":
        # (1,1): T (Kbar + eta^{-1/2} M) T + That (the inactive principal
        # submatrix of the untruncated block, extended by unit rows);
        # (2,2): eta Kbar + eta^{1/2} T M, the truncated-mass form, whose
        # measured spectra track the paper's iteration counts where the
        # symmetrized alternatives degrade at high truncation.
        if mask.active_count == 0:
            B1 = LevelOperator(SparseMatrix.from_scipy(K_sp + ie * M_sp,
                                                       symmetric=True), m, 1.0)
            s1 = _dense_lu_solver(B1.to_dense()) if exact else \
                _spd_pcg_solver(B1, inner_tol)
            B2 = LevelOperator(SparseMatrix.from_scipy(
                sp.csr_matrix(eta * K_sp + se * M_sp), symmetric=True), m, eta)
            s2 = _dense_lu_solver(B2.to_dense()) if exact else \
                _spd_pcg_solver(B2, inner_tol)
        else:
            act = np.where(mask.active)[0]
            inact = np.where(mask.inactive)[0]
            if exact:
                Td = sp.diags(t)
                D = (Td @ (K_sp + ie * M_sp) @ Td
                     + sp.diags(mask.that_diag)).toarray()
                tm = t * m
                D += np.outer(tm, tm)
                s1 = _dense_lu_solver(D)
                B2d = (eta * K_sp + se * (Td @ M_sp)).toarray() \
                    + eta * np.outer(m, m)
                s2 = _dense_lu_solver(B2d)
            else:
                B1_ii = _submatrix(K_sp + ie * M_sp, inact, inact)
                op = LevelOperator(SparseMatrix.from_scipy(B1_ii,
                                                           symmetric=True),
                                   m[inact], 1.0)
                s1 = _MaskedSolver(n, act, inact, lambda ra: ra, None,
                                   _spd_pcg_solver(op, inner_tol))
                s2 = _triangular_gmres_solver(system, alpha=eta, beta=se,
                                              inner_tol=inner_tol,
                                              label="bd (2,2) block")
        parts["block1"], parts["block2"] = s1, s2

        def apply(r):
            return np.concatenate([s1(r[:n]), s2(r[n:])])

    elif kind == "bdsc":
        s1 = _block11_solver(system, with_rank_one=True,
                             inner_tol=inner_tol, exact=exact)
        spre_inv, extra = _schur_pre_solvers(system, inner_tol, exact)
        parts["block1"], parts["spre_inv"] = s1, spre_inv
        parts.update(extra)

        def apply(r):
            return np.concatenate([s1(r[:n]), spre_inv(r[n:])])

    elif kind == "btdsc":
        s1 = _block11_solver(system, with_rank_one=True,
                             inner_tol=inner_tol, exact=exact)
        spre_inv, extra = _schur_pre_solvers(system, inner_tol, exact)
        parts["block1"], parts["spre_inv"] = s1, spre_inv
        parts.update(extra)

        def apply(r):
            x1 = s1(r[:n])
            x2 = spre_inv(spmv(ops.M, t * x1) - r[n:])
            return np.concatenate([x1, x2])

    else:
        raise ValueError(f"unknown preconditioner kind {kind!r}")

    return Preconditioner(kind, apply, inner_tol, exact, parts)


def apply_bd(p, r):
    """Apply the block diagonal preconditioner (built with kind='bd')."""
    if p.kind != "bd":
        raise ValueError("preconditioner was not built as bd")
    return p.apply(np.asarray(r, dtype=np.float64))


def apply_bdsc(p, r):
    if p.kind != "bdsc":
        raise ValueError("preconditioner was not built as bdsc")
    return p.apply(np.asarray(r, dtype=np.float64))


def apply_btdsc(p, r):
    if p.kind != "btdsc":
        raise ValueError("preconditioner was not built as btdsc")
    return p.apply(np.asarray(r, dtype=np.float64))


@dataclass
class SaddleResult:
    u_part: np.ndarray
    w_part: np.ndarray        # rescaled: y = eps * y'
    it1: int
    it2: int
    wall_time: float
    converged: bool
    residuals: tuple = ()


def solve_saddle(system, rhs, precond_kind, cfg=None, precond=None,
                 inner_tol=1e-7, reuse=None):
    """Solve (Ahat + mbar mbar^T) v = rhs by Sherman-Woodbury around
    preconditioned restarted GMRES solves of Ahat.

    Returns the u-part, the eps-rescaled w-part, the two iteration counts
    and the wall time; a non-converged GMRES flags the result instead of
    raising.  ``reuse`` is an optional mutable dict: the second
    Sherman-Woodbury solve (rhs = mbar, fixed per truncation mask) is
    stored there and reused while the same dict is passed back in.
    """
    cfg = cfg or GmresConfig()
    if precond is None:
        precond = build_preconditioner(system, precond_kind,
                                       inner_tol=inner_tol)
    t0 = time.perf_counter()
    residuals = []

    def base_solve(b):
        if reuse is not None and b is system.mbar and "z2" in reuse:
            return reuse["z2"]
        out = gmres(system.matvec_base, precond.apply, b, cfg)
        residuals.append(out.residual)
        if reuse is not None and b is system.mbar:
            reuse["z2"] = out
        return out

    res = sherman_woodbury_solve(base_solve, system.mbar, system.mbar, rhs)
    wall = time.perf_counter() - t0
    n = system.n
    return SaddleResult(res.x[:n], system.ops.eps * res.x[n:],
                        res.it1, res.it2, wall, res.converged,
                        tuple(residuals))
