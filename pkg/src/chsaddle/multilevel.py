"""Aggregation-based algebraic multigrid and the monotone multigrid
obstacle solver.

Hierarchies use piecewise-constant prolongations (entries in {0,1}, one
nonzero per fine row) built by greedy strength-based aggregation, with
Galerkin coarse operators.  Operators of the form A = G + sigma c c^T
coarsen exactly: the Galerkin product maps the rank-one part to
sigma (P^T c)(P^T c)^T, so the hierarchy carries (G_l, c_l, sigma).

Two cycles share the hierarchy:

* ``amg_vcycle`` - one unconstrained V(1,1) cycle with Gauss-Seidel
  smoothing and an exact dense solve on the coarsest level, iterated by
  ``amg_solve`` until the relative residual drops below tolerance.
* ``mmg_vcycle`` - the monotone cycle for the box-constrained quadratic
  program: one projected Gauss-Seidel solve of (D + L + dI) v = r per
  level on the way down, monotone restriction of the defect obstacles
  (coarse lower = max over each aggregate, coarse upper = min), a
  projected Gauss-Seidel coarsest solve, and prolongated correction
  accumulation on the way up.  Every iterate stays feasible and the
  quadratic energy never increases.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import (AmgDivergenceError, DimensionMismatchError,
                     InfeasibleIterateError, ObstacleSolveError)
from .linalg import SparseMatrix, spmv

_EMPTY = np.empty(0)


class LevelOperator:
    """Sparse matrix plus optional symmetric rank-one term sigma c c^T."""

    def __init__(self, A, c=None, sigma=0.0):
        if not isinstance(A, SparseMatrix):
            A = SparseMatrix.from_scipy(A)
        self.A = A
        if c is None or sigma == 0.0:
            self.c = None
            self.sigma = 0.0
        else:
            self.c = np.asarray(c, dtype=np.float64)
            self.sigma = float(sigma)
            if self.c.shape != (A.n_rows,):
                raise DimensionMismatchError("rank-one vector length mismatch")
        d = A.diagonal()
        if self.c is not None:
            d = d + self.sigma * self.c * self.c
        self.diag = d

    @property
    def n(self):
        return self.A.n_rows

    @property
    def shape(self):
        return self.A.shape

    def matvec(self, x):
        y = spmv(self.A, x)
        if self.c is not None:
            y += self.sigma * self.c * (self.c @ x)
        return y

    def to_dense(self):
        D = np.asarray(self.A.to_scipy().todense())
        if self.c is not None:
            D = D + self.sigma * np.outer(self.c, self.c)
        return D

    def _arrays(self):
        A = self.A
        c = self.c if self.c is not None else _EMPTY
        return A.indptr, A.indices, A.data, self.diag, c, self.sigma


def as_level_operator(A):
    if isinstance(A, LevelOperator):
        return A
    if isinstance(A, SparseMatrix):
        return LevelOperator(A)
    return LevelOperator(SparseMatrix.from_scipy(A))


@dataclass
class Level:
    op: LevelOperator
    agg: np.ndarray | None   # fine index -> coarse aggregate; None on coarsest

    @property
    def n(self):
        return self.op.n


class Hierarchy:
    """Nested levels, finest first; coarsest at most ``coarsest_size``
    unknowns unless coarsening stalled earlier."""

    def __init__(self, levels):
        self.levels = levels
        self._coarse_factor = None

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def finest(self):
        return self.levels[0].op

    def prolongation_matrix(self, lvl):
        """Piecewise-constant P for level lvl -> lvl+1 (coarser)."""
        agg = self.levels[lvl].agg
        n = self.levels[lvl].n
        nc = self.levels[lvl + 1].n
        P = sp.csr_matrix((np.ones(n), (np.arange(n), agg)), shape=(n, nc))
        return SparseMatrix.from_scipy(P)

    def restrict(self, lvl, r):
        return np.bincount(self.levels[lvl].agg, weights=r,
                           minlength=self.levels[lvl + 1].n)

    def prolong(self, lvl, v_coarse):
        return v_coarse[self.levels[lvl].agg]

    def _coarse_solve(self, b):
        if self._coarse_factor is None:
            import scipy.linalg
            D = self.levels[-1].op.to_dense()
            self._coarse_factor = scipy.linalg.cho_factor(D)
        import scipy.linalg
        return scipy.linalg.cho_solve(self._coarse_factor, b)


def build_aggregation_hierarchy(A, rank_one=None, theta=0.25,
                                coarsest_size=64, max_levels=30,
                                max_aggregate=2):
    """Greedy strength-based aggregation hierarchy for an SPD operator.

    Strong connection: |a_ij| >= theta sqrt(a_ii a_jj) on the sparse part.
    Coarsening stops at coarsest_size unknowns or when the aggregate pass
    stalls (< 10% reduction).  rank_one is an optional (c, sigma) pair.
    """
    if isinstance(A, LevelOperator):
        op = A
    else:
        if rank_one is not None:
            op = LevelOperator(A, rank_one[0], rank_one[1])
        else:
            op = as_level_operator(A)
    S = op.A.to_scipy()
    D = S - S.T
    if D.nnz and np.max(np.abs(D.data)) > 0.0:
        raise ValueError("aggregation requires a symmetric matrix")
    if np.any(op.A.diagonal() <= 0.0):
        raise ValueError("aggregation requires a positive diagonal")

    levels = []
    while len(levels) < max_levels - 1 and op.n > coarsest_size:
        A_sp = op.A
        agg, nc = _kernels.greedy_aggregate(
            A_sp.indptr, A_sp.indices, A_sp.data, theta,
            A_sp.diagonal(), max_aggregate)
        if nc >= 0.9 * op.n:
            break
        levels.append(Level(op, agg))
        P = sp.csr_matrix((np.ones(op.n), (np.arange(op.n), agg)),
                          shape=(op.n, nc))
        Ac = sp.csr_matrix(P.T @ A_sp.to_scipy() @ P)
        Ac.sum_duplicates()
        Ac.sort_indices()
        Ac_sm = SparseMatrix.from_scipy(Ac, symmetric=A_sp.symmetric)
        if op.c is not None:
            cc = np.bincount(agg, weights=op.c, minlength=nc)
            op = LevelOperator(Ac_sm, cc, op.sigma)
        else:
            op = LevelOperator(Ac_sm)
    levels.append(Level(op, None))
    return Hierarchy(levels)


def _gs(op, b, x, reverse):
    ip, ix, dt, dg, c, sg = op._arrays()
    _kernels.gs_sweep(ip, ix, dt, dg, c, sg, b, x, reverse)


def amg_vcycle(h, b, x0, lvl=0, line_search=True):
    """One V(1,1) cycle: forward GS pre-smooth, Galerkin coarse correction,
    backward GS post-smooth; exact dense solve on the coarsest level.

    Piecewise-constant prolongations underestimate smooth corrections, so
    the coarse correction is scaled by the energy-optimal step
    (r^T d) / (d^T A d) along the prolongated direction d; this keeps the
    cycle contraction well below 0.5 on the package's M-matrix blocks.
    """
    level = h.levels[lvl]
    if lvl == h.n_levels - 1:
        return h._coarse_solve(b)
    x = np.asarray(x0, dtype=np.float64).copy()
    _gs(level.op, b, x, False)
    r = b - level.op.matvec(x)
    rc = h.restrict(lvl, r)
    ec = amg_vcycle(h, rc, np.zeros(h.levels[lvl + 1].n), lvl + 1, line_search)
    d = h.prolong(lvl, ec)
    if line_search:
        dAd = d @ level.op.matvec(d)
        x += ((r @ d) / dAd) * d if dAd > 0.0 else d
    else:
        x += d
    _gs(level.op, b, x, True)
    return x


def amg_solve(h, b, tol=1e-7, max_cycles=300, x0=None):
    """Stationary V-cycle iteration to a relative residual below tol.

    Raises AmgDivergenceError when the residual grows over five
    consecutive cycles.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(h.finest.n)
    x = np.zeros(h.finest.n) if x0 is None else np.asarray(x0, np.float64).copy()
    res = np.linalg.norm(b - h.finest.matvec(x)) / bnorm
    growth = 0
    for _ in range(max_cycles):
        if res <= tol:
            return x
        x = amg_vcycle(h, b, x)
        new = np.linalg.norm(b - h.finest.matvec(x)) / bnorm
        growth = growth + 1 if new > res else 0
        if growth >= 5:
            raise AmgDivergenceError(
                f"V-cycle residual grew 5 cycles in a row ({new:.3e})")
        res = new
    if res <= tol:
        return x
    raise AmgDivergenceError(
        f"AMG did not reach tol {tol:.1e} in {max_cycles} cycles "
        f"(residual {res:.3e})")


def pcg_solve(op, h, b, tol=1e-7, max_iters=500, x0=None):
    """Flexible conjugate gradients preconditioned by one V-cycle.

    The Polak-Ribiere beta tolerates the mildly nonlinear line-search
    cycle.  op is the target SPD operator (a LevelOperator), h its
    hierarchy.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(op.n)
    x = np.zeros(op.n) if x0 is None else np.asarray(x0, np.float64).copy()
    r = b - op.matvec(x) if x0 is not None else b.copy()
    z = amg_vcycle(h, r, np.zeros(op.n))
    p = z.copy()
    rz = r @ z
    for _ in range(max_iters):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        Ap = op.matvec(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            raise AmgDivergenceError("PCG lost positive definiteness")
        alpha = rz / pAp
        x += alpha * p
        z_old = z
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        z = amg_vcycle(h, r, np.zeros(op.n))
        beta = max((r @ (z - z_old)) / rz, 0.0)   # Polak-Ribiere (flexible)
        p = z + beta * p
        rz = r @ z
    raise AmgDivergenceError(
        f"PCG did not reach tol {tol:.1e} in {max_iters} iterations")


@dataclass
class ObstacleBounds:
    """Box bounds for the obstacle problem; +-inf entries disable a side.

    After :func:`mmg_vcycle` runs, defect_lower/defect_upper hold the
    per-level defect obstacles of the last cycle (finest first).
    """

    lower: np.ndarray
    upper: np.ndarray
    defect_lower: list = field(default_factory=list, repr=False)
    defect_upper: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise DimensionMismatchError("bound vectors differ in length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def box(cls, n, lo=-1.0, up=1.0):
        return cls(np.full(n, lo), np.full(n, up))

    @classmethod
    def unbounded(cls, n):
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    def clip(self, x):
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def contains(self, x, slack=0.0):
        return bool(np.all(x >= self.lower - slack)
                    and np.all(x <= self.upper - (-slack)))


def pgs_sweep(A, b, bounds, x):
    """One forward projected Gauss-Seidel sweep on the defect system.

    With r = b - A x and shifted bounds, each component solves
    y_i = clamp((r_i - sum_{j<i} A_ij y_j) / A_ii, lower_i - x_i,
    upper_i - x_i) (zero where the diagonal vanishes); returns x + y,
    clipped exactly to the bounds.
    """
    op = as_level_operator(A)
    x = np.asarray(x, dtype=np.float64)
    r = np.asarray(b, dtype=np.float64) - op.matvec(x)
    ip, ix, dt, dg, c, sg = op._arrays()
    y = _kernels.pgs_defect_sweep(ip, ix, dt, dg, c, sg, r,
                                  bounds.lower - x, bounds.upper - x)
    return bounds.clip(x + y)


def mmg_vcycle(h, b, bounds, u_prev, coarse_sweeps=30):
    """One monotone multigrid cycle for
    min 1/2 u^T A u - b^T u  subject to bounds, starting from u_prev."""
    u = np.asarray(u_prev, dtype=np.float64)
    if np.any(u < bounds.lower) or np.any(u > bounds.upper):
        raise InfeasibleIterateError("mmg_vcycle needs a feasible start")
    L = h.n_levels
    r = np.asarray(b, dtype=np.float64) - h.finest.matvec(u)
    lo = bounds.lower - u
    up = bounds.upper - u
    bounds.defect_lower = [lo]
    bounds.defect_upper = [up]
    vs = []
    for lvl in range(L - 1):
        op = h.levels[lvl].op
        ip, ix, dt, dg, c, sg = op._arrays()
        v = _kernels.pgs_defect_sweep(ip, ix, dt, dg, c, sg, r, lo, up)
        vs.append(v)
        r = r - op.matvec(v)
        lo2 = lo - v
        up2 = up - v
        r = h.restrict(lvl, r)
        lo, up = _kernels.restrict_obstacles(h.levels[lvl].agg, lo2, up2,
                                             h.levels[lvl + 1].n)
        bounds.defect_lower.append(lo)
        bounds.defect_upper.append(up)
    # coarsest level: projected Gauss-Seidel as the (D + L + dI) "Solve"
    op = h.levels[L - 1].op
    ip, ix, dt, dg, c, sg = op._arrays()
    v = np.zeros(op.n)
    _kernels.pgs_iterate(ip, ix, dt, dg, c, sg, r, lo, up, v,
                         coarse_sweeps if L > 1 else max(coarse_sweeps, 60))
    for lvl in range(L - 2, -1, -1):
        v = vs[lvl] + h.prolong(lvl, v)
    return bounds.clip(u + v)


def projected_residual(op, b, bounds, x):
    """Natural residual map x - clip(x - (A x - b)) of the box QP."""
    g = op.matvec(x) - b
    return x - bounds.clip(x - g)


@dataclass
class ObstacleConfig:
    tol: float = 1e-10
    max_cycles: int = 100
    coarse_sweeps: int = 30


def solve_obstacle(A, b, bounds, cfg=None, x0=None, hierarchy=None,
                   return_info=False):
    """Minimize 1/2 u^T A u - b^T u over the box by monotone multigrid
    cycles until the projected residual norm drops below cfg.tol.

    A must be SPD on the feasible set; raises ObstacleSolveError with the
    residual history on non-convergence.
    """
    cfg = cfg or ObstacleConfig()
    op = as_level_operator(A)
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side must be finite")
    h = hierarchy if hierarchy is not None else build_aggregation_hierarchy(op)
    u = bounds.clip(np.zeros(op.n)) if x0 is None else bounds.clip(
        np.asarray(x0, dtype=np.float64))
    history = []
    for cycle in range(cfg.max_cycles + 1):
        res = np.linalg.norm(projected_residual(op, b, bounds, u))
        history.append(res)
        if res <= cfg.tol:
            return (u, history) if return_info else u
        if cycle == cfg.max_cycles:
            break
        u = mmg_vcycle(h, b, bounds, u, coarse_sweeps=cfg.coarse_sweeps)
    raise ObstacleSolveError(
        f"projected residual {history[-1]:.3e} above tol {cfg.tol:.1e} "
        f"after {cfg.max_cycles} cycles", residual_history=history)


def quadratic_energy(A, b, x):
    """J(x) = 1/2 x^T A x - b^T x for the monotonicity checks."""
    op = as_level_operator(A)
    return 0.5 * (x @ op.matvec(x)) - np.asarray(b) @ x
