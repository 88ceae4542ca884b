"""Restarted GMRES with right preconditioning, and the rank-one
Sherman-Woodbury solve built on top of it.

The iteration count reported by :func:`gmres` is the total number of
applications of the system operator, which is the cost that the outer
solvers budget for.  Right preconditioning keeps the Arnoldi residual
estimate equal to the true unpreconditioned residual; the true residual
is still re-evaluated at every restart so drifting inexact
preconditioners cannot fake convergence.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import GmresNanError, SingularUpdateError
from .sparse import apply_operator

HAPPY_BREAKDOWN = 1e-14


@dataclass
class GmresConfig:
    restart: int = 60
    max_iters: int = 300
    rel_tol: float = 1e-7
    side: str = "right"

    def __post_init__(self):
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.side != "right":
            raise ValueError("only right preconditioning is supported")


@dataclass
class GmresResult:
    x: np.ndarray
    iters: int
    converged: bool
    residual: float
    res_history: list = field(default_factory=list)
    breakdown: bool = False


def gmres(op, precond, b, cfg, x0=None):
    """Right-preconditioned restarted GMRES for op(x) = b.

    op and precond may be SparseMatrix, ndarray, callables or objects
    with a matvec method; precond=None means identity.  Returns a
    GmresResult whose res_history records the Arnoldi residual estimate
    at every step (non-increasing within a restart cycle).
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if not np.all(np.isfinite(b)):
        raise GmresNanError("right-hand side contains non-finite entries")

    def A(v):
        return apply_operator(op, v)

    if precond is None:
        M = lambda v: v
    else:
        M = lambda v: apply_operator(precond, v)

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n), 0, True, 0.0)

    iters = 0
    history = []
    if x0 is None:
        x = np.zeros(n)
        r = b.copy()
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
        r = b - A(x)
        iters += 1
    beta = np.linalg.norm(r)
    best_x, best_res = x.copy(), beta / bnorm
    if beta / bnorm <= cfg.rel_tol:
        return GmresResult(x, iters, True, beta / bnorm, history)

    m = cfg.restart
    V = np.empty((n, m + 1))
    H = np.zeros((m + 1, m))
    while iters < cfg.max_iters:
        V[:, 0] = r / beta
        g = np.zeros(m + 1)
        g[0] = beta
        cs = np.zeros(m)
        sn = np.zeros(m)
        j = 0
        breakdown = False
        while j < m and iters < cfg.max_iters:
            z = M(V[:, j])
            w = A(z)
            iters += 1
            if not np.all(np.isfinite(w)):
                raise GmresNanError("NaN/Inf produced by operator application")
            for i in range(j + 1):
                H[i, j] = V[:, i] @ w
                w -= H[i, j] * V[:, i]
            hnext = np.linalg.norm(w)
            H[j + 1, j] = hnext
            if hnext > HAPPY_BREAKDOWN:
                V[:, j + 1] = w / hnext
            # Givens rotations keep an upper triangular least squares system
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                breakdown = True
                break
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            history.append(abs(g[j + 1]) / bnorm)
            j += 1
            if hnext <= HAPPY_BREAKDOWN:
                breakdown = True
                break
            if abs(g[j]) / bnorm <= cfg.rel_tol:
                break
        if j > 0:
            y = np.linalg.solve(H[:j, :j], g[:j])
            x = x + M(V[:, :j] @ y)
        r = b - A(x)
        iters += 1
        res = np.linalg.norm(r) / bnorm
        if res < best_res:
            best_res = res
            best_x = x.copy()
        if res <= cfg.rel_tol:
            return GmresResult(x, iters, True, res, history)
        if breakdown:
            # Krylov space is exhausted; the best iterate is all there is.
            return GmresResult(best_x, iters, False, best_res, history,
                               breakdown=True)
        beta = np.linalg.norm(r)
    return GmresResult(best_x, iters, False, best_res, history)


@dataclass
class ShermanResult:
    x: np.ndarray
    it1: int
    it2: int
    converged: bool = True


def _run_base(solve_base, rhs):
    out = solve_base(rhs)
    if isinstance(out, GmresResult):
        return out.x, out.iters, out.converged
    if isinstance(out, tuple):
        x, its = out[0], out[1]
        return np.asarray(x, dtype=np.float64), int(its), True
    return np.asarray(out, dtype=np.float64), 0, True


def sherman_woodbury_solve(solve_base, u_vec, v_vec, b):
    """Solve (base + u v^T) x = b given a solver for the base operator.

    Two base solves: z1 = base^{-1} b and z2 = base^{-1} u, combined as
    x = z1 - z2 (v^T z1) / (1 + v^T z2).  The iteration counts of the two
    solves are reported separately as it1 and it2.  A zero update vector
    short-circuits to the single solve.
    """
    u_vec = np.asarray(u_vec, dtype=np.float64)
    v_vec = np.asarray(v_vec, dtype=np.float64)
    z1, it1, ok1 = _run_base(solve_base, b)
    if not np.any(u_vec):
        return ShermanResult(z1, it1, 0, ok1)
    z2, it2, ok2 = _run_base(solve_base, u_vec)
    denom = 1.0 + v_vec @ z2
    if abs(denom) < 1e-12:
        raise SingularUpdateError(
            f"rank-one update is singular (1 + v^T z2 = {denom:.3e})")
    x = z1 - z2 * ((v_vec @ z1) / denom)
    return ShermanResult(x, it1, it2, ok1 and ok2)
