"""Numba kernels for the sequential sweeps and rotations.

Sparse matrices enter as raw CSR arrays (indptr, indices, data).  Several
operators have the form A = G + sigma * c c^T with G sparse; the sweeps
carry the running dot product c^T x so the rank-one term never
materializes.  ``diag`` is always the diagonal of the full operator,
rank-one included.  Pass ``sigma = 0.0`` and an empty ``c`` for purely
sparse operators.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def csr_matvec(indptr, indices, data, x, out):
    n = indptr.shape[0] - 1
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s
    return out


@njit(cache=True)
def pgs_defect_sweep(indptr, indices, data, diag, c, sigma, r, lo, up):
    """One forward projected Gauss-Seidel sweep from a zero start.

    Solves (D + L + boundary projection) y = r, i.e. for each i in order
        y_i = clamp((r_i - sum_{j<i} A_ij y_j) / A_ii, lo_i, up_i)
    with y_i = 0 where the diagonal vanishes.
    """
    n = r.shape[0]
    y = np.zeros(n)
    s = 0.0
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j < i:
                acc += data[k] * y[j]
        if sigma != 0.0:
            acc += sigma * c[i] * s
        d = diag[i]
        if d != 0.0:
            v = (r[i] - acc) / d
            if v > up[i]:
                v = up[i]
            elif v < lo[i]:
                v = lo[i]
        else:
            v = 0.0
        y[i] = v
        if sigma != 0.0:
            s += c[i] * v
    return y


@njit(cache=True)
def pgs_iterate(indptr, indices, data, diag, c, sigma, b, lo, up, x, sweeps):
    """In-place projected Gauss-Seidel iterations for the box QP
    min 1/2 x^T A x - b^T x subject to lo <= x <= up."""
    n = b.shape[0]
    t = 0.0
    if sigma != 0.0:
        for i in range(n):
            t += c[i] * x[i]
    for _ in range(sweeps):
        for i in range(n):
            acc = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j != i:
                    acc += data[k] * x[j]
            if sigma != 0.0:
                acc += sigma * c[i] * (t - c[i] * x[i])
            d = diag[i]
            if d != 0.0:
                v = (b[i] - acc) / d
                if v > up[i]:
                    v = up[i]
                elif v < lo[i]:
                    v = lo[i]
            else:
                v = 0.0
            if sigma != 0.0:
                t += c[i] * (v - x[i])
            x[i] = v
    return x


@njit(cache=True)
def gs_sweep(indptr, indices, data, diag, c, sigma, b, x, reverse):
    """One unconstrained Gauss-Seidel sweep in place (forward or backward)."""
    n = b.shape[0]
    t = 0.0
    if sigma != 0.0:
        for i in range(n):
            t += c[i] * x[i]
    if reverse:
        start, stop, step = n - 1, -1, -1
    else:
        start, stop, step = 0, n, 1
    for i in range(start, stop, step):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j != i:
                acc += data[k] * x[j]
        if sigma != 0.0:
            acc += sigma * c[i] * (t - c[i] * x[i])
        d = diag[i]
        if d != 0.0:
            v = (b[i] - acc) / d
        else:
            v = 0.0
        if sigma != 0.0:
            t += c[i] * (v - x[i])
        x[i] = v
    return x


@njit(cache=True)
def restrict_obstacles(agg, lo, up, nc):
    """Monotone restriction of defect obstacles: coarse lower bound is the
    max of the fine bounds over each aggregate, coarse upper the min."""
    n = agg.shape[0]
    clo = np.full(nc, -np.inf)
    cup = np.full(nc, np.inf)
    for i in range(n):
        a = agg[i]
        if lo[i] > clo[a]:
            clo[a] = lo[i]
        if up[i] < cup[a]:
            cup[a] = up[i]
    return clo, cup


@njit(cache=True)
def greedy_aggregate(indptr, indices, data, strong_tol, diag, max_size):
    """Greedy strength-based aggregation.

    A connection i-j is strong when |a_ij| >= strong_tol * sqrt(a_ii a_jj).
    Pass 1 forms aggregates from each unaggregated node and its strongest
    unaggregated strong neighbours (up to max_size nodes).  Pass 2 attaches
    leftovers to the neighbouring aggregate with the strongest connection,
    falling back to singletons.
    Returns (agg, n_aggregates).
    """
    n = indptr.shape[0] - 1
    agg = np.full(n, -1, np.int64)
    sizes = np.zeros(n, np.int64)
    count = 0
    for i in range(n):
        if agg[i] >= 0:
            continue
        # strongest unaggregated strong neighbours of i
        best = np.full(max_size - 1, -1, np.int64)
        bestval = np.zeros(max_size - 1)
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j == i or agg[j] >= 0:
                continue
            v = abs(data[k])
            if v < strong_tol * np.sqrt(abs(diag[i] * diag[j])):
                continue
            # insertion into the small top list
            m = -1
            for q in range(max_size - 1):
                if best[q] < 0 or v > bestval[q]:
                    m = q
                    break
            if m >= 0:
                for q in range(max_size - 2, m, -1):
                    best[q] = best[q - 1]
                    bestval[q] = bestval[q - 1]
                best[m] = j
                bestval[m] = v
        got = False
        for q in range(max_size - 1):
            if best[q] >= 0:
                got = True
        if got:
            agg[i] = count
            sizes[count] += 1
            for q in range(max_size - 1):
                if best[q] >= 0:
                    agg[best[q]] = count
                    sizes[count] += 1
            count += 1
    # pass 2: leftovers join the strongest neighbouring aggregate with room
    for i in range(n):
        if agg[i] >= 0:
            continue
        bj = -1
        bv = -1.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j == i or agg[j] < 0:
                continue
            if sizes[agg[j]] >= max_size:
                continue
            v = abs(data[k])
            if v > bv:
                bv = v
                bj = j
        if bj >= 0:
            agg[i] = agg[bj]
            sizes[agg[bj]] += 1
        else:
            agg[i] = count
            sizes[count] += 1
            count += 1
    return agg, count


@njit(cache=True)
def jacobi_sweeps(A, V, with_vectors, rel_tol, max_sweeps, off_history):
    """Cyclic Jacobi rotations on symmetric A, in place.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    rel_tol times the initial Frobenius norm of A.  off_history[s]
    records the off-diagonal norm before sweep s.  Returns the number
    of sweeps performed.
    """
    n = A.shape[0]
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += A[i, j] * A[i, j]
    fro = np.sqrt(fro)
    if fro == 0.0:
        off_history[0] = 0.0
        return 0
    sweeps = 0
    for s in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * A[i, j] * A[i, j]
        off = np.sqrt(off)
        off_history[s] = off
        if off <= rel_tol * fro or s == max_sweeps:
            return sweeps
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                cth = 1.0 / np.sqrt(1.0 + t * t)
                sth = t * cth
                app = A[p, p]
                aqq = A[q, q]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        akp = A[k, p]
                        akq = A[k, q]
                        A[k, p] = cth * akp - sth * akq
                        A[p, k] = A[k, p]
                        A[k, q] = sth * akp + cth * akq
                        A[q, k] = A[k, q]
                if with_vectors:
                    for k in range(n):
                        vkp = V[k, p]
                        vkq = V[k, q]
                        V[k, p] = cth * vkp - sth * vkq
                        V[k, q] = sth * vkp + cth * vkq
        sweeps += 1
    return sweeps
