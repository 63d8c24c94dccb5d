"""Allocation-free dense linear algebra for small matrices inside numba kernels.

Library BLAS/LAPACK calls carry a fixed per-call cost that dominates at the
stage sizes of interest (10-70 rows); these loops keep the cost proportional
to the flop count.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def lu_factor(a, piv, n):
    """In-place LU with partial pivoting of ``a[:n, :n]``. Returns False if singular."""
    for k in range(n):
        p = k
        big = abs(a[k, k])
        for i in range(k + 1, n):
            v = abs(a[i, k])
            if v > big:
                big = v
                p = i
        piv[k] = p
        if big == 0.0:
            return False
        if p != k:
            for j in range(n):
                t = a[k, j]
                a[k, j] = a[p, j]
                a[p, j] = t
        inv = 1.0 / a[k, k]
        for i in range(k + 1, n):
            a[i, k] *= inv
        for i in range(k + 1, n):
            lik = a[i, k]
            if lik != 0.0:
                for j in range(k + 1, n):
                    a[i, j] -= lik * a[k, j]
    return True


@njit(cache=True, fastmath=True)
def lu_solve(lu, piv, b, n, m):
    """Solve in place for the first ``m`` columns of ``b[:n, :m]``."""
    for k in range(n):
        p = piv[k]
        if p != k:
            for j in range(m):
                t = b[k, j]
                b[k, j] = b[p, j]
                b[p, j] = t
    for i in range(n):
        for k in range(i):
            lik = lu[i, k]
            if lik != 0.0:
                for j in range(m):
                    b[i, j] -= lik * b[k, j]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            uik = lu[i, k]
            if uik != 0.0:
                for j in range(m):
                    b[i, j] -= uik * b[k, j]
        inv = 1.0 / lu[i, i]
        for j in range(m):
            b[i, j] *= inv


@njit(cache=True, fastmath=True)
def cholesky(a, n):
    """In-place lower Cholesky factor of ``a[:n, :n]``; upper part is zeroed."""
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        a[j, j] = d
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= a[i, k] * a[j, k]
            a[i, j] = t / d
        for i in range(j):
            a[i, j] = 0.0
    return True


@njit(cache=True, fastmath=True)
def chol_solve_mat(l, b, n, m):
    """Solve ``L L^T X = B`` in place for ``b[:n, :m]``."""
    for i in range(n):
        for k in range(i):
            lik = l[i, k]
            for j in range(m):
                b[i, j] -= lik * b[k, j]
        inv = 1.0 / l[i, i]
        for j in range(m):
            b[i, j] *= inv
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            lki = l[k, i]
            for j in range(m):
                b[i, j] -= lki * b[k, j]
        inv = 1.0 / l[i, i]
        for j in range(m):
            b[i, j] *= inv


@njit(cache=True, fastmath=True)
def chol_solve_vec(l, b, n):
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= l[i, k] * b[k]
        b[i] = s / l[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= l[k, i] * b[k]
        b[i] = s / l[i, i]


@njit(cache=True, fastmath=True)
def gemm(a, b, c, alpha, beta):
    """c = beta * c + alpha * a @ b."""
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            c[i, j] *= beta
        for p in range(k):
            aip = alpha * a[i, p]
            if aip != 0.0:
                for j in range(m):
                    c[i, j] += aip * b[p, j]


@njit(cache=True, fastmath=True)
def gemm_tn(a, b, c, alpha, beta):
    """c = beta * c + alpha * a.T @ b."""
    k, n = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            c[i, j] *= beta
    for p in range(k):
        for i in range(n):
            api = alpha * a[p, i]
            if api != 0.0:
                for j in range(m):
                    c[i, j] += api * b[p, j]


@njit(cache=True, fastmath=True)
def gemv(a, x, y, alpha, beta):
    """y = beta * y + alpha * a @ x."""
    n, k = a.shape
    for i in range(n):
        s = 0.0
        for p in range(k):
            s += a[i, p] * x[p]
        y[i] = beta * y[i] + alpha * s


@njit(cache=True, fastmath=True)
def gemv_t(a, x, y, alpha, beta):
    """y = beta * y + alpha * a.T @ x."""
    k, n = a.shape
    for i in range(n):
        y[i] *= beta
    for p in range(k):
        xp = alpha * x[p]
        if xp != 0.0:
            for i in range(n):
                y[i] += a[p, i] * xp
