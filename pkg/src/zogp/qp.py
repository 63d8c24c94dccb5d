"""Convex quadratic programs with optimal-control structure.

``solve_ocp_qp`` is a primal-dual interior-point method (Mehrotra
predictor-corrector) whose Newton systems are factorized by a backward
Riccati sweep, so each iteration costs O(N (n_x + n_u)^3).
``solve_dense_kkt`` is an active-set method on dense KKT factorizations. It
serves as a reference solver and as the backend of the covariance-augmented
SQP.

Stage problem::

    min  sum_i 1/2 [x;u]^T [[Q, S], [S^T, R]] [x;u] + q^T x + r^T u + 1/2 x_N^T Q_N x_N + q_N^T x_N
    s.t. x_0 = x0,  x_{i+1} = A_i x_i + B_i u_i + c_i,  Cx_i x_i + Cu_i u_i <= ub_i
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import linalg
from scipy.linalg import lapack

from ._kernels import chol_solve_mat, chol_solve_vec, cholesky, gemm, gemm_tn, gemv, gemv_t
from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "OcpQp",
    "QpSettings",
    "QpSolution",
    "GeneralQp",
    "DenseQpSolution",
    "solve_ocp_qp",
    "solve_dense_kkt",
    "ocp_to_general",
    "dump_qp",
    "load_qp",
    "random_ocp_qp",
]

STATUS_OPTIMAL = "optimal"
STATUS_MAX_ITER = "max_iter"
STATUS_INFEASIBLE = "infeasible"
_STATUS = {0: STATUS_OPTIMAL, 1: STATUS_MAX_ITER, 2: STATUS_INFEASIBLE, 3: "numerical_error"}


@dataclass
class OcpQp:
    """Stage-wise QP data; every stage carries ``nc`` inequality rows, ``mask`` disables padding rows."""

    q_xx: np.ndarray  # (N+1, nx, nx)
    q_uu: np.ndarray  # (N, nu, nu)
    q_xu: np.ndarray  # (N, nx, nu)
    g_x: np.ndarray  # (N+1, nx)
    g_u: np.ndarray  # (N, nu)
    dyn_a: np.ndarray  # (N, nx, nx)
    dyn_b: np.ndarray  # (N, nx, nu)
    dyn_c: np.ndarray  # (N, nx)
    c_x: np.ndarray  # (N+1, nc, nx)
    c_u: np.ndarray  # (N+1, nc, nu); stage N ignored
    ub: np.ndarray  # (N+1, nc)
    mask: np.ndarray  # (N+1, nc) bool
    x0: np.ndarray  # (nx,)

    def __post_init__(self):
        self.dyn_b = np.ascontiguousarray(self.dyn_b, dtype=np.float64)
        self.ub = np.ascontiguousarray(self.ub, dtype=np.float64)
        n, nx, nu = self.dyn_b.shape
        if n < 1:
            raise InvalidArgumentError("horizon must be at least 1")
        shapes = {
            "q_xx": (n + 1, nx, nx), "q_uu": (n, nu, nu), "q_xu": (n, nx, nu), "g_x": (n + 1, nx),
            "g_u": (n, nu), "dyn_a": (n, nx, nx), "dyn_c": (n, nx), "x0": (nx,),
        }
        for name, shp in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shp:
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shp}")
            setattr(self, name, arr)
        nc = self.ub.shape[1]
        for name, shp in {"c_x": (n + 1, nc, nx), "c_u": (n + 1, nc, nu), "ub": (n + 1, nc)}.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shp:
                raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shp}")
            setattr(self, name, arr)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.bool_).reshape(n + 1, nc)

    @property
    def horizon(self):
        return self.dyn_a.shape[0]

    @property
    def n_x(self):
        return self.dyn_a.shape[1]

    @property
    def n_u(self):
        return self.dyn_b.shape[2]

    @property
    def n_c(self):
        return self.ub.shape[1]

    @classmethod
    def unconstrained(cls, q_xx, q_uu, q_xu, g_x, g_u, dyn_a, dyn_b, dyn_c, x0):
        n, nx, nu = np.shape(dyn_b)
        return cls(q_xx, q_uu, q_xu, g_x, g_u, dyn_a, dyn_b, dyn_c,
                   np.zeros((n + 1, 0, nx)), np.zeros((n + 1, 0, nu)), np.zeros((n + 1, 0)),
                   np.zeros((n + 1, 0), dtype=bool), x0)

    def objective(self, xs, us):
        xs = np.asarray(xs)
        us = np.asarray(us)
        xh = xs[:-1]
        val = 0.5 * np.einsum("ni,nij,nj->", xh, self.q_xx[:-1], xh)
        val += np.einsum("ni,nij,nj->", xh, self.q_xu, us)
        val += 0.5 * np.einsum("ni,nij,nj->", us, self.q_uu, us)
        val += np.sum(self.g_x[:-1] * xh) + np.sum(self.g_u * us)
        x = xs[-1]
        return float(val + 0.5 * x @ self.q_xx[-1] @ x + self.g_x[-1] @ x)


@dataclass
class QpSettings:
    tol: float = 1e-8
    max_iter: int = 100
    mu0: float = 10.0


@dataclass
class QpSolution:
    x: np.ndarray  # (N+1, nx)
    u: np.ndarray  # (N, nu)
    eq_multipliers: np.ndarray  # (N+1, nx): initial-state then dynamics multipliers, as in ``ocp_to_general``
    ineq_multipliers: np.ndarray  # (N+1, nc), zero on masked rows
    slacks: np.ndarray
    status: str
    iterations: int
    kkt_residual: float
    objective: float = np.nan

    @property
    def delta_y(self):
        """Stacked (x_0, u_0, ..., x_{N-1}, u_{N-1}, x_N)."""
        parts = []
        for i in range(self.u.shape[0]):
            parts += [self.x[i], self.u[i]]
        parts.append(self.x[-1])
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Riccati interior point kernel
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def _residuals(q_xx, q_uu, q_xu, g_x, g_u, dyn_a, dyn_b, dyn_c, c_x, c_u, ub, mask,
               x, u, lam, s, z, r_x, r_u, r_d, r_i):
    n, nx, nu = dyn_b.shape
    nc = ub.shape[1]
    for i in range(n + 1):
        r_x[i, :] = g_x[i]
        gemv(q_xx[i], x[i], r_x[i], 1.0, 1.0)
        if i < n:
            gemv(q_xu[i], u[i], r_x[i], 1.0, 1.0)
            gemv_t(dyn_a[i], lam[i + 1], r_x[i], 1.0, 1.0)
            r_u[i, :] = g_u[i]
            gemv(q_uu[i], u[i], r_u[i], 1.0, 1.0)
            gemv_t(q_xu[i], x[i], r_u[i], 1.0, 1.0)
            gemv_t(dyn_b[i], lam[i + 1], r_u[i], 1.0, 1.0)
            for k in range(nx):
                v = dyn_c[i, k] - x[i + 1, k]
                for j in range(nx):
                    v += dyn_a[i, k, j] * x[i, j]
                for j in range(nu):
                    v += dyn_b[i, k, j] * u[i, j]
                r_d[i, k] = v
        for k in range(nx):
            r_x[i, k] -= lam[i, k]
        for c in range(nc):
            if not mask[i, c]:
                r_i[i, c] = 0.0
                continue
            v = s[i, c] - ub[i, c]
            for j in range(nx):
                v += c_x[i, c, j] * x[i, j]
                r_x[i, j] += c_x[i, c, j] * z[i, c]
            if i < n:
                for j in range(nu):
                    v += c_u[i, c, j] * u[i, j]
                    r_u[i, j] += c_u[i, c, j] * z[i, c]
            r_i[i, c] = v
    # x_0 is pinned; its stationarity row defines the initial-state multiplier
    for k in range(nx):
        lam[0, k] += r_x[0, k]
        r_x[0, k] = 0.0


@njit(cache=True, fastmath=True)
def _factor(hs, hn, cs, ab, w, p_mat, l_uu, k_mat, r_ux, pab, m):
    """Backward Riccati factorization of the barrier-modified Hessian.

    Works on stacked stage blocks: ``hs`` = [[Q, S], [S^T, R]], ``cs`` = [Cx, Cu],
    ``ab`` = [A, B]; each stage forms M = H + C^T W C + [A B]^T P [A B].
    """
    n, nx, nxu = ab.shape
    nu = nxu - nx
    nc = cs.shape[1]
    for a in range(nx):
        for b in range(nx):
            p_mat[n, a, b] = hn[a, b]
    for c in range(nc):
        wv = w[n, c]
        if wv != 0.0:
            for a in range(nx):
                wa = wv * cs[n, c, a]
                if wa != 0.0:
                    for b in range(nx):
                        p_mat[n, a, b] += wa * cs[n, c, b]
    for i in range(n - 1, -1, -1):
        for a in range(nxu):
            for b in range(nxu):
                m[a, b] = hs[i, a, b]
        for c in range(nc):
            wv = w[i, c]
            if wv != 0.0:
                for a in range(nxu):
                    wa = wv * cs[i, c, a]
                    if wa != 0.0:
                        for b in range(nxu):
                            m[a, b] += wa * cs[i, c, b]
        gemm(p_mat[i + 1], ab[i], pab, 1.0, 0.0)
        gemm_tn(ab[i], pab, m, 1.0, 1.0)
        dmax = 0.0
        for a in range(nu):
            dmax = max(dmax, abs(m[nx + a, nx + a]))
            for b in range(nx):
                r_ux[i, a, b] = m[nx + a, b]
        # with huge barrier weights cancellation can cost definiteness; retry with a tiny shift
        reg = 0.0
        ok = False
        for _ in range(4):
            for a in range(nu):
                for b in range(nu):
                    l_uu[i, a, b] = m[nx + a, nx + b]
                l_uu[i, a, a] += reg
            if cholesky(l_uu[i], nu):
                ok = True
                break
            reg = (1e-12 if reg == 0.0 else 1e3 * reg) * (1.0 + dmax)
        if not ok:
            return False
        # K = -Ruu^{-1} Rux
        for a in range(nu):
            for b in range(nx):
                k_mat[i, a, b] = -r_ux[i, a, b]
        chol_solve_mat(l_uu[i], k_mat[i], nu, nx)
        # P = Rxx + Rux^T K
        for a in range(nx):
            for b in range(nx):
                p_mat[i, a, b] = m[a, b]
        gemm_tn(r_ux[i], k_mat[i], p_mat[i], 1.0, 1.0)
        for a in range(nx):
            for b in range(a + 1, nx):
                v = 0.5 * (p_mat[i, a, b] + p_mat[i, b, a])
                p_mat[i, a, b] = v
                p_mat[i, b, a] = v
    return True


@njit(cache=True, fastmath=True)
def _solve(dyn_a, dyn_b, p_mat, l_uu, k_mat, r_ux, grad_x, grad_u, r_d, dx, du, dlam, p_vec, k_vec, t, ru):
    """Solve the Newton system given the factorization.

    Equivalent LQ subproblem: gradients ``grad_x``/``grad_u``, dynamics
    dx_{i+1} = A dx_i + B du_i + r_d_i, dx_0 = 0.
    """
    n, nx, nu = dyn_b.shape
    p_vec[n] = grad_x[n]
    for i in range(n - 1, -1, -1):
        t[:] = p_vec[i + 1]
        gemv(p_mat[i + 1], r_d[i], t, 1.0, 1.0)
        ru[:] = grad_u[i]
        gemv_t(dyn_b[i], t, ru, 1.0, 1.0)
        chol_solve_vec(l_uu[i], ru, nu)
        for a in range(nu):
            k_vec[i, a] = -ru[a]
        p_vec[i] = grad_x[i]
        gemv_t(dyn_a[i], t, p_vec[i], 1.0, 1.0)
        gemv_t(r_ux[i], k_vec[i], p_vec[i], 1.0, 1.0)
    dx[0, :] = 0.0
    for i in range(n):
        du[i] = k_vec[i]
        gemv(k_mat[i], dx[i], du[i], 1.0, 1.0)
        dx[i + 1] = r_d[i]
        gemv(dyn_a[i], dx[i], dx[i + 1], 1.0, 1.0)
        gemv(dyn_b[i], du[i], dx[i + 1], 1.0, 1.0)
    for i in range(n + 1):
        dlam[i] = p_vec[i]
        gemv(p_mat[i], dx[i], dlam[i], 1.0, 1.0)


@njit(cache=True, fastmath=True)
def _newton_direction(dyn_a, dyn_b, c_x, c_u, mask, fac, r_x, r_u, r_d, r_i, r_c, s, z,
                      dx, du, dlam, ds, dz, buf):
    n, nx, nu = dyn_b.shape
    nc = mask.shape[1]
    p_mat, l_uu, k_mat, r_ux = fac
    g_x, g_u, p_vec, k_vec, t, ru = buf
    # reduced gradient r + C^T (z r_i - r_c) / s
    for i in range(n + 1):
        for j in range(nx):
            g_x[i, j] = r_x[i, j]
        if i < n:
            for j in range(nu):
                g_u[i, j] = r_u[i, j]
        for c in range(nc):
            if not mask[i, c]:
                continue
            v = (z[i, c] * r_i[i, c] - r_c[i, c]) / s[i, c]
            for j in range(nx):
                g_x[i, j] += c_x[i, c, j] * v
            if i < n:
                for j in range(nu):
                    g_u[i, j] += c_u[i, c, j] * v
    _solve(dyn_a, dyn_b, p_mat, l_uu, k_mat, r_ux, g_x, g_u, r_d, dx, du, dlam, p_vec, k_vec, t, ru)
    for i in range(n + 1):
        for c in range(nc):
            if not mask[i, c]:
                ds[i, c] = 0.0
                dz[i, c] = 0.0
                continue
            cw = 0.0
            for j in range(nx):
                cw += c_x[i, c, j] * dx[i, j]
            if i < n:
                for j in range(nu):
                    cw += c_u[i, c, j] * du[i, j]
            ds[i, c] = -r_i[i, c] - cw
            dz[i, c] = (-r_c[i, c] - z[i, c] * ds[i, c]) / s[i, c]


@njit(cache=True)
def _max_step(v, dv, mask):
    alpha = 1.0
    n, nc = v.shape
    for i in range(n):
        for c in range(nc):
            if mask[i, c] and dv[i, c] < 0.0:
                a = -v[i, c] / dv[i, c]
                if a < alpha:
                    alpha = a
    return alpha


@njit(cache=True, fastmath=True)
def _ipm(q_xx, q_uu, q_xu, g_x, g_u, dyn_a, dyn_b, dyn_c, c_x, c_u, ub, mask, x0, tol, max_iter, mu0):
    n, nx, nu = dyn_b.shape
    nxu = nx + nu
    nc = ub.shape[1]
    m_active = 0
    for i in range(n + 1):
        for c in range(nc):
            if mask[i, c]:
                m_active += 1
    # stacked stage blocks for the factorization
    hs = np.zeros((n, nxu, nxu))
    ab = np.zeros((n, nx, nxu))
    cs = np.zeros((n + 1, nc, nxu))
    for i in range(n):
        for a in range(nx):
            for b in range(nx):
                hs[i, a, b] = q_xx[i, a, b]
                ab[i, a, b] = dyn_a[i, a, b]
            for b in range(nu):
                hs[i, a, nx + b] = q_xu[i, a, b]
                hs[i, nx + b, a] = q_xu[i, a, b]
                ab[i, a, nx + b] = dyn_b[i, a, b]
        for a in range(nu):
            for b in range(nu):
                hs[i, nx + a, nx + b] = q_uu[i, a, b]
    for i in range(n + 1):
        for c in range(nc):
            if not mask[i, c]:
                continue
            for b in range(nx):
                cs[i, c, b] = c_x[i, c, b]
            if i < n:
                for b in range(nu):
                    cs[i, c, nx + b] = c_u[i, c, b]
    x = np.zeros((n + 1, nx))
    u = np.zeros((n, nu))
    lam = np.zeros((n + 1, nx))
    s = np.ones((n + 1, nc))
    z = np.zeros((n + 1, nc))
    # roll-in of the dynamics with zero inputs
    x[0] = x0
    for i in range(n):
        x[i + 1] = dyn_c[i]
        gemv(dyn_a[i], x[i], x[i + 1], 1.0, 1.0)
    s0 = np.sqrt(mu0)
    for i in range(n + 1):
        for c in range(nc):
            if not mask[i, c]:
                continue
            v = ub[i, c]
            for j in range(nx):
                v -= c_x[i, c, j] * x[i, j]
            s[i, c] = max(v, s0)
            z[i, c] = mu0 / s[i, c]
    r_x = np.zeros((n + 1, nx))
    r_u = np.zeros((n, nu))
    r_d = np.zeros((n, nx))
    r_i = np.zeros((n + 1, nc))
    r_c = np.zeros((n + 1, nc))
    w = np.zeros((n + 1, nc))
    fac = (np.zeros((n + 1, nx, nx)), np.zeros((n, nu, nu)), np.zeros((n, nu, nx)), np.zeros((n, nu, nx)))
    pab = np.zeros((nx, nxu))
    m_blk = np.zeros((nxu, nxu))
    buf = (np.zeros((n + 1, nx)), np.zeros((n, nu)), np.zeros((n + 1, nx)), np.zeros((n, nu)),
           np.zeros(nx), np.zeros(nu))
    dx = np.zeros((n + 1, nx))
    du = np.zeros((n, nu))
    dlam = np.zeros((n + 1, nx))
    ds = np.zeros((n + 1, nc))
    dz = np.zeros((n + 1, nc))
    status = 1
    it = 0
    res = np.inf
    best = (x.copy(), u.copy(), lam.copy(), s.copy(), z.copy())
    best_res = np.inf
    stall = 0
    for it in range(max_iter + 1):
        _residuals(q_xx, q_uu, q_xu, g_x, g_u, dyn_a, dyn_b, dyn_c, c_x, c_u, ub, mask,
                   x, u, lam, s, z, r_x, r_u, r_d, r_i)
        mu = 0.0
        zmax = 0.0
        for i in range(n + 1):
            for c in range(nc):
                if mask[i, c]:
                    mu += s[i, c] * z[i, c]
                    zmax = max(zmax, z[i, c])
        mu = mu / m_active if m_active > 0 else 0.0
        res = mu
        for i in range(n + 1):
            for j in range(nx):
                res = max(res, abs(r_x[i, j]))
            for c in range(nc):
                res = max(res, abs(r_i[i, c]))
            if i < n:
                for j in range(nu):
                    res = max(res, abs(r_u[i, j]))
                for j in range(nx):
                    res = max(res, abs(r_d[i, j]))
        if res <= tol:
            status = 0
            break
        if zmax > 1e14:
            status = 2
            break
        if res < best_res:
            best_res = res
            best = (x.copy(), u.copy(), lam.copy(), s.copy(), z.copy())
            stall = 0
        else:
            stall += 1
        # round-off floor above tol: stop instead of driving s, z to zero
        if it == max_iter or (stall >= 3 and mu < tol):
            break
        for i in range(n + 1):
            for c in range(nc):
                w[i, c] = z[i, c] / s[i, c] if mask[i, c] else 0.0
        if not _factor(hs, q_xx[n], cs, ab, w, fac[0], fac[1], fac[2], fac[3], pab, m_blk):
            if best_res == np.inf:
                status = 3
                break
            # late breakdown from extreme barrier weights; fall back to the best iterate
            status = 1
            break
        # predictor (affine scaling)
        for i in range(n + 1):
            for c in range(nc):
                r_c[i, c] = s[i, c] * z[i, c] if mask[i, c] else 0.0
        _newton_direction(dyn_a, dyn_b, c_x, c_u, mask, fac, r_x, r_u, r_d, r_i, r_c, s, z,
                          dx, du, dlam, ds, dz, buf)
        if m_active > 0:
            a_aff = min(_max_step(s, ds, mask), _max_step(z, dz, mask))
            mu_aff = 0.0
            for i in range(n + 1):
                for c in range(nc):
                    if mask[i, c]:
                        mu_aff += (s[i, c] + a_aff * ds[i, c]) * (z[i, c] + a_aff * dz[i, c])
            mu_aff /= m_active
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector reusing the factorization
            for i in range(n + 1):
                for c in range(nc):
                    if mask[i, c]:
                        r_c[i, c] = s[i, c] * z[i, c] + ds[i, c] * dz[i, c] - sigma * mu
            _newton_direction(dyn_a, dyn_b, c_x, c_u, mask, fac, r_x, r_u, r_d, r_i, r_c, s, z,
                              dx, du, dlam, ds, dz, buf)
            alpha = min(1.0, 0.995 * min(_max_step(s, ds, mask), _max_step(z, dz, mask)))
        else:
            alpha = 1.0
        x += alpha * dx
        u += alpha * du
        lam += alpha * dlam
        for i in range(n + 1):
            for c in range(nc):
                if mask[i, c]:
                    s[i, c] += alpha * ds[i, c]
                    z[i, c] += alpha * dz[i, c]
    if status == 1 and best_res < res:
        x, u, lam, s, z = best
        res = best_res
    return x, u, lam, s, z, status, it, res


def solve_ocp_qp(qp, settings=None):
    """Riccati-based interior point solve of an :class:`OcpQp`."""
    settings = settings or QpSettings()
    x, u, lam, s, z, status, it, res = _ipm(
        qp.q_xx, qp.q_uu, qp.q_xu, qp.g_x, qp.g_u, qp.dyn_a, qp.dyn_b, qp.dyn_c,
        qp.c_x, qp.c_u, qp.ub, qp.mask, qp.x0, float(settings.tol), int(settings.max_iter), float(settings.mu0),
    )
    lam[0] = -lam[0]  # same sign convention as the flattened equality rows
    st = _STATUS[int(status)]
    if st == "numerical_error":
        raise NumericalError("Riccati factorization failed: reduced input Hessian not positive definite")
    return QpSolution(x, u, lam, np.where(qp.mask, z, 0.0), s, st, int(it), float(res), qp.objective(x, u))


# ---------------------------------------------------------------------------
# dense active-set reference solver
# ---------------------------------------------------------------------------


@dataclass
class GeneralQp:
    """min 1/2 x^T H x + q^T x  s.t.  A_eq x = b_eq,  G x <= h."""

    h_mat: np.ndarray
    q: np.ndarray
    a_eq: np.ndarray = None
    b_eq: np.ndarray = None
    g_in: np.ndarray = None
    h_in: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.h_mat = np.asarray(self.h_mat, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.a_eq is None:
            self.a_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        if self.g_in is None:
            self.g_in, self.h_in = np.zeros((0, n)), np.zeros(0)
        self.a_eq = np.asarray(self.a_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.g_in = np.asarray(self.g_in, dtype=float).reshape(-1, n)
        self.h_in = np.asarray(self.h_in, dtype=float).ravel()

    @property
    def n_var(self):
        return self.q.size

    def objective(self, x):
        return 0.5 * x @ self.h_mat @ x + self.q @ x


@dataclass
class DenseQpSolution:
    x: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    status: str
    active_set: list
    iterations: int
    objective: float
    kkt_residual: float = 0.0
    factorizations: int = 0
    extra: dict = field(default_factory=dict)


def _kkt_solve(h_mat, q, a, b):
    """Solve the equality-constrained QP via its symmetric KKT system.

    Returns ``(x, mult, consistent)``; multipliers follow ``H x + q + A^T mult = 0``.
    """
    n, m = q.size, a.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h_mat
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([-q, b])
    # Bunch-Kaufman without the condition estimate of linalg.solve
    lwork = int(lapack.dsysv_lwork(n + m, lower=1)[0])
    _, _, sol, info = lapack.dsysv(kkt, rhs, lwork=lwork, lower=1, overwrite_a=1)
    if info != 0:
        sol = None
    if sol is None or not np.all(np.isfinite(sol)):
        kkt[:n, :n] = h_mat
        kkt[:n, n:] = a.T
        kkt[n:, :n] = a
        kkt[n:, n:] = 0.0
        sol = linalg.lstsq(kkt, rhs, check_finite=False)[0]
    x = sol[:n]
    scale = 1.0 + np.max(np.abs(b), initial=0.0)
    consistent = m == 0 or np.max(np.abs(a @ x - b)) <= 1e-7 * scale
    return x, sol[n:], consistent


def solve_dense_kkt(qp, active_set=None, tol=1e-9):
    """Dual active-set method over dense KKT factorizations.

    Starts from the minimizer on a dual-feasible working set (the equality
    rows plus the usable part of ``active_set``) and repeatedly adds the
    most violated inequality, dropping working rows whose multipliers would
    turn negative on the way. The dual objective increases monotonically,
    so the method terminates; every pivot refactorizes the KKT matrix.
    """
    n_in = qp.g_in.shape[0]
    n_eq = qp.a_eq.shape[0]
    g, hv = qp.g_in, qp.h_in
    max_pivots = max(10 * n_in, 10)
    scale_h = 1.0 + np.max(np.abs(hv), initial=0.0)
    scale_g = 1.0 + np.max(np.abs(qp.q), initial=0.0)
    state = {"fact": 0, "piv": 0}

    def kkt(work, rhs_x, rhs_b):
        a = np.vstack([qp.a_eq, g[work]]) if work else qp.a_eq
        state["fact"] += 1
        return _kkt_solve(qp.h_mat, rhs_x, a, rhs_b)

    def pivot():
        state["piv"] += 1
        if state["piv"] > max_pivots:
            raise NumericalError("active-set cycling guard triggered")

    def infeasible(x, mult):
        return DenseQpSolution(x, mult[:n_eq], np.zeros(n_in), STATUS_INFEASIBLE, [], state["piv"], np.nan,
                               factorizations=state["fact"])

    work = [int(i) for i in dict.fromkeys(active_set or []) if 0 <= int(i) < n_in]
    # dual-feasible start: minimizer on the working set with non-negative multipliers
    while True:
        b = np.concatenate([qp.b_eq, hv[work]]) if work else qp.b_eq
        x, mult, consistent = kkt(work, qp.q, b)
        if not consistent:
            if not work:
                return infeasible(x, mult)
            work.pop()
            continue
        lam_w = mult[n_eq:]
        if not work or np.min(lam_w) >= 0.0:
            break
        work = [j for j, l in zip(work, lam_w) if l >= 0.0]
    nu = mult[:n_eq].copy()
    lam = dict(zip(work, np.maximum(lam_w, 0.0)))

    while True:
        viol = g @ x - hv if n_in else np.zeros(0)
        if work:
            viol[work] = -np.inf
        p = int(np.argmax(viol)) if n_in else -1
        if not n_in or viol[p] <= tol * scale_h:
            break
        lam_p = 0.0
        while True:
            # raising lam_p by t moves (x, nu, lam_W) by t (z, r_eq, r_W) and keeps the working rows active
            z, r, _ = kkt(work, g[p], np.zeros(n_eq + len(work)))
            r_w = r[n_eq:]
            gz = float(g[p] @ z)
            t_full = -(g[p] @ x - hv[p]) / gz if gz < -1e-14 * (1.0 + np.max(np.abs(g[p]))) else np.inf
            neg = [(-lam[j] / rj, k) for k, (j, rj) in enumerate(zip(work, r_w)) if rj < 0.0]
            t_dual, k_drop = min(neg) if neg else (np.inf, -1)
            if not np.isfinite(t_full) and not np.isfinite(t_dual):
                return infeasible(x, np.concatenate([nu, np.zeros(len(work))]))
            t = min(t_full, t_dual)
            if np.isfinite(t_full):
                x = x + t * z
            nu = nu + t * r[:n_eq]
            for j, rj in zip(work, r_w):
                lam[j] = lam[j] + t * rj
            lam_p += t
            pivot()
            if t_full <= t_dual:
                work.append(p)
                lam[p] = lam_p
                break
            j = work.pop(k_drop)
            del lam[j]
    lam_vec = np.zeros(n_in)
    for j in work:
        lam_vec[j] = max(lam[j], 0.0)
    if state["piv"]:
        # polish on the final working set to remove the accumulated update error
        b = np.concatenate([qp.b_eq, hv[work]]) if work else qp.b_eq
        x_ref, mult, consistent = kkt(work, qp.q, b)
        if consistent and (not work or np.min(mult[n_eq:]) >= -tol * scale_g):
            x = x_ref
            nu = mult[:n_eq]
            lam_vec[:] = 0.0
            lam_vec[work] = np.maximum(mult[n_eq:], 0.0)
    stat = qp.h_mat @ x + qp.q + qp.a_eq.T @ nu + g.T @ lam_vec
    res = float(np.max(np.abs(stat), initial=0.0))
    return DenseQpSolution(x, nu, lam_vec, STATUS_OPTIMAL, sorted(work), state["piv"],
                           float(qp.objective(x)), res, state["fact"])


def ocp_to_general(qp):
    """Flatten an :class:`OcpQp` into a :class:`GeneralQp` over (x_0, u_0, ..., x_N)."""
    n, nx, nu = qp.horizon, qp.n_x, qp.n_u
    nv = n * (nx + nu) + nx

    def xo(i):
        return i * (nx + nu)

    def uo(i):
        return i * (nx + nu) + nx

    h = np.zeros((nv, nv))
    q = np.zeros(nv)
    for i in range(n + 1):
        h[xo(i):xo(i) + nx, xo(i):xo(i) + nx] = qp.q_xx[i]
        q[xo(i):xo(i) + nx] = qp.g_x[i]
        if i < n:
            h[uo(i):uo(i) + nu, uo(i):uo(i) + nu] = qp.q_uu[i]
            h[xo(i):xo(i) + nx, uo(i):uo(i) + nu] = qp.q_xu[i]
            h[uo(i):uo(i) + nu, xo(i):xo(i) + nx] = qp.q_xu[i].T
            q[uo(i):uo(i) + nu] = qp.g_u[i]
    a = np.zeros(((n + 1) * nx, nv))
    b = np.zeros((n + 1) * nx)
    a[:nx, :nx] = np.eye(nx)
    b[:nx] = qp.x0
    for i in range(n):
        r = (i + 1) * nx
        a[r:r + nx, xo(i):xo(i) + nx] = qp.dyn_a[i]
        a[r:r + nx, uo(i):uo(i) + nu] = qp.dyn_b[i]
        a[r:r + nx, xo(i + 1):xo(i + 1) + nx] = -np.eye(nx)
        b[r:r + nx] = -qp.dyn_c[i]
    rows, rhs = [], []
    for i in range(n + 1):
        for c in range(qp.n_c):
            if not qp.mask[i, c]:
                continue
            row = np.zeros(nv)
            row[xo(i):xo(i) + nx] = qp.c_x[i, c]
            if i < n:
                row[uo(i):uo(i) + nu] = qp.c_u[i, c]
            rows.append(row)
            rhs.append(qp.ub[i, c])
    g = np.array(rows).reshape(-1, nv)
    return GeneralQp(h, q, a, b, g, np.array(rhs))


def random_ocp_qp(rng, horizon=5, n_x=4, n_u=2, n_c=3, x_scale=1.0):
    """Random strictly convex, feasible :class:`OcpQp` for cross-checks.

    Inequalities are placed around a random feasible trajectory with random
    positive slack, so a subset of them is typically active at the optimum.
    """
    n, nx, nu = horizon, n_x, n_u

    def spd(k, size):
        m = rng.standard_normal((k, size, size))
        return m @ np.transpose(m, (0, 2, 1)) / size + 0.1 * np.eye(size)

    hs = spd(n, nx + nu)
    q_xx = np.concatenate([hs[:, :nx, :nx], spd(1, nx)])
    q_uu = hs[:, nx:, nx:].copy()
    q_xu = hs[:, :nx, nx:].copy()
    dyn_a = np.eye(nx) + 0.3 * rng.standard_normal((n, nx, nx)) / np.sqrt(nx)
    dyn_b = rng.standard_normal((n, nx, nu))
    dyn_c = 0.1 * rng.standard_normal((n, nx))
    x0 = x_scale * rng.standard_normal(nx)
    xs = np.empty((n + 1, nx))
    us = rng.standard_normal((n, nu))
    xs[0] = x0
    for i in range(n):
        xs[i + 1] = dyn_a[i] @ xs[i] + dyn_b[i] @ us[i] + dyn_c[i]
    c_x = rng.standard_normal((n + 1, n_c, nx))
    c_u = rng.standard_normal((n + 1, n_c, nu))
    c_u[-1] = 0.0
    val = np.einsum("ncj,nj->nc", c_x, xs)
    val[:-1] += np.einsum("ncj,nj->nc", c_u[:-1], us)
    ub = val + rng.uniform(0.0, 1.0, (n + 1, n_c))
    mask = np.ones((n + 1, n_c), dtype=bool)
    return OcpQp(q_xx, q_uu, q_xu, rng.standard_normal((n + 1, nx)), rng.standard_normal((n, nu)),
                 dyn_a, dyn_b, dyn_c, c_x, c_u, ub, mask, x0)


# ---------------------------------------------------------------------------
# binary dump / load
# ---------------------------------------------------------------------------

_MAGIC = b"ZOQP"
_VERSION = 1
_FIELDS = ("q_xx", "q_uu", "q_xu", "g_x", "g_u", "dyn_a", "dyn_b", "dyn_c", "c_x", "c_u", "ub", "mask", "x0")


def dump_qp(qp, path):
    """Write ``qp`` as: magic, version, (N, nx, nu, nc) as int64 LE, then every field
    as row-major little-endian float64 in a fixed order."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", _VERSION))
        fh.write(struct.pack("<4q", qp.horizon, qp.n_x, qp.n_u, qp.n_c))
        for name in _FIELDS:
            fh.write(np.ascontiguousarray(getattr(qp, name), dtype="<f8").tobytes())


def load_qp(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise InvalidArgumentError("not a QP dump (bad magic)")
    (version,) = struct.unpack_from("<q", data, 4)
    if version != _VERSION:
        raise InvalidArgumentError(f"unsupported QP dump version {version}")
    n, nx, nu, nc = struct.unpack_from("<4q", data, 12)
    shapes = {
        "q_xx": (n + 1, nx, nx), "q_uu": (n, nu, nu), "q_xu": (n, nx, nu), "g_x": (n + 1, nx),
        "g_u": (n, nu), "dyn_a": (n, nx, nx), "dyn_b": (n, nx, nu), "dyn_c": (n, nx),
        "c_x": (n + 1, nc, nx), "c_u": (n + 1, nc, nu), "ub": (n + 1, nc), "mask": (n + 1, nc), "x0": (nx,),
    }
    off = 44
    arrays = {}
    for name in _FIELDS:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shapes[name])
        off += 8 * count
        arrays[name] = arr.astype(bool) if name == "mask" else arr.astype(np.float64)
    if off != len(data):
        raise InvalidArgumentError("QP dump has trailing or missing bytes")
    return OcpQp(**arrays)
