"""Hanging-chain dynamics and a Gauss-Legendre implicit Runge-Kutta integrator.

The continuous vector fields are numba kernels with the common signature
``rhs(x, u, params) -> (f, jac_x, jac_u, ok)``. The integrator is generic in
the vector field, so the same code integrates the chain, linear test systems
and the pendulum used for the covariance-heuristic demonstration.

State packing for the chain with ``M = n_mass - 2`` intermediate masses::

    x = [p_ctrl (3), p_1 (3), v_1 (3), ..., p_M (3), v_M (3)]

Mass 0 is anchored, masses 1..M are free and mass ``n_mass - 1`` is the
controlled end whose velocity is the input ``u``.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._kernels import gemm, lu_factor, lu_solve
from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "ChainConfig",
    "ChainOde",
    "LinearOde",
    "PendulumOde",
    "DiscreteModel",
    "latent_force",
    "chain_ode",
    "chain_ode_jacobian",
    "resting_state",
    "irk_step",
    "irk_sensitivities",
    "second_order_directional",
    "second_order_tensor",
    "gauss_legendre_tableau",
]


@dataclass(frozen=True)
class ChainConfig:
    n_mass: int = 5
    mass: float = 0.033
    stiffness: float = 30.3
    rest_length: float = 0.033
    alpha_lat: float = -0.1
    beta1: float = 2.0
    beta2: float = 3.0
    gravity: tuple = (0.0, 0.0, -9.81)
    ts: float = 0.2
    y_wall: float = -0.05
    anchor: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if int(self.n_mass) != self.n_mass or self.n_mass < 3:
            raise InvalidArgumentError(f"n_mass must be an integer >= 3, got {self.n_mass}")
        for name in ("mass", "stiffness", "rest_length", "ts"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.gravity) != 3 or len(self.anchor) != 3:
            raise InvalidArgumentError("gravity and anchor must be 3-vectors")

    @property
    def n_free(self):
        return self.n_mass - 2

    @property
    def n_x(self):
        return 6 * (self.n_mass - 2) + 3

    @property
    def n_u(self):
        return 3

    @property
    def n_w(self):
        return 3 * (self.n_mass - 2)

    def params(self, alpha_lat=None):
        """Flat parameter vector consumed by the numba kernel."""
        a = self.alpha_lat if alpha_lat is None else alpha_lat
        return np.array(
            [self.n_mass, self.mass, self.stiffness, self.rest_length, a,
             self.beta1, self.beta2, *self.gravity, *self.anchor],
            dtype=np.float64,
        )

    # index helpers --------------------------------------------------------
    def pos_index(self, j):
        """Slice of free mass ``j`` (0-based) position inside x."""
        return slice(3 + 6 * j, 6 + 6 * j)

    def vel_index(self, j):
        return slice(6 + 6 * j, 9 + 6 * j)

    def velocity_rows(self):
        return np.concatenate([np.arange(6 + 6 * j, 9 + 6 * j) for j in range(self.n_free)])

    def position_rows(self, axis):
        """Row of coordinate ``axis`` for the controlled mass and every free mass."""
        return np.array([axis] + [3 + 6 * j + axis for j in range(self.n_free)])

    def noise_matrix(self):
        """B: injects one disturbance per free-mass velocity component."""
        b = np.zeros((self.n_x, self.n_w))
        b[self.velocity_rows(), np.arange(self.n_w)] = 1.0
        return b


# ---------------------------------------------------------------------------
# vector fields (in-place kernels, dispatched on an integer kind so that
# numba can cache every compiled function)
# ---------------------------------------------------------------------------

ODE_CHAIN = 0
ODE_LINEAR = 1
ODE_PENDULUM = 2


@njit(cache=True)
def _spring_into(pa, pb, k, length, force, jac):
    d0 = pb[0] - pa[0]
    d1 = pb[1] - pa[1]
    d2 = pb[2] - pa[2]
    dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if dist < 1e-12:
        return False
    scale = 1.0 - length / dist
    c = length / (dist * dist * dist)
    d = (d0, d1, d2)
    for a in range(3):
        force[a] = k * scale * d[a]
        for b in range(3):
            jac[a, b] = k * c * d[a] * d[b]
        jac[a, a] += k * scale
    return True


@njit(cache=True)
def _chain_into(x, u, params, f, jx, ju):
    n_mass = int(params[0])
    m = params[1]
    k = params[2]
    length = params[3]
    alpha = params[4]
    beta1 = params[5]
    beta2 = params[6]
    nf = n_mass - 2
    n = 6 * nf + 3
    f[:] = 0.0
    jx[:, :] = 0.0
    ju[:, :] = 0.0
    force_n = np.empty(3)
    force_p = np.empty(3)
    d_n = np.empty((3, 3))
    d_p = np.empty((3, 3))
    p_prev = np.empty(3)
    for a in range(3):
        f[a] = u[a]
        ju[a, a] = 1.0
    ok = True
    for j in range(nf):
        ip = 3 + 6 * j
        iv = ip + 3
        for a in range(3):
            f[ip + a] = x[iv + a]
            jx[ip + a, iv + a] = 1.0
        if j == 0:
            off_prev = -1
            for a in range(3):
                p_prev[a] = params[10 + a]
        else:
            off_prev = 3 + 6 * (j - 1)
            for a in range(3):
                p_prev[a] = x[off_prev + a]
        off_next = 0 if j == nf - 1 else 3 + 6 * (j + 1)
        ok1 = _spring_into(x[ip:ip + 3], x[off_next:off_next + 3], k, length, force_n, d_n)
        ok2 = _spring_into(p_prev, x[ip:ip + 3], k, length, force_p, d_p)
        if not (ok1 and ok2):
            ok = False
        for a in range(3):
            f[iv + a] = (force_n[a] - force_p[a]) / m + params[7 + a]
            for b in range(3):
                jx[iv + a, off_next + b] += d_n[a, b] / m
                jx[iv + a, ip + b] -= (d_n[a, b] + d_p[a, b]) / m
                if off_prev >= 0:
                    jx[iv + a, off_prev + b] += d_p[a, b] / m
        th = 2.0 * np.pi * x[ip] / length
        s1 = np.sin(beta1 * th)
        s2 = np.sin(beta2 * th)
        r = x[iv] - s1 - s2 * s2
        dth = 2.0 * np.pi / length
        dr_dx = -beta1 * dth * np.cos(beta1 * th) - 2.0 * s2 * np.cos(beta2 * th) * beta2 * dth
        f[iv + 1] += alpha * r * r
        jx[iv + 1, ip] += 2.0 * alpha * r * dr_dx
        jx[iv + 1, iv] += 2.0 * alpha * r
    return ok


@njit(cache=True)
def _linear_into(x, u, params, f, jx, ju):
    n = int(params[0])
    nu = int(params[1])
    for i in range(n):
        acc = 0.0
        for j in range(n):
            jx[i, j] = params[2 + i * n + j]
            acc += jx[i, j] * x[j]
        for j in range(nu):
            ju[i, j] = params[2 + n * n + i * nu + j]
            acc += ju[i, j] * u[j]
        f[i] = acc
    return True


@njit(cache=True)
def _pendulum_into(x, u, params, f, jx, ju):
    g_over_l = params[0]
    damping = params[1]
    f[0] = x[1]
    f[1] = -g_over_l * np.sin(x[0]) - damping * x[1] + u[0]
    jx[0, 0] = 0.0
    jx[0, 1] = 1.0
    jx[1, 0] = -g_over_l * np.cos(x[0])
    jx[1, 1] = -damping
    ju[0, 0] = 0.0
    ju[1, 0] = 1.0
    return True


@njit(cache=True)
def _rhs_into(kind, x, u, params, f, jx, ju):
    if kind == ODE_CHAIN:
        return _chain_into(x, u, params, f, jx, ju)
    elif kind == ODE_LINEAR:
        return _linear_into(x, u, params, f, jx, ju)
    return _pendulum_into(x, u, params, f, jx, ju)


@njit(cache=True)
def rhs_eval(kind, x, u, params):
    """Allocate-and-return wrapper around the in-place vector fields."""
    n = x.shape[0]
    nu = u.shape[0]
    f = np.zeros(n)
    jx = np.zeros((n, n))
    ju = np.zeros((n, nu))
    ok = _rhs_into(kind, x, u, params, f, jx, ju)
    return f, jx, ju, ok


class ChainOde:
    """Chain vector field bound to a configuration."""

    def __init__(self, cfg, alpha_lat=None):
        self.cfg = cfg
        self.kind = ODE_CHAIN
        self.params = cfg.params(alpha_lat)
        self.n_x = cfg.n_x
        self.n_u = 3


class LinearOde:
    """x_dot = A x + B u."""

    def __init__(self, a, b=None):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        n = a.shape[0]
        b = np.zeros((n, 1)) if b is None else np.asarray(b, dtype=float).reshape(n, -1)
        self.a, self.b = a, b
        self.kind = ODE_LINEAR
        self.params = np.concatenate([[n, b.shape[1]], a.ravel(), b.ravel()])
        self.n_x = n
        self.n_u = b.shape[1]


class PendulumOde:
    """Damped pendulum with torque input; a small strongly nonlinear test system."""

    def __init__(self, g_over_l=9.81, damping=0.5):
        self.kind = ODE_PENDULUM
        self.params = np.array([g_over_l, damping])
        self.n_x = 2
        self.n_u = 1


def latent_force(x_pos, v_x, cfg):
    """Unmodeled y-acceleration acting on a free mass."""
    th = 2.0 * np.pi * np.asarray(x_pos) / cfg.rest_length
    r = v_x - np.sin(cfg.beta1 * th) - np.sin(cfg.beta2 * th) ** 2
    return cfg.alpha_lat * r ** 2


def _check_dims(cfg, x, u):
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if x.shape != (cfg.n_x,) or u.shape != (3,):
        raise InvalidArgumentError(
            f"expected x of shape ({cfg.n_x},) and u of shape (3,), got {x.shape} and {u.shape}"
        )
    return x, u


def chain_ode(x, u, cfg):
    """Continuous-time chain dynamics ``x_dot = f(x, u)``."""
    return chain_ode_jacobian(x, u, cfg)[0]


def chain_ode_jacobian(x, u, cfg):
    """Return ``(x_dot, df/dx, df/du)``."""
    x, u = _check_dims(cfg, x, u)
    f, jx, ju, ok = rhs_eval(ODE_CHAIN, x, u, cfg.params())
    if not ok:
        raise NumericalError("coincident adjacent masses in chain state")
    return f, jx, ju


def resting_state(cfg, max_iter=200, tol=1e-10):
    """Equilibrium of the chain (latent force off) with the controlled end fixed.

    Damped Newton on the free-mass positions; the initial guess places the
    masses evenly on the segment between anchor and controlled end.
    """
    nf = cfg.n_free
    anchor = np.asarray(cfg.anchor, dtype=float)
    end = np.array([6.0 * cfg.rest_length * (cfg.n_mass - 1), 0.0, 0.0])
    params = cfg.params(alpha_lat=0.0)
    x = np.zeros(cfg.n_x)
    x[0:3] = end
    for j in range(nf):
        x[cfg.pos_index(j)] = anchor + (j + 1) / (cfg.n_mass - 1) * (end - anchor)
    pos = np.concatenate([np.arange(3 + 6 * j, 6 + 6 * j) for j in range(nf)])
    acc = pos + 3
    u0 = np.zeros(3)

    def residual(xx):
        f, jx, _, ok = rhs_eval(ODE_CHAIN, xx, u0, params)
        if not ok:
            return None, None
        return f[acc], jx[np.ix_(acc, pos)]

    r, jac = residual(x)
    for _ in range(max_iter):
        nrm = np.max(np.abs(r))
        if nrm <= tol:
            return x
        step = np.linalg.solve(jac, -r)
        t = 1.0
        while t > 1e-8:
            trial = x.copy()
            trial[pos] += t * step
            r_new, jac_new = residual(trial)
            if r_new is not None and np.max(np.abs(r_new)) < (1.0 - 1e-4 * t) * nrm:
                break
            t *= 0.5
        else:
            break
        x, r, jac = trial, r_new, jac_new
    if np.max(np.abs(r)) <= tol:
        return x
    raise NumericalError("resting_state: Newton did not converge", residual=float(np.max(np.abs(r))))


# ---------------------------------------------------------------------------
# implicit Runge-Kutta integrator
# ---------------------------------------------------------------------------


def gauss_legendre_tableau(stages):
    """Butcher tableau ``(A, b, c)`` of the s-stage Gauss-Legendre collocation method."""
    nodes, weights = np.polynomial.legendre.leggauss(stages)
    c = 0.5 * (nodes + 1.0)
    b = 0.5 * weights
    a = np.zeros((stages, stages))
    for j in range(stages):
        others = np.delete(c, j)
        basis = np.poly1d(np.poly(others) / np.prod(c[j] - others))
        integral = np.polyint(basis)
        a[:, j] = integral(c) - integral(0.0)
    return a, b, c


@njit(cache=True, fastmath=True)
def _irk_one(kind, x, u, params, h, a, b, tol, max_newton, want_sens, work):
    """One Gauss-Legendre step with exact Newton on the stacked stage slopes.

    Returns ``(status, residual)``; status 0 ok, 1 Newton failure, 2 bad
    vector-field evaluation. Results are left in ``work``.
    """
    (kk, g, mat, piv, xi, fi, jxs, jus, x_next, sx, su, sens) = work
    n = x.shape[0]
    nu = u.shape[0]
    s = b.shape[0]
    ns = s * n
    if not _rhs_into(kind, x, u, params, fi, jxs[0], jus[0]):
        return 2, np.inf
    for i in range(s):
        kk[i * n:(i + 1) * n] = fi
    res = np.inf
    status = 1
    for it in range(max_newton + 1):
        for i in range(s):
            for r in range(n):
                acc = x[r]
                for l in range(s):
                    acc += h * a[i, l] * kk[l * n + r]
                xi[r] = acc
            if not _rhs_into(kind, xi, u, params, fi, jxs[i], jus[i]):
                return 2, np.inf
            for r in range(n):
                g[i * n + r, 0] = kk[i * n + r] - fi[r]
        res = 0.0
        for r in range(ns):
            v = abs(g[r, 0])
            if v > res:
                res = v
        # stage Jacobian I - h (A kron I) blockdiag(J_i)
        for i in range(s):
            for l in range(s):
                c = h * a[i, l]
                for r in range(n):
                    for q in range(n):
                        mat[i * n + r, l * n + q] = -c * jxs[i, r, q]
        for r in range(ns):
            mat[r, r] += 1.0
        if res <= tol:
            status = 0
            break
        if it == max_newton or not lu_factor(mat, piv, ns):
            break
        lu_solve(mat, piv, g, ns, 1)
        for r in range(ns):
            kk[r] -= g[r, 0]
    for r in range(n):
        acc = x[r]
        for i in range(s):
            acc += h * b[i] * kk[i * n + r]
        x_next[r] = acc
    if want_sens and status == 0:
        if not lu_factor(mat, piv, ns):
            return 1, res
        for i in range(s):
            for r in range(n):
                for q in range(n):
                    sens[i * n + r, q] = jxs[i, r, q]
                for q in range(nu):
                    sens[i * n + r, n + q] = jus[i, r, q]
        lu_solve(mat, piv, sens, ns, n + nu)
        for r in range(n):
            for q in range(n):
                acc = 1.0 if r == q else 0.0
                for i in range(s):
                    acc += h * b[i] * sens[i * n + r, q]
                sx[r, q] = acc
            for q in range(nu):
                acc = 0.0
                for i in range(s):
                    acc += h * b[i] * sens[i * n + r, n + q]
                su[r, q] = acc
    return status, res


@njit(cache=True, fastmath=True)
def _irk_batch(kind, xs, us, params, h, n_steps, a, b, tol, max_newton, want_sens):
    nb, n = xs.shape
    nu = us.shape[1]
    s = b.shape[0]
    ns = s * n
    work = (
        np.zeros(ns), np.zeros((ns, 1)), np.zeros((ns, ns)), np.zeros(ns, dtype=np.int64),
        np.zeros(n), np.zeros(n), np.zeros((s, n, n)), np.zeros((s, n, nu)),
        np.zeros(n), np.zeros((n, n)), np.zeros((n, nu)), np.zeros((ns, n + nu)),
    )
    x_next, sx, su = work[8], work[9], work[10]
    out = np.empty((nb, n))
    ax = np.zeros((nb, n, n))
    bu = np.zeros((nb, n, nu))
    status = np.zeros(nb, dtype=np.int64)
    resid = np.zeros(nb)
    sub = h / n_steps
    tmp_x = np.zeros((n, n))
    tmp_u = np.zeros((n, nu))
    for k in range(nb):
        x = xs[k].copy()
        u = us[k]
        if want_sens:
            for r in range(n):
                for q in range(n):
                    ax[k, r, q] = 1.0 if r == q else 0.0
        for step in range(n_steps):
            st, res = _irk_one(kind, x, u, params, sub, a, b, tol, max_newton, want_sens, work)
            if res > resid[k]:
                resid[k] = res
            if st != 0:
                status[k] = st
                break
            if want_sens:
                if step == 0:
                    ax[k] = sx
                    bu[k] = su
                else:
                    tmp_x[:, :] = 0.0
                    tmp_u[:, :] = su
                    gemm(sx, ax[k], tmp_x, 1.0, 0.0)
                    gemm(sx, bu[k], tmp_u, 1.0, 1.0)
                    ax[k] = tmp_x
                    bu[k] = tmp_u
            x[:] = x_next
        out[k] = x
    return out, ax, bu, status, resid


@dataclass
class DiscreteModel:
    """psi(x, u): one sampling interval of an s-stage Gauss-Legendre IRK.

    ``num_steps`` sub-divides the interval into equal integrator steps.
    """

    ode: object
    ts: float
    stages: int = 2
    newton_tol: float = 1e-10
    max_newton: int = 50
    num_steps: int = 1
    _tableau: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not self.ts > 0:
            raise InvalidArgumentError("ts must be positive")
        if not self.newton_tol > 0:
            raise InvalidArgumentError("newton_tol must be positive")
        self._tableau = gauss_legendre_tableau(self.stages)

    @property
    def n_x(self):
        return self.ode.n_x

    @property
    def n_u(self):
        return self.ode.n_u

    def with_params(self, params):
        """Shallow copy sharing the integrator settings but with other ODE parameters."""
        import copy

        ode = copy.copy(self.ode)
        ode.params = np.asarray(params, dtype=np.float64)
        return DiscreteModel(ode, self.ts, self.stages, self.newton_tol, self.max_newton, self.num_steps)

    def batch(self, xs, us, sensitivities=True):
        """Integrate a batch of (x, u) pairs; returns ``(x_next, dpsi_dx, dpsi_du)``."""
        xs = np.ascontiguousarray(np.atleast_2d(xs), dtype=np.float64)
        us = np.ascontiguousarray(np.atleast_2d(us), dtype=np.float64)
        a, b, _ = self._tableau
        out, ax, bu, status, resid = _irk_batch(
            self.ode.kind, xs, us, self.ode.params, float(self.ts), int(self.num_steps),
            a, b, float(self.newton_tol), int(self.max_newton), bool(sensitivities),
        )
        bad = np.flatnonzero(status)
        if bad.size:
            k = bad[0]
            if status[k] == 2:
                raise NumericalError("vector field evaluation failed (coincident masses)")
            raise NumericalError(
                f"IRK Newton did not converge in {self.max_newton} iterations", residual=float(resid[k])
            )
        return out, ax, bu


def irk_step(model, x, u):
    """x_next = psi(x, u)."""
    return model.batch(x, u, sensitivities=False)[0][0]


def irk_sensitivities(model, x, u):
    """Exact sensitivities ``(dpsi/dx, dpsi/du)`` of the converged IRK map."""
    _, ax, bu = model.batch(x, u, sensitivities=True)
    return ax[0], bu[0]


def second_order_directional(model, x, u, direction, h=1e-5):
    """Directional derivative of ``[dpsi/dx, dpsi/du]`` along ``direction`` in (x, u).

    Central differences of the exact first-order sensitivities; the step is
    scaled by the magnitude of the perturbed variables.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = np.asarray(direction, dtype=float)
    n, nu = x.size, u.size
    if d.shape != (n + nu,):
        raise InvalidArgumentError(f"direction must have length {n + nu}")
    dn = np.max(np.abs(d))
    if dn == 0.0:
        return np.zeros((n, n + nu))
    y = np.concatenate([x, u])
    step = h * max(1.0, np.max(np.abs(y))) / dn
    yp = y + step * d
    ym = y - step * d
    _, ax, bu = model.batch(np.stack([yp[:n], ym[:n]]), np.stack([yp[n:], ym[n:]]))
    sp = np.hstack([ax[0], bu[0]])
    sm = np.hstack([ax[1], bu[1]])
    return (sp - sm) / (2.0 * step)


def second_order_tensor(model, xs, us, h=1e-5):
    """All coordinate directional derivatives of ``dpsi/dx`` at a batch of points.

    Returns ``t`` of shape (K, n + nu, n, n) with ``t[k, j]`` the derivative of
    ``dpsi/dx`` at ``(xs[k], us[k])`` along the j-th coordinate of (x, u).
    Uses the same scaled central differences as
    :func:`second_order_directional`, with a single integrator call.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    us = np.atleast_2d(np.asarray(us, dtype=float))
    k, n = xs.shape
    ny = n + us.shape[1]
    y = np.hstack([xs, us])
    step = h * np.maximum(1.0, np.max(np.abs(y), axis=1))  # (K,)
    pts = np.repeat(y[:, None, None, :], ny, axis=1).repeat(2, axis=2)  # (K, ny, 2, ny)
    idx = np.arange(ny)
    pts[:, idx, 0, idx] += step[:, None]
    pts[:, idx, 1, idx] -= step[:, None]
    flat = pts.reshape(-1, ny)
    _, ax, _ = model.batch(flat[:, :n], flat[:, n:])
    ax = ax.reshape(k, ny, 2, n, n)
    return (ax[:, :, 0] - ax[:, :, 1]) / (2.0 * step[:, None, None, None])
