"""SQP drivers for the GP-augmented stochastic optimal control problem.

``solve_zero_order`` runs the inexact scheme: covariances are propagated at
the current iterate, constraints are tightened with them, and a QP in the
mean/input step alone is solved by the structured interior-point method.
``solve_naive`` runs exact SQP on the covariance-augmented problem, carrying
the symmetric covariance entries as decision variables, and solves each QP
with the dense active-set method.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import second_order_tensor
from .errors import InvalidArgumentError, NumericalError, QpInfeasibleError, UnsupportedConfigurationError
from .gp import FeatureMap
from .qp import GeneralQp, OcpQp, QpSettings, solve_dense_kkt, solve_ocp_qp
from .uncertainty import (
    DEGENERATE_QUAD_FORM,
    CovarianceTrajectory,
    propagate_arrays,
    tightening_factor,
)

__all__ = [
    "ChanceConstraint",
    "OcpSpec",
    "Iterate",
    "SolverOptions",
    "SolverStats",
    "StageData",
    "FeasibilityReport",
    "linearize",
    "linearize_stage",
    "initial_guess",
    "zero_order_iteration",
    "naive_iteration",
    "solve_zero_order",
    "solve_naive",
    "solve_fixed_covariance",
    "objective",
    "check_feasibility",
    "covariance_residuals",
    "measure_contraction",
    "jacobian_error_norm",
    "dense_jacobian_error_norm",
    "write_trace_csv",
    "svec",
    "svec_unpack",
]

CATEGORIES = ("integrator", "gp_eval", "prop_tight", "qp_solve", "interface")


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass
class ChanceConstraint:
    """Affine state constraint ``c_x @ x + offset <= 0`` required with probability ``prob``.

    ``prob == 1`` makes the row a hard constraint on the mean (no backoff).
    """

    c_x: np.ndarray
    offset: float
    prob: float = 0.95
    mode: str = "gaussian"

    def __post_init__(self):
        self.c_x = np.asarray(self.c_x, dtype=float).ravel()
        if not 0.0 < self.prob <= 1.0:
            raise InvalidArgumentError(f"probability must lie in (0, 1], got {self.prob}")
        if self.mode not in ("gaussian", "chebyshev"):
            raise InvalidArgumentError(f"unknown tightening mode {self.mode!r}")

    @property
    def alpha(self):
        return 0.0 if self.prob == 1.0 else tightening_factor(self.prob, self.mode)

    def value(self, x):
        return np.asarray(x) @ self.c_x + self.offset

    def gradient(self, x=None):
        return self.c_x


def _psd(m, name):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12):
        raise InvalidArgumentError(f"{name} must be symmetric")
    if m.size and np.min(np.linalg.eigvalsh(m)) < -1e-10:
        raise InvalidArgumentError(f"{name} must be positive semidefinite")
    return m


@dataclass
class OcpSpec:
    """Tracking OCP on the predicted means with tightened chance constraints.

    Dynamics of the mean: ``mu+ = psi(mu, u) + B m(z)``, ``z = feature_map(mu, u)``;
    covariance: ``S+ = A S A^T + B (diag(v(z)) + diag(w_cov)) B^T`` with
    ``A = d/dx (psi + B m)``.
    """

    model: object
    gp: object
    feature_map: FeatureMap
    b_mat: np.ndarray
    w_cov: np.ndarray
    q_mat: np.ndarray
    r_mat: np.ndarray
    q_terminal: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray
    x_current: np.ndarray
    horizon: int
    constraints: list = field(default_factory=list)
    u_lb: np.ndarray = None
    u_ub: np.ndarray = None

    def __post_init__(self):
        nx, nu = self.model.n_x, self.model.n_u
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidArgumentError("horizon must be a positive integer")
        self.horizon = int(self.horizon)
        self.b_mat = np.asarray(self.b_mat, dtype=float).reshape(nx, -1)
        nw = self.b_mat.shape[1]
        if self.gp.n_w != nw:
            raise InvalidArgumentError(f"GP has {self.gp.n_w} outputs but B has {nw} columns")
        if self.gp.n_z != self.feature_map.n_z:
            raise InvalidArgumentError("GP input dimension differs from the feature map")
        self.w_cov = np.asarray(self.w_cov, dtype=float)
        if self.w_cov.ndim == 2:
            if np.any(self.w_cov - np.diag(np.diag(self.w_cov))):
                raise InvalidArgumentError("w_cov must be diagonal")
            self.w_cov = np.diag(self.w_cov).copy()
        self.w_cov = np.broadcast_to(self.w_cov, (nw,)).astype(float)
        if np.any(self.w_cov < 0):
            raise InvalidArgumentError("w_cov must be non-negative")
        self.q_mat = _psd(self.q_mat, "Q")
        self.r_mat = _psd(self.r_mat, "R")
        self.q_terminal = _psd(self.q_terminal, "Q_N")
        if self.q_mat.shape != (nx, nx) or self.q_terminal.shape != (nx, nx) or self.r_mat.shape != (nu, nu):
            raise InvalidArgumentError("cost weight dimensions do not match the model")
        n = self.horizon
        self.x_ref = np.broadcast_to(np.asarray(self.x_ref, dtype=float), (n + 1, nx)).copy()
        self.u_ref = np.broadcast_to(np.asarray(self.u_ref, dtype=float), (n, nu)).copy()
        self.x_current = np.asarray(self.x_current, dtype=float).reshape(nx)
        self.u_lb = np.full(nu, -np.inf) if self.u_lb is None else np.broadcast_to(self.u_lb, (nu,)).astype(float)
        self.u_ub = np.full(nu, np.inf) if self.u_ub is None else np.broadcast_to(self.u_ub, (nu,)).astype(float)
        if np.any(self.u_lb > self.u_ub):
            raise InvalidArgumentError("input lower bound exceeds upper bound")
        for c in self.constraints:
            if c.c_x.size != nx:
                raise InvalidArgumentError("constraint row length differs from n_x")
        if not (np.all(np.isfinite(self.x_current)) and np.all(np.isfinite(self.x_ref))):
            raise InvalidArgumentError("non-finite state data")

    @property
    def n_x(self):
        return self.model.n_x

    @property
    def n_u(self):
        return self.model.n_u

    @property
    def n_w(self):
        return self.b_mat.shape[1]

    @property
    def n_con(self):
        return len(self.constraints)

    def constraint_matrix(self):
        """Rows ``C`` (m, n_x), offsets (m,), factors alpha (m,)."""
        if not self.constraints:
            return np.zeros((0, self.n_x)), np.zeros(0), np.zeros(0)
        return (
            np.stack([c.c_x for c in self.constraints]),
            np.array([c.offset for c in self.constraints]),
            np.array([c.alpha for c in self.constraints]),
        )

    def replace(self, **changes):
        """Copy with some fields replaced."""
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        n = int(kw["horizon"])
        if n != self.horizon:
            # stage-wise references follow the new horizon, repeating the last row
            for name, rows in (("x_ref", n + 1), ("u_ref", n)):
                if name not in changes:
                    ref = getattr(self, name)
                    kw[name] = ref[np.minimum(np.arange(rows), ref.shape[0] - 1)]
        return OcpSpec(**kw)


@dataclass
class Iterate:
    xs: np.ndarray  # (N+1, n_x) predicted means
    us: np.ndarray  # (N, n_u)
    sigmas: CovarianceTrajectory
    step_norm: float = np.inf
    iteration: int = 0
    eq_multipliers: np.ndarray = None
    ineq_multipliers: np.ndarray = None
    active_set: list = None

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.us = np.asarray(self.us, dtype=float)
        if self.xs.shape[0] != self.us.shape[0] + 1 or len(self.sigmas) != self.xs.shape[0]:
            raise InvalidArgumentError("trajectory lengths do not match the horizon")

    @property
    def horizon(self):
        return self.us.shape[0]

    def y(self):
        """Stacked (mu_0, u_0, ..., mu_{N-1}, u_{N-1}, mu_N)."""
        return np.concatenate([np.hstack([self.xs[:-1], self.us]).ravel(), self.xs[-1]])

    def copy(self):
        return Iterate(self.xs.copy(), self.us.copy(), self.sigmas.copy(), self.step_norm, self.iteration,
                       None if self.eq_multipliers is None else self.eq_multipliers.copy(),
                       None if self.ineq_multipliers is None else self.ineq_multipliers.copy(),
                       None if self.active_set is None else list(self.active_set))

    def shifted(self, spec):
        """Warm start for the next sampling instant: drop the first stage, repeat the last."""
        xs = np.vstack([self.xs[1:], self.xs[-1:]])
        us = np.vstack([self.us[1:], self.us[-1:]])
        xs[0] = spec.x_current
        sig = np.concatenate([self.sigmas.sigmas[1:], self.sigmas.sigmas[-1:]])
        sig[0] = 0.0
        return Iterate(xs, us, CovarianceTrajectory(sig))


@dataclass
class SolverOptions:
    max_iter: int = 50
    tol_step: float = 1e-8
    mode: str = "zero_order"
    qp: QpSettings = field(default_factory=lambda: QpSettings(tol=1e-11, max_iter=100))
    timing: bool = True
    workers: int = 1

    def __post_init__(self):
        if not self.tol_step > 0:
            raise InvalidArgumentError("tol_step must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be at least 1")
        if self.mode not in ("zero_order", "naive"):
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")


@dataclass
class SolverStats:
    iterations: int = 0
    times: dict = field(default_factory=lambda: {c: 0.0 for c in CATEGORIES})
    step_norms: list = field(default_factory=list)
    iteration_times: list = field(default_factory=list)
    qp_iterations: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    converged: bool = False
    total_time: float = 0.0

    def add(self, category, seconds):
        self.times[category] += seconds

    def shares(self):
        tot = sum(self.times.values())
        return {c: (v / tot if tot > 0 else 0.0) for c, v in self.times.items()}


class _Clock:
    """Per-iteration category timer; the remainder of the wall time is 'interface'."""

    def __init__(self, stats):
        self.stats = stats
        self.spent = {c: 0.0 for c in CATEGORIES}
        self.start = time.perf_counter()

    def run(self, category, fn, *args, **kw):
        t = time.perf_counter()
        out = fn(*args, **kw)
        self.spent[category] += time.perf_counter() - t
        return out

    def close(self):
        wall = time.perf_counter() - self.start
        measured = sum(v for c, v in self.spent.items() if c != "interface")
        self.spent["interface"] = max(wall - measured, 0.0)
        if self.stats is not None:
            for c, v in self.spent.items():
                self.stats.add(c, v)
            self.stats.iteration_times.append(wall)
        return wall


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------


@dataclass
class StageData:
    """Batched stage linearization at (mu_i, u_i), i = 0..N-1."""

    f: np.ndarray  # psi + B m, (N, n_x)
    a_tilde: np.ndarray  # (N, n_x, n_x)
    b_tilde: np.ndarray  # (N, n_x, n_u)
    gp_mean: np.ndarray  # (N, n_w)
    gp_var: np.ndarray  # (N, n_w)
    residual: np.ndarray  # f - mu_{i+1}, (N, n_x)

    def noise(self, spec):
        """B (diag(v) + diag(w)) B^T per stage."""
        d = self.gp_var + spec.w_cov[None, :]
        return (spec.b_mat[None, :, :] * d[:, None, :]) @ spec.b_mat.T


def linearize(spec, xs, us, workers=1, clock=None):
    """Dynamics values, Jacobians and GP moments at every stage of (xs, us)."""
    run = clock.run if clock is not None else (lambda _c, fn, *a, **k: fn(*a, **k))
    n = us.shape[0]
    nx = spec.n_x
    x_next, jx, ju = run("integrator", spec.model.batch, xs[:n], us, True)
    z = spec.feature_map(xs[:n], us)
    mean, var, jac = run("gp_eval", spec.gp.evaluate, z, True, True, workers)
    b = spec.b_mat
    sel = spec.feature_map.indices
    # chain rule through the selection map: dz/d(x,u) picks columns
    gj = np.zeros((n, spec.n_w, nx + spec.n_u))
    gj[:, :, sel] = jac
    bg = np.einsum("ik,nkj->nij", b, gj, optimize=True) if spec.gp.n_data else None
    a_tilde = jx if bg is None else jx + bg[:, :, :nx]
    b_tilde = ju if bg is None else ju + bg[:, :, nx:]
    f = x_next + mean @ b.T
    return StageData(f, a_tilde, b_tilde, mean, var, f - xs[1:])


@dataclass
class StageLinearization:
    a_tilde: np.ndarray
    b_tilde: np.ndarray
    residual: np.ndarray
    hess_xx: np.ndarray
    hess_uu: np.ndarray
    grad_x: np.ndarray
    grad_u: np.ndarray
    ineq_rows: np.ndarray
    ineq_rhs: np.ndarray
    gp_var: np.ndarray


def linearize_stage(spec, x, u, sigma, x_next=None, stage=0):
    """Single-stage linearization: dynamics, Gauss-Newton blocks and tightened rows.

    Inequality rows ``C dx <= rhs`` use the backoff computed from ``sigma``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise InvalidArgumentError("non-finite iterate")
    xs = np.vstack([x, x if x_next is None else x_next])
    d = linearize(spec, xs, u[None, :])
    c, off, alpha = spec.constraint_matrix()
    quad = np.einsum("mi,ij,mj->m", c, sigma, c)
    back = alpha * np.sqrt(np.where(quad >= DEGENERATE_QUAD_FORM, quad, 0.0))
    res = d.residual[0] if x_next is not None else np.full(spec.n_x, np.nan)
    return StageLinearization(
        d.a_tilde[0], d.b_tilde[0], res, spec.q_mat, spec.r_mat,
        spec.q_mat @ (x - spec.x_ref[stage]), spec.r_mat @ (u - spec.u_ref[stage]),
        c, -(c @ x + off + back), d.gp_var[0],
    )


def initial_guess(spec, us=None):
    """Roll-in of the mean dynamics from ``x_current`` (zero inputs by default)."""
    n = spec.horizon
    us = np.zeros((n, spec.n_u)) if us is None else np.asarray(us, dtype=float).reshape(n, spec.n_u)
    xs = np.zeros((n + 1, spec.n_x))
    xs[0] = spec.x_current
    for i in range(n):
        x_next = spec.model.batch(xs[i], us[i], sensitivities=False)[0][0]
        mean = spec.gp.evaluate(spec.feature_map(xs[i], us[i]), False, False)[0][0]
        xs[i + 1] = x_next + spec.b_mat @ mean
    d = linearize(spec, xs, us)
    sig = propagate_arrays(d.a_tilde, d.noise(spec), np.zeros((spec.n_x, spec.n_x)))
    return Iterate(xs, us, CovarianceTrajectory(sig))


def objective(spec, xs, us):
    """Tracking cost on the means."""
    dx = xs - spec.x_ref
    du = us - spec.u_ref
    val = 0.5 * np.einsum("ni,ij,nj->", dx[:-1], spec.q_mat, dx[:-1])
    val += 0.5 * np.einsum("ni,ij,nj->", du, spec.r_mat, du)
    return float(val + 0.5 * dx[-1] @ spec.q_terminal @ dx[-1])


# ---------------------------------------------------------------------------
# zero-order iteration
# ---------------------------------------------------------------------------


class _StructuredLayout:
    """Static parts of the structured QP (Hessians, constraint rows, masks)."""

    def __init__(self, spec):
        n, nx, nu = spec.horizon, spec.n_x, spec.n_u
        c, off, alpha = spec.constraint_matrix()
        self.c, self.off, self.alpha = c, off, alpha
        m = c.shape[0]
        nc = 2 * nu + m
        self.q_xx = np.concatenate([np.broadcast_to(spec.q_mat, (n, nx, nx)), spec.q_terminal[None]])
        self.q_uu = np.ascontiguousarray(np.broadcast_to(spec.r_mat, (n, nu, nu)))
        self.q_xu = np.zeros((n, nx, nu))
        self.c_x = np.zeros((n + 1, nc, nx))
        self.c_u = np.zeros((n + 1, nc, nu))
        self.mask = np.zeros((n + 1, nc), dtype=bool)
        eye = np.eye(nu)
        self.c_u[:n, :nu] = eye
        self.c_u[:n, nu:2 * nu] = -eye
        self.mask[:n, :nu] = np.isfinite(spec.u_ub)
        self.mask[:n, nu:2 * nu] = np.isfinite(spec.u_lb)
        self.c_x[:, 2 * nu:] = c
        # stage-0 state rows depend on data only and are left out of the QP
        self.mask[1:, 2 * nu:] = True
        self.nu, self.m = nu, m

    def build(self, spec, it, d, back):
        n, nu = spec.horizon, self.nu
        ub = np.zeros(self.mask.shape)
        ub[:n, :nu] = np.where(np.isfinite(spec.u_ub), spec.u_ub - it.us, 0.0)
        ub[:n, nu:2 * nu] = np.where(np.isfinite(spec.u_lb), it.us - spec.u_lb, 0.0)
        ub[:, 2 * nu:] = -(it.xs @ self.c.T + self.off + back)
        dx = it.xs - spec.x_ref
        g_x = dx @ spec.q_mat
        g_x[-1] = spec.q_terminal @ dx[-1]
        g_u = (it.us - spec.u_ref) @ spec.r_mat
        return OcpQp(self.q_xx, self.q_uu, self.q_xu, g_x, g_u, d.a_tilde, d.b_tilde, d.residual,
                     self.c_x, self.c_u, ub, self.mask, spec.x_current - it.xs[0])


def _layout(spec, workspace):
    if workspace is None:
        return _StructuredLayout(spec)
    key = id(spec)
    if workspace.get("key") != key:
        workspace.clear()
        workspace["key"] = key
        workspace["layout"] = _StructuredLayout(spec)
    return workspace["layout"]


def _backoffs(c, alpha, sigmas):
    quad = np.sum((sigmas @ c.T) * c.T[None, :, :], axis=1)
    return alpha * np.sqrt(np.where(quad >= DEGENERATE_QUAD_FORM, quad, 0.0))


def zero_order_iteration(spec, iterate, options=None, stats=None, workspace=None):
    """One inexact SQP step.

    Propagates the covariances once along the current means, tightens the
    constraints with them, solves the structured QP in (dmu, du) and takes
    the full step. The returned iterate carries the freshly propagated
    covariances.
    """
    options = options or SolverOptions()
    clock = _Clock(stats)
    layout = _layout(spec, workspace)
    d = linearize(spec, iterate.xs, iterate.us, options.workers, clock)

    def prop():
        sig = propagate_arrays(d.a_tilde, d.noise(spec), np.zeros((spec.n_x, spec.n_x)))
        return sig, _backoffs(layout.c, layout.alpha, sig)

    sig, back = clock.run("prop_tight", prop)
    qp = layout.build(spec, iterate, d, back)
    sol = clock.run("qp_solve", solve_ocp_qp, qp, options.qp)
    if sol.status == "infeasible":
        clock.close()
        raise QpInfeasibleError("QP subproblem infeasible", qp=qp)
    if not (np.all(np.isfinite(sol.x)) and np.all(np.isfinite(sol.u))):
        clock.close()
        raise NumericalError("QP returned a non-finite step", residual=sol.kkt_residual)
    step = max(np.max(np.abs(sol.x)), np.max(np.abs(sol.u)))
    new = Iterate(iterate.xs + sol.x, iterate.us + sol.u, CovarianceTrajectory(sig), float(step),
                  iterate.iteration + 1, sol.eq_multipliers, sol.ineq_multipliers)
    clock.close()
    if stats is not None:
        stats.qp_iterations.append(sol.iterations)
        stats.qp_status.append(sol.status)
    return new


# ---------------------------------------------------------------------------
# covariance-augmented (naive) iteration
# ---------------------------------------------------------------------------


def svec(m):
    """Upper-triangular entries (row-major, diagonal included) of symmetric ``m``."""
    iu = np.triu_indices(m.shape[-1])
    return m[..., iu[0], iu[1]]


def svec_unpack(v, n):
    iu = np.triu_indices(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., iu[0], iu[1]] = v
    out[..., iu[1], iu[0]] = v
    return out


def _svec_congruence(a):
    """Matrix of svec(X) -> svec(A X A^T) for symmetric X."""
    n = a.shape[0]
    iu, ju = np.triu_indices(n)
    t = a[np.ix_(iu, iu)] * a[np.ix_(ju, ju)]  # A[c,a] A[d,b] at row (c,d), column (a,b)
    t_sw = a[np.ix_(iu, ju)] * a[np.ix_(ju, iu)]  # A[c,b] A[d,a]
    off = iu != ju
    return t + np.where(off[None, :], t_sw, 0.0)


def _svec_quad_grad(c):
    """d/d svec(S) of c^T S c."""
    iu, ju = np.triu_indices(c.size)
    return np.where(iu == ju, 1.0, 2.0) * c[iu] * c[ju]


class _AugmentedLayout:
    def __init__(self, spec):
        self.n, self.nx, self.nu = spec.horizon, spec.n_x, spec.n_u
        self.np_ = self.nx * (self.nx + 1) // 2
        self.stride = self.nx + self.nu + self.np_
        self.n_var = self.n * self.stride + self.nx + self.np_

    def mu(self, i):
        o = i * self.stride
        return slice(o, o + self.nx)

    def u(self, i):
        o = i * self.stride + self.nx
        return slice(o, o + self.nu)

    def p(self, i):
        o = i * self.stride + (self.nx if i == self.n else self.nx + self.nu)
        return slice(o, o + self.np_)


def _check_naive(spec):
    if spec.gp.n_data > 0:
        raise UnsupportedConfigurationError(
            "the covariance-augmented SQP supports only a GP without data (constant covariance)"
        )


def naive_iteration(spec, iterate, options=None, stats=None, workspace=None):
    """One exact SQP step on the covariance-augmented problem (dense active-set QP)."""
    _check_naive(spec)
    options = options or SolverOptions(mode="naive")
    clock = _Clock(stats)
    lay = _AugmentedLayout(spec)
    n, nx, nu, np_ = lay.n, lay.nx, lay.nu, lay.np_
    xs, us = iterate.xs, iterate.us
    sig = iterate.sigmas.sigmas
    d = linearize(spec, xs, us, options.workers, clock)

    d_a = clock.run("integrator", second_order_tensor, spec.model, xs[:n], us)
    c, off, alpha = spec.constraint_matrix()

    h = np.zeros((lay.n_var, lay.n_var))
    q = np.zeros(lay.n_var)
    for i in range(n + 1):
        w = spec.q_terminal if i == n else spec.q_mat
        h[lay.mu(i), lay.mu(i)] = w
        q[lay.mu(i)] = w @ (xs[i] - spec.x_ref[i])
        if i < n:
            h[lay.u(i), lay.u(i)] = spec.r_mat
            q[lay.u(i)] = spec.r_mat @ (us[i] - spec.u_ref[i])

    n_eq = (n + 1) * (nx + np_)
    a_eq = np.zeros((n_eq, lay.n_var))
    b_eq = np.zeros(n_eq)
    a_eq[:nx, lay.mu(0)] = np.eye(nx)
    b_eq[:nx] = spec.x_current - xs[0]
    a_eq[nx:nx + np_, lay.p(0)] = np.eye(np_)
    b_eq[nx:nx + np_] = -svec(sig[0])
    noise = d.noise(spec)

    def prop_tight():
        rows = []
        rhs = []
        r = nx + np_
        for i in range(n):
            a = d.a_tilde[i]
            # mean dynamics
            a_eq[r:r + nx, lay.mu(i)] = a
            a_eq[r:r + nx, lay.u(i)] = d.b_tilde[i]
            a_eq[r:r + nx, lay.mu(i + 1)] = -np.eye(nx)
            b_eq[r:r + nx] = -d.residual[i]
            r += nx
            # covariance dynamics g = svec(A S A^T + W) - p_{i+1}
            s_at = sig[i] @ a.T
            g_val = svec(a @ s_at + noise[i]) - svec(sig[i + 1])
            prod = d_a[i] @ s_at  # (nx+nu, nx, nx): dA_k S A^T
            dg_dy = svec(prod + np.transpose(prod, (0, 2, 1))).T  # (np_, nx+nu)
            a_eq[r:r + np_, lay.mu(i)] = dg_dy[:, :nx]
            a_eq[r:r + np_, lay.u(i)] = dg_dy[:, nx:]
            a_eq[r:r + np_, lay.p(i)] = _svec_congruence(a)
            a_eq[r:r + np_, lay.p(i + 1)] = -np.eye(np_)
            b_eq[r:r + np_] = -g_val
            r += np_
        for i in range(1, n + 1):
            for j in range(c.shape[0]):
                quad = c[j] @ sig[i] @ c[j]
                row = np.zeros(lay.n_var)
                row[lay.mu(i)] = c[j]
                back = 0.0
                if alpha[j] > 0 and quad >= DEGENERATE_QUAD_FORM:
                    root = np.sqrt(quad)
                    back = alpha[j] * root
                    row[lay.p(i)] = alpha[j] / (2.0 * root) * _svec_quad_grad(c[j])
                rows.append(row)
                rhs.append(-(c[j] @ xs[i] + off[j] + back))
        for i in range(n):
            for k in range(nu):
                if np.isfinite(spec.u_ub[k]):
                    row = np.zeros(lay.n_var)
                    row[lay.u(i).start + k] = 1.0
                    rows.append(row)
                    rhs.append(spec.u_ub[k] - us[i, k])
                if np.isfinite(spec.u_lb[k]):
                    row = np.zeros(lay.n_var)
                    row[lay.u(i).start + k] = -1.0
                    rows.append(row)
                    rhs.append(us[i, k] - spec.u_lb[k])
        return np.array(rows).reshape(-1, lay.n_var), np.array(rhs)

    g_in, h_in = clock.run("prop_tight", prop_tight)
    qp = GeneralQp(h, q, a_eq, b_eq, g_in, h_in)
    sol = clock.run("qp_solve", solve_dense_kkt, qp, iterate.active_set)
    if sol.status == "infeasible":
        clock.close()
        raise QpInfeasibleError("QP subproblem infeasible", qp=qp)
    dy = sol.x
    dxs = np.stack([dy[lay.mu(i)] for i in range(n + 1)])
    dus = np.stack([dy[lay.u(i)] for i in range(n)])
    dps = np.stack([dy[lay.p(i)] for i in range(n + 1)])
    new_sig = svec_unpack(svec(sig) + dps, nx)
    step = max(np.max(np.abs(dxs)), np.max(np.abs(dus)))
    new = Iterate(xs + dxs, us + dus, CovarianceTrajectory(new_sig), float(step), iterate.iteration + 1,
                  sol.eq_multipliers, sol.ineq_multipliers, sol.active_set)
    clock.close()
    if stats is not None:
        stats.qp_iterations.append(sol.iterations)
        stats.qp_status.append(sol.status)
    return new


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


def _loop(step_fn, spec, init_guess, options):
    stats = SolverStats()
    t0 = time.perf_counter()
    it = init_guess if init_guess is not None else initial_guess(spec)
    best = it
    workspace = {}
    for _ in range(options.max_iter):
        it = step_fn(spec, it, options, stats, workspace)
        stats.iterations += 1
        stats.step_norms.append(it.step_norm)
        if it.step_norm <= best.step_norm:
            best = it
        if it.step_norm <= options.tol_step:
            stats.converged = True
            best = it
            break
    stats.total_time = time.perf_counter() - t0
    return best, stats


def solve_zero_order(spec, init_guess=None, options=None):
    """Iterate :func:`zero_order_iteration` until ``max|dy| <= tol_step``."""
    options = options or SolverOptions()
    return _loop(zero_order_iteration, spec, init_guess, options)


def solve_naive(spec, init_guess=None, options=None):
    """Exact SQP on the covariance-augmented problem (GP without data only)."""
    _check_naive(spec)
    options = options or SolverOptions(mode="naive")
    return _loop(naive_iteration, spec, init_guess, options)


def solve_fixed_covariance(spec, init_guess=None, options=None, sigmas=None):
    """Heuristic that freezes the covariances of a previous trajectory.

    ``sigmas`` defaults to the propagation along ``init_guess``; the means are
    then optimized with these frozen backoffs. Returns an iterate whose
    covariances are the frozen ones.
    """
    options = options or SolverOptions()
    it0 = init_guess if init_guess is not None else initial_guess(spec)
    frozen = CovarianceTrajectory(np.array(it0.sigmas.sigmas if sigmas is None else sigmas, dtype=float))
    stats = SolverStats()
    t0 = time.perf_counter()
    layout = _StructuredLayout(spec)
    back = _backoffs(layout.c, layout.alpha, frozen.sigmas)
    it = it0
    for _ in range(options.max_iter):
        d = linearize(spec, it.xs, it.us, options.workers)
        qp = layout.build(spec, it, d, back)
        sol = solve_ocp_qp(qp, options.qp)
        if sol.status == "infeasible":
            raise QpInfeasibleError("QP subproblem infeasible", qp=qp)
        step = max(np.max(np.abs(sol.x)), np.max(np.abs(sol.u)))
        it = Iterate(it.xs + sol.x, it.us + sol.u, frozen, float(step), it.iteration + 1)
        stats.iterations += 1
        stats.step_norms.append(step)
        if step <= options.tol_step:
            stats.converged = True
            break
    stats.total_time = time.perf_counter() - t0
    return it, stats


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class FeasibilityReport:
    dynamics: float
    covariance: float
    inequalities: float
    initial: float
    inputs: float

    def max(self):
        return max(self.dynamics, self.covariance, self.inequalities, self.initial, self.inputs)

    def ok(self, tol=1e-6):
        return self.max() <= tol


def covariance_residuals(spec, xs, us, sigmas):
    """Stage residuals S_{i+1} - (A S_i A^T + W_i), shape (N, n_x, n_x)."""
    sig = sigmas.sigmas if isinstance(sigmas, CovarianceTrajectory) else np.asarray(sigmas)
    d = linearize(spec, xs, us)
    pred = np.einsum("nij,njk,nlk->nil", d.a_tilde, sig[:-1], d.a_tilde, optimize=True) + d.noise(spec)
    return sig[1:] - pred, d


def check_feasibility(spec, xs, us, sigmas):
    """Infinity-norm residuals of every constraint of the stochastic OCP.

    The tightened inequalities are checked on stages 1..N (stage 0 is the
    measured state and not a decision); the covariance initial condition
    is zero.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    sig = sigmas.sigmas if isinstance(sigmas, CovarianceTrajectory) else np.asarray(sigmas)
    res_cov, d = covariance_residuals(spec, xs, us, sig)
    dyn = float(np.max(np.abs(d.residual)))
    cov = float(np.max(np.abs(res_cov)))
    c, off, alpha = spec.constraint_matrix()
    ineq = 0.0
    if c.shape[0]:
        tight = xs[1:] @ c.T + off + _backoffs(c, alpha, sig[1:])
        ineq = float(max(np.max(tight), 0.0))
    init = float(max(np.max(np.abs(xs[0] - spec.x_current)), np.max(np.abs(sig[0]))))
    inp = float(max(np.max(us - spec.u_ub), np.max(spec.u_lb - us), 0.0))
    return FeasibilityReport(dyn, cov, ineq, init, inp)


def measure_contraction(step_norms, tail=5):
    """Contraction ratios of the distances to the final iterate.

    The distance of iterate k to the last one is approximated by the sum of
    the remaining step norms. Returns ``(ratios, kappa)`` with ``kappa`` the
    largest ratio over the last ``tail`` entries.
    """
    s = np.asarray(step_norms, dtype=float)
    if s.size < 3:
        raise InvalidArgumentError("need at least three recorded steps")
    dist = np.cumsum(s[::-1])[::-1]
    ratios = np.zeros(s.size - 1)
    nz = dist[:-1] > 0
    ratios[nz] = dist[1:][nz] / dist[:-1][nz]
    return ratios, float(np.max(ratios[-tail:]))


def _cov_blocks(spec, xs, us, sig, h=1e-6):
    """Finite-difference blocks d r_{i+1} / d(mu_i, u_i) of the vectorized covariance equation."""
    n, nx, nu = spec.horizon, spec.n_x, spec.n_u
    ny = nx + nu
    y = np.hstack([xs[:n], us])  # (N, ny)
    pts = np.repeat(y[:, None, :], 2 * ny, axis=1)
    steps = h * np.maximum(1.0, np.abs(y))  # (N, ny)
    for k in range(ny):
        pts[:, 2 * k, k] += steps[:, k]
        pts[:, 2 * k + 1, k] -= steps[:, k]
    flat = pts.reshape(-1, ny)
    _, jx, _ = spec.model.batch(flat[:, :nx], flat[:, nx:])
    mean, var, jac = spec.gp.evaluate(spec.feature_map(flat[:, :nx], flat[:, nx:]))
    gj = np.zeros((flat.shape[0], spec.n_w, ny))
    gj[:, :, spec.feature_map.indices] = jac
    a = jx + np.einsum("ik,pkj->pij", spec.b_mat, gj[:, :, :nx])
    noise = np.einsum("ik,pk,jk->pij", spec.b_mat, var + spec.w_cov, spec.b_mat)
    s_rep = np.repeat(sig[:n], 2 * ny, axis=0)
    val = -(np.einsum("pij,pjk,plk->pil", a, s_rep, a) + noise)  # r without the constant S_{i+1}
    val = val.reshape(n, ny, 2, nx * nx)  # vec order irrelevant for norms (consistent column-major below)
    val = np.transpose(val.reshape(n, ny, 2, nx, nx), (0, 1, 2, 4, 3)).reshape(n, ny, 2, nx * nx)
    blocks = (val[:, :, 0] - val[:, :, 1]) / (2.0 * steps[:, :, None])  # (N, ny, nx^2)
    return np.transpose(blocks, (0, 2, 1))  # (N, nx^2, ny)


def jacobian_error_norm(spec, xs, us, sigmas, iterations=20, seed=0):
    """Spectral norm of d/dy (A(y) P + b(y)) at fixed P by power iteration.

    The Jacobian is assembled stage-block-wise by central finite differences
    (relative step 1e-6); block row i+1 depends on (mu_i, u_i) only.
    """
    sig = sigmas.sigmas if isinstance(sigmas, CovarianceTrajectory) else np.asarray(sigmas)
    blocks = _cov_blocks(spec, np.asarray(xs, float), np.asarray(us, float), sig)
    n, m, ny = blocks.shape
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, ny))
    nrm = np.linalg.norm(v)
    if nrm == 0:
        return 0.0
    v /= nrm
    est = 0.0
    for _ in range(iterations):
        jv = np.einsum("nij,nj->ni", blocks, v)
        est = float(np.linalg.norm(jv))
        w = np.einsum("nij,ni->nj", blocks, jv)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return 0.0
        v = w / wn
    return est


def dense_jacobian_error_norm(spec, xs, us, sigmas, h=1e-6):
    """Reference value: 2-norm of the full dense finite-difference Jacobian over the stacked y."""
    sig = sigmas.sigmas if isinstance(sigmas, CovarianceTrajectory) else np.asarray(sigmas)
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    n, nx, nu = spec.horizon, spec.n_x, spec.n_u

    def residual(yv):
        xx = np.vstack([yv[: n * (nx + nu)].reshape(n, nx + nu)[:, :nx], yv[n * (nx + nu):]])
        uu = yv[: n * (nx + nu)].reshape(n, nx + nu)[:, nx:]
        r, _ = covariance_residuals(spec, xx, uu, sig)
        return np.concatenate([r[i].ravel(order="F") for i in range(n)])

    y0 = np.concatenate([np.hstack([xs[:-1], us]).ravel(), xs[-1]])
    cols = []
    for k in range(y0.size):
        hk = h * max(1.0, abs(y0[k]))
        yp, ym = y0.copy(), y0.copy()
        yp[k] += hk
        ym[k] -= hk
        cols.append((residual(yp) - residual(ym)) / (2 * hk))
    return float(np.linalg.norm(np.stack(cols, axis=1), 2))


def write_trace_csv(stats, path):
    """Per-iteration trace: step norm, QP status and iterations, wall time."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "step_norm", "qp_status", "qp_iterations", "seconds"])
        for k, s in enumerate(stats.step_norms):
            w.writerow([
                k + 1, f"{s:.6e}",
                stats.qp_status[k] if k < len(stats.qp_status) else "",
                stats.qp_iterations[k] if k < len(stats.qp_iterations) else "",
                f"{stats.iteration_times[k]:.6e}" if k < len(stats.iteration_times) else "",
            ])
