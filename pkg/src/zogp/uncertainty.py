"""Covariance propagation along a trajectory and chance-constraint tightening.

Two routes compute the same covariance trajectory: the stage recursion
(production path, O(N n^3)) and the stacked Kronecker system ``A P + b = 0``
solved by block forward substitution (verification path, O(N n^4) memory).
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import sparse, special

from ._kernels import gemm
from .errors import InvalidArgumentError

__all__ = [
    "StageLinearization",
    "CovarianceTrajectory",
    "TightenedConstraint",
    "tightening_factor",
    "propagate_covariances",
    "propagate_arrays",
    "build_vectorized_system",
    "solve_vectorized",
    "tighten",
    "backoffs",
    "vec",
    "unvec",
]

DEGENERATE_QUAD_FORM = 1e-14


def vec(m):
    """Column-wise vectorization."""
    return np.asarray(m).reshape(-1, order="F")


def unvec(v, n):
    return np.asarray(v).reshape((n, n), order="F")


def _as_diag_matrix(d, n):
    d = np.asarray(d, dtype=float)
    if d.ndim == 1:
        d = np.diag(d)
    if d.shape != (n, n):
        raise InvalidArgumentError(f"expected a diagonal covariance of size {n}")
    return d


@dataclass
class StageLinearization:
    a_tilde: np.ndarray
    b_mat: np.ndarray
    gp_cov: np.ndarray
    w_cov: np.ndarray

    def __post_init__(self):
        self.a_tilde = np.atleast_2d(np.asarray(self.a_tilde, dtype=float))
        self.b_mat = np.atleast_2d(np.asarray(self.b_mat, dtype=float))
        n_w = self.b_mat.shape[1]
        self.gp_cov = _as_diag_matrix(self.gp_cov, n_w)
        self.w_cov = _as_diag_matrix(self.w_cov, n_w)
        for name in ("gp_cov", "w_cov"):
            m = getattr(self, name)
            if np.any(m - np.diag(np.diag(m))) or np.any(np.diag(m) < 0):
                raise InvalidArgumentError(f"{name} must be diagonal with non-negative entries")

    def noise(self):
        """B (Sigma_d + Sigma_w) B^T."""
        return self.b_mat @ (self.gp_cov + self.w_cov) @ self.b_mat.T


@dataclass
class CovarianceTrajectory:
    sigmas: np.ndarray  # (N + 1, n, n)

    @property
    def horizon(self):
        return self.sigmas.shape[0] - 1

    @property
    def n_x(self):
        return self.sigmas.shape[1]

    def __getitem__(self, i):
        return self.sigmas[i]

    def __len__(self):
        return self.sigmas.shape[0]

    def vec(self):
        """Stacked column-wise vectorization (Sigma_0, ..., Sigma_N)."""
        return np.concatenate([vec(s) for s in self.sigmas])

    def copy(self):
        return CovarianceTrajectory(self.sigmas.copy())


@dataclass
class TightenedConstraint:
    row: np.ndarray
    offset: float
    prob: float
    alpha: float
    backoff: float

    @property
    def tightened(self):
        return self.offset + self.backoff


def tightening_factor(p, mode="gaussian"):
    """Backoff multiplier for an individual chance constraint Pr(h <= 0) >= p."""
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"probability must lie in (0, 1), got {p}")
    if mode == "chebyshev":
        return float(np.sqrt(p / (1.0 - p)))
    if mode == "gaussian":
        return float(special.ndtri(p))
    raise InvalidArgumentError(f"unknown tightening mode {mode!r}")


@njit(cache=True, fastmath=True)
def _propagate(a_tilde, noise, out):
    n_stage, n, _ = a_tilde.shape
    tmp = np.empty((n, n))
    for i in range(n_stage):
        tmp[:, :] = 0.0
        gemm(a_tilde[i], out[i], tmp, 1.0, 0.0)
        s = out[i + 1]
        # s = tmp @ A^T + noise, symmetrized
        for r in range(n):
            for c in range(r, n):
                v = 0.0
                w = 0.0
                for k in range(n):
                    v += tmp[r, k] * a_tilde[i, c, k]
                    w += tmp[c, k] * a_tilde[i, r, k]
                v = 0.5 * (v + w + noise[i, r, c] + noise[i, c, r])
                s[r, c] = v
                s[c, r] = v


def propagate_arrays(a_tilde, noise, sigma0):
    """Recursion on stacked arrays: ``a_tilde``, ``noise`` of shape (N, n, n)."""
    a_tilde = np.ascontiguousarray(a_tilde, dtype=np.float64)
    noise = np.ascontiguousarray(noise, dtype=np.float64)
    n_stage, n, _ = a_tilde.shape
    out = np.empty((n_stage + 1, n, n))
    out[0] = 0.5 * (sigma0 + sigma0.T)
    _propagate(a_tilde, noise, out)
    return out


def propagate_covariances(stages, sigma0=None):
    """Sigma_{i+1} = A_i Sigma_i A_i^T + B (Sigma_d,i + Sigma_w) B^T, symmetrized."""
    if not stages:
        raise InvalidArgumentError("need at least one stage")
    n = stages[0].a_tilde.shape[0]
    sigma0 = np.zeros((n, n)) if sigma0 is None else np.asarray(sigma0, dtype=float)
    a = np.stack([s.a_tilde for s in stages])
    q = np.stack([s.noise() for s in stages])
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(q)) and np.all(np.isfinite(sigma0))):
        raise InvalidArgumentError("non-finite stage data")
    return CovarianceTrajectory(propagate_arrays(a, q, sigma0))


def build_vectorized_system(stages):
    """Stacked linear system ``A P + b = 0`` for the covariance trajectory.

    ``A`` is unit lower block-bidiagonal with sub-diagonal blocks
    ``-(A_i kron A_i)``; ``b`` stacks 0 and ``-(B kron B) vec(Sigma_d,i + Sigma_w)``.
    """
    n = stages[0].a_tilde.shape[0]
    n2 = n * n
    nb = len(stages) + 1
    blocks = [[None] * nb for _ in range(nb)]
    for i in range(nb):
        blocks[i][i] = sparse.identity(n2, format="csr")
    b = np.zeros(n2 * nb)
    for i, st in enumerate(stages):
        if st.a_tilde.shape != (n, n):
            raise InvalidArgumentError("inconsistent stage dimensions")
        blocks[i + 1][i] = sparse.csr_matrix(-np.kron(st.a_tilde, st.a_tilde))
        bb = np.kron(st.b_mat, st.b_mat)
        b[(i + 1) * n2:(i + 2) * n2] = -bb @ vec(st.gp_cov + st.w_cov)
    return sparse.bmat(blocks, format="csr"), b


def solve_vectorized(a_mat, b_vec, n_x):
    """Solve ``A P = -b`` by block forward substitution; returns the trajectory."""
    n2 = n_x * n_x
    a_mat = sparse.csr_matrix(a_mat)
    nb = b_vec.size // n2
    if nb * n2 != b_vec.size or a_mat.shape != (b_vec.size, b_vec.size):
        raise InvalidArgumentError("system size inconsistent with n_x")
    p = np.zeros_like(b_vec, dtype=float)
    p[:n2] = -b_vec[:n2]
    for i in range(1, nb):
        rows = slice(i * n2, (i + 1) * n2)
        sub = a_mat[rows, (i - 1) * n2:i * n2]
        p[rows] = -b_vec[rows] - sub @ p[(i - 1) * n2:i * n2]
    sig = np.stack([unvec(p[i * n2:(i + 1) * n2], n_x) for i in range(nb)])
    return CovarianceTrajectory(0.5 * (sig + np.transpose(sig, (0, 2, 1))))


def tighten(h_val, c_row, sigma, alpha, prob=None):
    """Tightened constraint value h + alpha * sqrt(C_x Sigma C_x^T)."""
    sigma = np.atleast_2d(sigma)
    c_row = np.asarray(c_row, dtype=float)
    cx = c_row[: sigma.shape[0]]
    quad = float(cx @ sigma @ cx)
    backoff = alpha * np.sqrt(quad) if quad >= DEGENERATE_QUAD_FORM else 0.0
    return TightenedConstraint(c_row, float(h_val), prob, alpha, float(backoff))


def backoffs(c_x, sigmas, alpha):
    """Batch backoffs for constraint rows ``c_x`` (m, n) over ``sigmas`` (K, n, n).

    ``alpha`` may be a scalar or a length-m vector; returns shape (K, m).
    """
    quad = np.einsum("mi,kij,mj->km", c_x, sigmas, c_x)
    out = np.sqrt(np.where(quad >= DEGENERATE_QUAD_FORM, quad, 0.0))
    return out * np.asarray(alpha, dtype=float)
