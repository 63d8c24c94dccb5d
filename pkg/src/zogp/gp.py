"""Exact multi-output Gaussian-process regression for the dynamics residual.

Each residual output has its own independent GP with an ARD squared
exponential kernel. All outputs share the training inputs.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, NumericalError

__all__ = [
    "KernelHyperparams",
    "GpDataset",
    "MultiGpModel",
    "FeatureMap",
    "se_kernel",
    "se_kernel_matrix",
    "fit_gp",
    "prior_model",
    "log_marginal_likelihood",
    "log_marginal_likelihood_grad",
    "optimize_hyperparams",
    "posterior_mean_cov",
    "posterior_mean_jacobian",
    "read_dataset_csv",
    "write_dataset_csv",
]

_JITTER_START = 1e-8
_JITTER_STOP = 1e-2


@dataclass(frozen=True)
class KernelHyperparams:
    lengthscales: tuple
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not ls or any(not v > 0 for v in ls):
            raise InvalidArgumentError("lengthscales must be non-empty and positive")
        # a zero signal variance is accepted for the degenerate "certain" GP
        if not self.signal_variance >= 0:
            raise InvalidArgumentError("signal_variance must be non-negative")
        if not self.noise_variance >= 0:
            raise InvalidArgumentError("noise_variance must be non-negative")

    @property
    def n_z(self):
        return len(self.lengthscales)

    def scaled(self, signal_factor=1.0):
        return KernelHyperparams(self.lengthscales, self.signal_variance * signal_factor, self.noise_variance)

    def to_log(self):
        return np.log(np.r_[self.lengthscales, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, theta):
        theta = np.exp(np.asarray(theta, dtype=float))
        return cls(tuple(theta[:-2]), float(theta[-2]), float(theta[-1]))


@dataclass
class GpDataset:
    inputs: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidArgumentError("inputs and targets must have the same number of rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise InvalidArgumentError("dataset contains non-finite entries")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_z(self):
        return self.inputs.shape[1]

    @property
    def n_w(self):
        return self.targets.shape[1]

    def subset(self, rows):
        return GpDataset(self.inputs[rows], self.targets[rows], dict(self.meta))


class FeatureMap:
    """Selects GP inputs z from the stacked stage vector (x, u)."""

    def __init__(self, indices, n_x, n_u):
        self.indices = np.asarray(indices, dtype=int)
        self.n_x = n_x
        self.n_u = n_u
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n_x + n_u):
            raise InvalidArgumentError("feature indices out of range")

    @property
    def n_z(self):
        return self.indices.size

    def __call__(self, xs, us):
        w = np.hstack([np.atleast_2d(xs), np.atleast_2d(us)])
        return w[:, self.indices]

    def jacobian(self):
        """dz/d(x, u) as a dense selection matrix."""
        s = np.zeros((self.n_z, self.n_x + self.n_u))
        s[np.arange(self.n_z), self.indices] = 1.0
        return s


def _check_hp(hp, n_z):
    if hp.n_z != n_z:
        raise InvalidArgumentError(f"kernel has {hp.n_z} lengthscales but inputs have dimension {n_z}")


def se_kernel(z1, z2, hp):
    """k(z1, z2) = s2 * exp(-0.5 * sum_d (z1_d - z2_d)^2 / l_d^2)."""
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))
    if z1.shape != z2.shape:
        raise InvalidArgumentError("kernel arguments must have equal dimension")
    _check_hp(hp, z1.size)
    r = (z1 - z2) / np.asarray(hp.lengthscales)
    return hp.signal_variance * np.exp(-0.5 * np.dot(r, r))


def se_kernel_matrix(z1, z2, hp):
    ls = np.asarray(hp.lengthscales)
    a = np.atleast_2d(z1) / ls
    b = np.atleast_2d(z2) / ls
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    np.maximum(sq, 0.0, out=sq)
    return hp.signal_variance * np.exp(-0.5 * sq)


def _gram(inputs, hp):
    k = se_kernel_matrix(inputs, inputs, hp)
    # exact zero distances on the diagonal
    k[np.diag_indices_from(k)] = hp.signal_variance
    return k


def _factor(k, hp):
    """Cholesky of K + noise I with the escalating jitter policy."""
    d = k.shape[0]
    a = k + hp.noise_variance * np.eye(d)
    try:
        return linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    # round-off rescue only: with zero noise the Gram matrix may be exactly singular
    if hp.noise_variance > 0:
        jitter = _JITTER_START
        while jitter <= _JITTER_STOP * (1 + 1e-12):
            try:
                return linalg.cholesky(a + jitter * hp.signal_variance * np.eye(d), lower=True, check_finite=False)
            except linalg.LinAlgError:
                jitter *= 10.0
    cond = np.linalg.cond(a)
    raise NumericalError(
        f"Cholesky of K + noise*I failed (condition number {cond:.3e})", diagnostic={"condition": cond}
    )


class MultiGpModel:
    """Independent exact GPs conditioned on shared inputs.

    Evaluation is read-only; a fitted model may be shared between threads.
    """

    def __init__(self, inputs, hyperparams, chol_factors, weights, targets=None):
        self.inputs = np.asarray(inputs, dtype=float).reshape(-1, hyperparams[0].n_z)
        self.hyperparams = list(hyperparams)
        self.chol_factors = list(chol_factors)
        self.weights = np.asarray(weights, dtype=float).reshape(self.inputs.shape[0], len(hyperparams))
        self.targets = None if targets is None else np.asarray(targets, dtype=float)

    @property
    def n_data(self):
        return self.inputs.shape[0]

    @property
    def n_w(self):
        return len(self.hyperparams)

    @property
    def n_z(self):
        return self.hyperparams[0].n_z

    def _output(self, j, zs, want_var, want_jac):
        hp = self.hyperparams[j]
        nb = zs.shape[0]
        if self.n_data == 0:
            mean = np.zeros(nb)
            var = np.full(nb, hp.signal_variance) if want_var else None
            jac = np.zeros((nb, self.n_z)) if want_jac else None
            return mean, var, jac
        ks = se_kernel_matrix(zs, self.inputs, hp)  # nb x D
        alpha = self.weights[:, j]
        mean = ks @ alpha
        var = None
        if want_var:
            v = linalg.solve_triangular(self.chol_factors[j], ks.T, lower=True, check_finite=False)
            var = hp.signal_variance - np.sum(v * v, axis=0)
        jac = None
        if want_jac:
            inv_l2 = 1.0 / np.asarray(hp.lengthscales) ** 2
            ka = ks * alpha[None, :]
            # d/dz sum_m alpha_m k(z, z_m) = -sum_m alpha_m k(z, z_m) (z - z_m) / l^2
            jac = -(np.sum(ka, axis=1)[:, None] * zs - ka @ self.inputs) * inv_l2[None, :]
        return mean, var, jac

    def evaluate(self, zs, want_var=True, want_jac=True, workers=1, clamp=True):
        """Batch posterior evaluation.

        Returns ``(mean (B, n_w), var (B, n_w), jac (B, n_w, n_z))``; entries not
        requested are ``None``. ``workers > 1`` maps the outputs over a thread pool.
        """
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        if zs.shape[1] != self.n_z:
            raise InvalidArgumentError(f"expected inputs of dimension {self.n_z}, got {zs.shape[1]}")
        if self.n_data == 0:
            sf = np.array([hp.signal_variance for hp in self.hyperparams])
            nb = zs.shape[0]
            return (np.zeros((nb, self.n_w)), np.tile(sf, (nb, 1)) if want_var else None,
                    np.zeros((nb, self.n_w, self.n_z)) if want_jac else None)
        outs = range(self.n_w)
        if workers > 1 and self.n_data > 0 and self.n_w > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda j: self._output(j, zs, want_var, want_jac), outs))
        else:
            results = [self._output(j, zs, want_var, want_jac) for j in outs]
        mean = np.stack([r[0] for r in results], axis=1)
        var = np.stack([r[1] for r in results], axis=1) if want_var else None
        if var is not None and clamp:
            var = np.maximum(var, 0.0)
        jac = np.stack([r[2] for r in results], axis=1) if want_jac else None
        return mean, var, jac

    def scaled(self, signal_factor):
        """Same data with every signal variance multiplied by ``signal_factor``."""
        hps = [hp.scaled(signal_factor) for hp in self.hyperparams]
        if self.n_data == 0:
            return prior_model(hps)
        return fit_gp(GpDataset(self.inputs, self.targets), hps)


def prior_model(hyperparams):
    """A D = 0 model: mean 0, variance equal to the signal variance everywhere."""
    hps = list(hyperparams)
    n_z = hps[0].n_z
    return MultiGpModel(np.zeros((0, n_z)), hps, [np.zeros((0, 0)) for _ in hps], np.zeros((0, len(hps))))


def _as_list(hp, n_w):
    if isinstance(hp, KernelHyperparams):
        return [hp] * n_w
    hp = list(hp)
    if len(hp) != n_w:
        raise InvalidArgumentError(f"need {n_w} hyperparameter sets, got {len(hp)}")
    return hp


def fit_gp(data, hyperparams):
    """Condition one GP per target column on ``data``."""
    hps = _as_list(hyperparams, data.n_w)
    for hp in hps:
        _check_hp(hp, data.n_z)
    if len(data) == 0:
        return prior_model(hps)
    chols, weights = [], []
    cache = {}
    for j, hp in enumerate(hps):
        if hp not in cache:
            cache[hp] = _factor(_gram(data.inputs, hp), hp)
        chol = cache[hp]
        alpha = linalg.cho_solve((chol, True), data.targets[:, j], check_finite=False)
        chols.append(chol)
        weights.append(alpha)
    return MultiGpModel(data.inputs, hps, chols, np.stack(weights, axis=1), targets=data.targets.copy())


def log_marginal_likelihood(data, hp, output_index=0):
    """log p(y | Z, theta) for one output column."""
    _check_hp(hp, data.n_z)
    y = data.targets[:, output_index]
    chol = _factor(_gram(data.inputs, hp), hp)
    alpha = linalg.cho_solve((chol, True), y, check_finite=False)
    d = y.size
    return -0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * d * np.log(2.0 * np.pi)


def log_marginal_likelihood_grad(data, hp, output_index=0):
    """Gradient of the log marginal likelihood w.r.t. ``hp.to_log()``."""
    _check_hp(hp, data.n_z)
    y = data.targets[:, output_index]
    kf = _gram(data.inputs, hp)
    chol = _factor(kf, hp)
    alpha = linalg.cho_solve((chol, True), y, check_finite=False)
    kinv = linalg.cho_solve((chol, True), np.eye(y.size), check_finite=False)
    w = np.outer(alpha, alpha) - kinv
    grad = []
    for d, ls in enumerate(hp.lengthscales):
        diff = data.inputs[:, d][:, None] - data.inputs[:, d][None, :]
        grad.append(0.5 * np.sum(w * kf * diff ** 2) / ls ** 2)
    grad.append(0.5 * np.sum(w * kf))
    grad.append(0.5 * hp.noise_variance * np.trace(w))
    return np.array(grad)


def optimize_hyperparams(data, hp0, output_index=0, iterations=200, step=0.1):
    """Gradient ascent on log-hyperparameters with step halving on failure."""
    theta = hp0.to_log()
    best = log_marginal_likelihood(data, hp0, output_index)
    for _ in range(iterations):
        g = log_marginal_likelihood_grad(data, KernelHyperparams.from_log(theta), output_index)
        t = step
        while t > 1e-10:
            trial = theta + t * g / max(1.0, np.linalg.norm(g))
            try:
                val = log_marginal_likelihood(data, KernelHyperparams.from_log(trial), output_index)
            except NumericalError:
                val = -np.inf
            if val > best:
                theta, best = trial, val
                break
            t *= 0.5
        else:
            break
    return KernelHyperparams.from_log(theta)


def posterior_mean_cov(model, z):
    """Posterior mean and (clamped) variance of every output at a single input."""
    mean, var, _ = model.evaluate(np.atleast_1d(z)[None, :], want_jac=False)
    return mean[0], var[0]


def posterior_mean_jacobian(model, z):
    """d(posterior mean)/dz, shape (n_w, n_z)."""
    _, _, jac = model.evaluate(np.atleast_1d(z)[None, :], want_var=False)
    return jac[0]


def read_dataset_csv(path):
    """Read a dataset written by :func:`write_dataset_csv` (columns z_*, d_*)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))
    zi = [i for i, h in enumerate(header) if h.startswith("z_")]
    di = [i for i, h in enumerate(header) if h.startswith("d_")]
    return GpDataset(body[:, zi], body[:, di])


def write_dataset_csv(data, path, meta=None):
    with open(path, "w", newline="") as fh:
        for key, val in (meta or data.meta or {}).items():
            fh.write(f"# {key}: {val}\n")
        writer = csv.writer(fh)
        writer.writerow([f"z_{i + 1}" for i in range(data.n_z)] + [f"d_{j + 1}" for j in range(data.n_w)])
        for z, d in zip(data.inputs, data.targets):
            writer.writerow([repr(float(v)) for v in z] + [repr(float(v)) for v in d])
