"""Fast self-checks run by ``zogp check``.

Each check compares a production routine against an independent
reference on small seeded instances and reports the worst deviation.
"""

from dataclasses import dataclass

import numpy as np

from .dynamics import ChainConfig
from .gp import GpDataset, KernelHyperparams, fit_gp, se_kernel_matrix
from .qp import QpSettings, ocp_to_general, random_ocp_qp, solve_dense_kkt, solve_ocp_qp
from .uncertainty import (
    StageLinearization,
    build_vectorized_system,
    propagate_covariances,
    solve_vectorized,
    tightening_factor,
)

__all__ = ["CheckResult", "random_stages", "run_property_suite"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (limit {self.limit:.1e})"


def random_stages(rng, horizon, n_x, n_w=None):
    """Random stage data with contractive-ish A and non-negative diagonal noise."""
    n_w = n_x if n_w is None else n_w
    out = []
    for _ in range(horizon):
        a = rng.standard_normal((n_x, n_x)) / np.sqrt(n_x)
        b = rng.standard_normal((n_x, n_w))
        out.append(StageLinearization(a, b, rng.uniform(0, 1, n_w), rng.uniform(0, 0.1, n_w)))
    return out


def _propagation(rng, count):
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 9))
        stages = random_stages(rng, int(rng.integers(1, 11)), n, int(rng.integers(1, n + 1)))
        rec = propagate_covariances(stages).sigmas
        vec = solve_vectorized(*build_vectorized_system(stages), n).sigmas
        worst = max(worst, float(np.max(np.abs(rec - vec))))
    return CheckResult("covariance recursion vs vectorized system", worst <= 1e-11, worst, 1e-11)


def _qp(rng, count):
    worst = 0.0
    for _ in range(count):
        qp = random_ocp_qp(rng, int(rng.integers(1, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                           int(rng.integers(0, 4)))
        a = solve_ocp_qp(qp, QpSettings(tol=1e-9))
        b = solve_dense_kkt(ocp_to_general(qp))
        worst = max(worst, abs(a.objective - b.objective))
    return CheckResult("Riccati interior point vs dense active set (objective)", worst <= 1e-7, worst, 1e-7)


def _gp(rng):
    n_z, n = 3, 25
    z = rng.uniform(-1, 1, (n, n_z))
    d = np.sin(z @ np.array([1.0, -2.0, 0.5]))[:, None]
    hp = KernelHyperparams(rng.uniform(0.5, 1.5, n_z), 1.3, 1e-3)
    model = fit_gp(GpDataset(z, d), [hp])
    zq = rng.uniform(-1, 1, (10, n_z))
    mean, var, _ = model.evaluate(zq, want_jac=False)
    k_inv = np.linalg.inv(se_kernel_matrix(z, z, hp) + hp.noise_variance * np.eye(n))
    ks = se_kernel_matrix(zq, z, hp)
    ref_m = ks @ k_inv @ d[:, 0]
    ref_v = hp.signal_variance - np.einsum("ij,jk,ik->i", ks, k_inv, ks)
    err = float(max(np.max(np.abs(mean[:, 0] - ref_m)), np.max(np.abs(var[:, 0] - ref_v))))
    return CheckResult("GP posterior vs dense inverse", err <= 1e-9, err, 1e-9)


def _tightening():
    err = abs(tightening_factor(0.95) - 1.6448536269514722)
    ok = err <= 1e-4 and tightening_factor(0.5, "chebyshev") == 1.0
    ok = ok and all(tightening_factor(p) < tightening_factor(p, "chebyshev") for p in (0.6, 0.8, 0.9, 0.95, 0.99))
    return CheckResult("tightening factors", ok, err, 1e-4)


def _chain_feasibility():
    from .harness import ExperimentConfig, build_chain_ocp, excited_state
    from .sqp import check_feasibility, solve_zero_order

    cfg = ExperimentConfig(chain=ChainConfig(n_mass=3))
    spec = build_chain_ocp(cfg, 3, None, excited_state(cfg, 3))
    it, stats = solve_zero_order(spec)
    worst = check_feasibility(spec, it.xs, it.us, it.sigmas).max() if stats.converged else np.inf
    return CheckResult("zero-order feasibility at convergence (chain, 3 masses)", worst <= 1e-6, worst, 1e-6)


def run_property_suite(seed=0, count=20):
    """Run all checks; returns a list of :class:`CheckResult`."""
    rng = np.random.default_rng(seed)
    return [_propagation(rng, count), _qp(rng, count), _gp(rng), _tightening(), _chain_feasibility()]
