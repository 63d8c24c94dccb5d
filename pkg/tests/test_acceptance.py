"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are
printed even when output capture is on.
"""

import dataclasses
import time

import numpy as np
import pytest

from zogp.checks import random_stages
from zogp.gp import GpDataset, KernelHyperparams, fit_gp, posterior_mean_cov, posterior_mean_jacobian, \
    prior_model, se_kernel_matrix
from zogp.harness import (
    ExperimentConfig,
    build_chain_ocp,
    excited_state,
    fit_chain_gp,
    generate_training_data,
    pendulum_ocp,
    run_profile_experiment,
    run_scaling_experiment,
    scaling_summary,
)
from zogp.sqp import (
    check_feasibility,
    jacobian_error_norm,
    measure_contraction,
    objective,
    solve_fixed_covariance,
    solve_naive,
    solve_zero_order,
)
from zogp.uncertainty import build_vectorized_system, propagate_covariances, solve_vectorized, tightening_factor

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail, started):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail} "
                  f"({time.perf_counter() - started:.1f} s)")
        return ok

    return emit


def test_01_propagation_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        stages = random_stages(rng, int(rng.integers(1, 11)), n, int(rng.integers(1, n + 1)))
        rec = propagate_covariances(stages).sigmas
        vec = solve_vectorized(*build_vectorized_system(stages), n).sigmas
        worst = max(worst, float(np.max(np.abs(rec - vec))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-11 and elapsed < 10
    assert report(1, "propagation equivalence", ok, f"max deviation {worst:.2e} (<= 1e-11)", t0)


def test_02_zero_order_feasibility(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    worst, failed = 0.0, []
    for n_mass in (3, 4, 5):
        x0 = excited_state(cfg, n_mass)
        gp150 = fit_chain_gp(cfg, generate_training_data(dataclasses.replace(cfg, n_x0=10), n_mass), n_mass)
        for d_size, gp in ((0, None), (150, gp150)):
            assert gp is None or gp.n_data == d_size
            spec = build_chain_ocp(cfg, n_mass, gp, x0)
            it, stats = solve_zero_order(spec)
            res = check_feasibility(spec, it.xs, it.us, it.sigmas).max()
            worst = max(worst, res)
            if not stats.converged or res > 1e-6:
                failed.append((n_mass, d_size))
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 120
    assert report(2, "zero-order feasibility", ok, f"max residual {worst:.2e} (<= 1e-6), failures {failed}", t0)


def test_03_suboptimality_ordering(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    spec = build_chain_ocp(cfg, 3, None, excited_state(cfg, 3))
    zo, s_zo = solve_zero_order(spec)
    nv, s_nv = solve_naive(spec)
    f_zo, f_nv = objective(spec, zo.xs, zo.us), objective(spec, nv.xs, nv.us)
    feas = max(check_feasibility(spec, it.xs, it.us, it.sigmas).max() for it in (zo, nv))
    elapsed = time.perf_counter() - t0
    ok = s_zo.converged and s_nv.converged and f_nv <= f_zo + 1e-6 and feas <= 1e-6 and elapsed < 60
    assert report(3, "suboptimality ordering", ok,
                  f"cost naive {f_nv:.9f} vs zero-order {f_zo:.9f}, max residual {feas:.1e}", t0)


def test_04_scaling_exponents(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(n_mass_sweep=(3, 4, 5, 6, 7), data_sizes=(0,), modes=("zero_order", "naive"))
    rows = run_scaling_experiment(cfg)
    summ = scaling_summary(rows)
    zo = summ["slopes"].get("zero_order", np.nan)
    nv = summ["slopes"].get("naive", np.nan)
    speed = summ["speedup"] or 0.0
    elapsed = time.perf_counter() - t0
    table = ", ".join(f"{r.mode}@{r.n_x}={r.seconds:.2e}" for r in rows)
    ok = 2.0 <= zo <= 4.0 and 4.5 <= nv <= 7.5 and speed >= 50 and elapsed < 900
    assert report(4, "scaling exponents", ok,
                  f"slope zero-order {zo:.2f} (in [2, 4]), naive {nv:.2f} (in [4.5, 7.5]), speed-up "
                  f"{speed:.0f}x at n_x={summ['speedup_n_x']} (>= 50); {table}", t0)


def test_05_contraction(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    below = 0
    kappas = []
    for seed in range(20):
        x0 = excited_state(cfg, 4, np.random.default_rng(seed))
        spec = build_chain_ocp(cfg, 4, None, x0)
        _, stats = solve_zero_order(spec)
        kappa = measure_contraction(stats.step_norms)[1] if stats.converged and stats.iterations >= 3 else np.inf
        kappas.append(kappa)
        below += kappa < 1.0
    elapsed = time.perf_counter() - t0
    ok = below >= 19 and elapsed < 300
    assert report(5, "contraction", ok, f"{below}/20 instances with kappa < 1, max kappa {max(kappas):.3f}", t0)


def test_06_lemma_trend(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    base = build_chain_ocp(cfg, 3, None, excited_state(cfg, 3))
    hp = base.gp.hyperparams[0]
    norms = []
    for s in (1.0, 1e-1, 1e-2):
        gp = prior_model([KernelHyperparams(hp.lengthscales, s * hp.signal_variance, 0.0)] * base.n_w)
        spec = base.replace(w_cov=s * base.w_cov, gp=gp)
        it, stats = solve_zero_order(spec)
        norms.append(jacobian_error_norm(spec, it.xs, it.us, it.sigmas) if stats.converged else np.nan)
    elapsed = time.perf_counter() - t0
    ok = norms[0] > norms[1] > norms[2] and elapsed < 120
    assert report(6, "Jacobian error trend", ok, "norms " + ", ".join(f"{v:.3e}" for v in norms), t0)


def test_07_tightening_factors(report):
    t0 = time.perf_counter()
    g95 = tightening_factor(0.95)
    cheb = tightening_factor(0.5, "chebyshev")
    order = all(tightening_factor(p) < tightening_factor(p, "chebyshev") for p in (0.6, 0.8, 0.9, 0.95, 0.99))
    ok = abs(g95 - 1.64485) <= 1e-4 and cheb == 1.0 and order
    assert report(7, "tightening factors", ok, f"gaussian(0.95) = {g95:.6f}, chebyshev(0.5) = {cheb}", t0)


def test_08_gp_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    n, n_z = 60, 4
    z = rng.uniform(-1, 1, (n, n_z))
    d = np.column_stack([np.sin(z @ rng.standard_normal(n_z)), np.cos(z @ rng.standard_normal(n_z))])
    hps = [KernelHyperparams(rng.uniform(0.5, 1.5, n_z), 1.3, 1e-3), KernelHyperparams(np.ones(n_z), 0.4, 1e-2)]
    model = fit_gp(GpDataset(z, d), hps)
    zq = rng.uniform(-1, 1, (100, n_z))
    mean, var, _ = model.evaluate(zq, want_jac=False, clamp=False)
    moment_err = 0.0
    for j, hp in enumerate(hps):
        k_inv = np.linalg.inv(se_kernel_matrix(z, z, hp) + hp.noise_variance * np.eye(n))
        ks = se_kernel_matrix(zq, z, hp)
        moment_err = max(moment_err, np.max(np.abs(mean[:, j] - ks @ k_inv @ d[:, j])),
                         np.max(np.abs(var[:, j] - (hp.signal_variance - np.einsum("ij,jk,ik->i", ks, k_inv, ks)))))
    jac_err = 0.0
    h = 1e-6
    for zp in zq:
        jac = posterior_mean_jacobian(model, zp)
        fd = np.zeros_like(jac)
        for k in range(n_z):
            e = np.zeros(n_z)
            e[k] = h
            fd[:, k] = (posterior_mean_cov(model, zp + e)[0] - posterior_mean_cov(model, zp - e)[0]) / (2 * h)
        jac_err = max(jac_err, np.max(np.abs(jac - fd)) / max(np.max(np.abs(jac)), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = moment_err <= 1e-9 and jac_err <= 1e-5 and elapsed < 30
    assert report(8, "GP correctness", ok,
                  f"moments vs dense inverse {moment_err:.2e} (<= 1e-9), Jacobian rel. error {jac_err:.2e} "
                  f"(<= 1e-5)", t0)


def test_09_fixed_covariance_heuristic(report):
    t0 = time.perf_counter()
    spec = pendulum_ocp()
    zo, s_zo = solve_zero_order(spec)
    fx, s_fx = solve_fixed_covariance(spec)
    r_zo = check_feasibility(spec, zo.xs, zo.us, zo.sigmas).covariance
    r_fx = check_feasibility(spec, fx.xs, fx.us, fx.sigmas).covariance
    ok = s_zo.converged and r_zo <= 1e-6 and r_fx >= 1e-3
    assert report(9, "fixed-covariance heuristic", ok,
                  f"covariance residual heuristic {r_fx:.2e} (>= 1e-3), zero-order {r_zo:.2e} (<= 1e-6)", t0)


def test_10_profile_shares(report):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(data_sizes=(0, 1500))
    prof = run_profile_experiment(cfg, n_mass=7)
    d0 = prof[(0, 1)]
    d1500 = prof[(1500, 1)]
    largest = max(d1500, key=lambda c: d1500[c][1])
    share0 = d0["gp_eval"][1]
    elapsed = time.perf_counter() - t0
    ok = largest == "gp_eval" and share0 < 0.05 and elapsed < 600
    shares = ", ".join(f"{c} {100 * v[1]:.1f}%" for c, v in d1500.items())
    assert report(10, "profile shares", ok,
                  f"D=1500 largest category {largest} ({shares}); D=0 gp_eval share {100 * share0:.1f}% (< 5%)",
                  t0)
