import dataclasses

import numpy as np
import pytest

from conftest import central_diff
from zogp.dynamics import DiscreteModel, LinearOde
from zogp.errors import InvalidArgumentError, UnsupportedConfigurationError
from zogp.gp import FeatureMap, GpDataset, KernelHyperparams, fit_gp, prior_model
from zogp.harness import ExperimentConfig, build_chain_ocp, chain_feature_map, excited_state
from zogp.sqp import (
    ChanceConstraint,
    Iterate,
    SolverOptions,
    check_feasibility,
    dense_jacobian_error_norm,
    initial_guess,
    jacobian_error_norm,
    linearize_stage,
    measure_contraction,
    objective,
    solve_naive,
    solve_zero_order,
    write_trace_csv,
    zero_order_iteration,
)


def lqr_spec(rng, horizon=8, w_var=0.01, sigma_f=0.0, constraints=()):
    a = np.array([[0.0, 1.0], [-2.0, -0.3]])
    model = DiscreteModel(LinearOde(a, np.array([[0.0], [1.0]])), 0.1)
    gp = prior_model([KernelHyperparams(np.ones(3), sigma_f, 0.0)])
    from zogp.sqp import OcpSpec

    return OcpSpec(model, gp, FeatureMap([0, 1, 2], 2, 1), [[0.0], [1.0]], [w_var], np.diag([1.0, 0.1]),
                   [[0.05]], np.diag([2.0, 0.2]), np.zeros(2), np.zeros(1), rng.standard_normal(2), horizon,
                   list(constraints))


def riccati_rollout(spec):
    """Backward Riccati recursion for the regulator, then forward simulation."""
    _, ad, bd = spec.model.batch(np.zeros(2), np.zeros(1))
    ad, bd = ad[0], bd[0]
    p = spec.q_terminal
    gains = []
    for _ in range(spec.horizon):
        k = np.linalg.solve(spec.r_mat + bd.T @ p @ bd, bd.T @ p @ ad)
        p = spec.q_mat + ad.T @ p @ (ad - bd @ k)
        gains.append(k)
    xs, us = [spec.x_current], []
    for k in reversed(gains):
        us.append(-k @ xs[-1])
        xs.append(ad @ xs[-1] + bd @ us[-1])
    return np.array(xs), np.array(us)


@pytest.fixture(scope="module")
def chain3_solution(chain3):
    _, spec = chain3
    it, stats = solve_zero_order(spec)
    return spec, it, stats


def fitted_chain_gp(cfg, spec, rng, n=30):
    chain = cfg.chain_for(3)
    fmap = chain_feature_map(chain)
    xs = spec.x_current + 0.01 * rng.standard_normal((n, chain.n_x))
    z = fmap(xs, 0.1 * rng.standard_normal((n, 3)))
    d = 1e-3 * np.sin(50 * z[:, :1] + z[:, 1:2]) * np.ones((1, chain.n_w))
    hp = KernelHyperparams(np.full(fmap.n_z, 0.05), 1e-4, 1e-6)
    return fit_gp(GpDataset(z, d), [hp] * chain.n_w)


class TestSpec:
    def test_rejects_bad_probability(self):
        with pytest.raises(InvalidArgumentError):
            ChanceConstraint([1.0, 0.0], 0.0, prob=0.0)

    def test_hard_constraint_has_no_backoff(self):
        assert ChanceConstraint([1.0], 0.0, prob=1.0).alpha == 0.0

    def test_rejects_indefinite_weight(self, rng):
        spec = lqr_spec(rng)
        with pytest.raises(InvalidArgumentError):
            spec.replace(q_mat=np.diag([1.0, -1.0]))


class TestLinearization:
    def test_prior_gp_leaves_sensitivity(self, chain3):
        _, spec = chain3
        x, u = spec.x_current, np.array([0.1, 0.0, -0.1])
        st = linearize_stage(spec, x, u, np.zeros((9, 9)))
        _, ax, bu = spec.model.batch(x, u)
        assert np.array_equal(st.a_tilde, ax[0]) and np.array_equal(st.b_tilde, bu[0])

    def test_gp_mean_jacobian_finite_differences(self, chain3, rng):
        cfg, spec = chain3
        spec = spec.replace(gp=fitted_chain_gp(cfg, spec, rng))
        x, u = spec.x_current + 0.005 * rng.standard_normal(9), 0.1 * rng.standard_normal(3)

        def f(y):
            mean = spec.gp.evaluate(spec.feature_map(y[:9], y[9:]), False, False)[0][0]
            return spec.model.batch(y[:9], y[9:], sensitivities=False)[0][0] + spec.b_mat @ mean

        st = linearize_stage(spec, x, u, np.zeros((9, 9)))
        ana = np.hstack([st.a_tilde, st.b_tilde])
        fd = central_diff(f, np.concatenate([x, u]), h=1e-7)
        assert np.max(np.abs(ana - fd)) / np.max(np.abs(ana)) <= 1e-5

    def test_roll_in_is_feasible(self, chain3):
        _, spec = chain3
        it = initial_guess(spec)
        rep = check_feasibility(spec, it.xs, it.us, it.sigmas)
        assert rep.dynamics <= 1e-12 and rep.covariance <= 1e-15 and rep.initial == 0.0


class TestZeroOrder:
    def test_lqr_one_step(self, rng):
        spec = lqr_spec(rng)
        it, stats = solve_zero_order(spec)
        xs, us = riccati_rollout(spec)
        assert stats.converged and stats.iterations == 2 and stats.step_norms[1] <= 1e-8
        assert np.max(np.abs(it.xs - xs)) <= 1e-8 and np.max(np.abs(it.us - us)) <= 1e-8

    def test_fixed_point(self, chain3_solution):
        spec, it, _ = chain3_solution
        again = zero_order_iteration(spec, it)
        assert again.step_norm <= 1e-8
        assert np.max(np.abs(again.sigmas.sigmas - it.sigmas.sigmas)) <= 1e-12

    def test_chain_feasible_at_convergence(self, chain3_solution):
        spec, it, stats = chain3_solution
        assert stats.converged
        assert check_feasibility(spec, it.xs, it.us, it.sigmas).max() <= 1e-6

    def test_step_norms_decrease(self, chain3_solution):
        _, _, stats = chain3_solution
        s = np.array(stats.step_norms)
        # drop the final step, which sits at round-off level
        assert np.all(np.diff(s[1:-1]) < 0)

    def test_contraction_below_one(self, chain3_solution):
        _, _, stats = chain3_solution
        assert measure_contraction(stats.step_norms)[1] < 1.0

    def test_stats_accounting(self, chain3_solution):
        _, _, stats = chain3_solution
        assert all(v >= 0 for v in stats.times.values())
        assert sum(stats.times.values()) <= 1.05 * stats.total_time
        assert sum(stats.shares().values()) == pytest.approx(1.0)

    def test_deterministic(self, chain3, chain3_solution):
        _, spec = chain3
        it, stats = solve_zero_order(spec)
        _, ref, ref_stats = chain3_solution
        assert np.array_equal(it.xs, ref.xs) and np.array_equal(it.us, ref.us)
        assert np.array_equal(it.sigmas.sigmas, ref.sigmas.sigmas)
        assert stats.step_norms == ref_stats.step_norms

    def test_perturbed_mean_detected(self, chain3_solution):
        spec, it, _ = chain3_solution
        xs = it.xs.copy()
        xs[3, 4] += 0.1
        assert check_feasibility(spec, xs, it.us, it.sigmas).dynamics >= 0.05

    def test_large_noise_runs(self, chain3):
        cfg, spec = chain3
        spec = spec.replace(w_cov=spec.w_cov * 1e4)
        _, stats = solve_zero_order(spec, options=SolverOptions(max_iter=30))
        assert isinstance(stats.converged, bool)

    def test_trace_csv(self, chain3_solution, tmp_path):
        _, _, stats = chain3_solution
        write_trace_csv(stats, tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0].startswith("iteration,step_norm") and len(lines) == stats.iterations + 1


class TestNaive:
    def test_lqr_matches_zero_order(self, rng):
        spec = lqr_spec(rng)
        a, _ = solve_zero_order(spec, options=SolverOptions(max_iter=1))
        b, _ = solve_naive(spec, options=SolverOptions(mode="naive", max_iter=1))
        assert np.max(np.abs(a.xs - b.xs)) <= 1e-9 and np.max(np.abs(a.us - b.us)) <= 1e-9
        assert np.max(np.abs(a.sigmas.sigmas - b.sigmas.sigmas)) <= 1e-9

    def test_certainty_reduces_to_nominal(self, chain3):
        cfg, spec = chain3
        spec = spec.replace(w_cov=np.zeros(3), constraints=[], horizon=5,
                            gp=prior_model([KernelHyperparams(spec.gp.hyperparams[0].lengthscales, 0.0, 0.0)] * 3))
        nominal = build_chain_ocp(dataclasses.replace(cfg, horizon=5), 3, None, spec.x_current, mode="nominal")
        nominal = nominal.replace(constraints=[])
        ref, _ = solve_zero_order(nominal)
        a, sa = solve_zero_order(spec)
        b, sb = solve_naive(spec)
        assert sa.converged and sb.converged
        assert np.max(np.abs(a.xs - ref.xs)) <= 1e-8 and np.max(np.abs(b.xs - ref.xs)) <= 1e-8
        assert not b.sigmas.sigmas.any()

    def test_optimal_versus_zero_order(self, chain3):
        _, spec = chain3
        spec = spec.replace(horizon=5)
        a, sa = solve_zero_order(spec)
        b, sb = solve_naive(spec)
        assert sa.converged and sb.converged
        assert objective(spec, b.xs, b.us) <= objective(spec, a.xs, a.us) + 1e-6
        assert check_feasibility(spec, b.xs, b.us, b.sigmas).max() <= 1e-6

    def test_rejects_data(self, chain3, rng):
        cfg, spec = chain3
        with pytest.raises(UnsupportedConfigurationError):
            solve_naive(spec.replace(gp=fitted_chain_gp(cfg, spec, rng)))


class TestDiagnostics:
    def test_geometric_contraction(self):
        ratios, kappa = measure_contraction(0.3 ** np.arange(12))
        assert kappa == pytest.approx(0.3, abs=0.05) and np.allclose(ratios[:6], 0.3, atol=1e-3)

    def test_short_history(self):
        ratios, kappa = measure_contraction([1.0, 1e-12, 0.0])
        assert len(ratios) == 2 and kappa < 1e-11
        with pytest.raises(InvalidArgumentError):
            measure_contraction([1.0, 0.1])

    def test_linear_certain_system_has_zero_norm(self, rng):
        spec = lqr_spec(rng, w_var=0.0)
        it, _ = solve_zero_order(spec)
        assert jacobian_error_norm(spec, it.xs, it.us, it.sigmas) == 0.0

    def test_power_iteration_matches_dense(self, chain3_solution):
        spec, it, _ = chain3_solution
        est = jacobian_error_norm(spec, it.xs, it.us, it.sigmas)
        ref = dense_jacobian_error_norm(spec, it.xs, it.us, it.sigmas)
        assert ref > 0 and abs(est - ref) <= 0.1 * ref

    def test_norm_shrinks_with_uncertainty(self, chain3):
        cfg, spec = chain3
        hp = spec.gp.hyperparams[0]
        norms = []
        for s in (1.0, 1e-1, 1e-2):
            gp = prior_model([KernelHyperparams(hp.lengthscales, s * hp.signal_variance, 0.0)] * spec.n_w)
            sp = spec.replace(w_cov=s * spec.w_cov, gp=gp)
            it, stats = solve_zero_order(sp)
            assert stats.converged
            norms.append(jacobian_error_norm(sp, it.xs, it.us, it.sigmas))
        assert norms[0] > norms[1] > norms[2] > 0
