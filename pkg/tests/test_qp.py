import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zogp.errors import InvalidArgumentError
from zogp.qp import (
    GeneralQp,
    OcpQp,
    QpSettings,
    dump_qp,
    load_qp,
    ocp_to_general,
    random_ocp_qp,
    solve_dense_kkt,
    solve_ocp_qp,
)


def lqr_qp(rng, horizon=6, n_x=4, n_u=2):
    qp = random_ocp_qp(rng, horizon, n_x, n_u, 1)
    return OcpQp.unconstrained(qp.q_xx, qp.q_uu, qp.q_xu, qp.g_x, qp.g_u, qp.dyn_a, qp.dyn_b, qp.dyn_c, qp.x0)


def dense_kkt_oracle(gen):
    """Direct solve of the equality-constrained KKT system."""
    n, m = gen.n_var, gen.a_eq.shape[0]
    k = np.block([[gen.h_mat, gen.a_eq.T], [gen.a_eq, np.zeros((m, m))]])
    sol = np.linalg.solve(k, np.concatenate([-gen.q, gen.b_eq]))
    return sol[:n], sol[n:]


def scalar_qp(ub):
    """x_1 = x_0 + u, x_0 = 0, cost u^2 - 2u (+0.5 x_0^2), constraint u <= ub at stage 0."""
    one = np.ones((1, 1, 1))
    return OcpQp(np.ones((2, 1, 1)), one, np.zeros((1, 1, 1)), [[0.0], [0.0]], [[-2.0]], one, one, [[0.0]],
                 np.zeros((2, 1, 1)), np.array([[[1.0]], [[0.0]]]), [[ub], [1.0]], [[True], [False]], [0.0])


class TestRiccatiIp:
    def test_lqr_matches_dense_kkt(self, rng):
        for _ in range(10):
            qp = lqr_qp(rng, int(rng.integers(1, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 4)))
            sol = solve_ocp_qp(qp)
            x_ref, nu_ref = dense_kkt_oracle(ocp_to_general(qp))
            assert sol.status == "optimal"
            assert np.max(np.abs(sol.delta_y - x_ref)) <= 1e-9
            assert np.max(np.abs(sol.eq_multipliers.ravel() - nu_ref)) <= 1e-8 * max(1, np.max(np.abs(nu_ref)))

    def test_zero_data_gives_zero_step(self, rng):
        qp = random_ocp_qp(rng, 5, 3, 2, 2)
        qp.g_x[:] = 0.0
        qp.g_u[:] = 0.0
        qp.dyn_c[:] = 0.0
        qp.x0[:] = 0.0
        qp.ub[:] = np.abs(qp.ub) + 0.1
        sol = solve_ocp_qp(qp)
        # the interior iterate sits O(mu / slack) away from the exact zero step
        assert sol.status == "optimal" and np.max(np.abs(sol.delta_y)) <= 1e-6

    def test_single_active_inequality(self):
        free = solve_ocp_qp(scalar_qp(5.0))
        assert free.u[0, 0] == pytest.approx(1.0, abs=1e-8) and free.ineq_multipliers[0, 0] <= 1e-8
        # active set {u <= 0.5}: stationarity 2u - 2 + lam = 0 gives lam = 1
        sol = solve_ocp_qp(scalar_qp(0.5))
        assert sol.status == "optimal"
        assert sol.u[0, 0] == pytest.approx(0.5, abs=1e-8)
        assert sol.ineq_multipliers[0, 0] == pytest.approx(1.0, abs=1e-7)
        assert sol.objective == pytest.approx(-0.75, abs=1e-8)

    def test_kkt_conditions_random(self, rng):
        for _ in range(20):
            qp = random_ocp_qp(rng, int(rng.integers(1, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                               int(rng.integers(1, 4)))
            sol = solve_ocp_qp(qp)
            assert sol.status == "optimal" and sol.kkt_residual <= 1e-8
            assert np.all(sol.ineq_multipliers >= 0)
            gen = ocp_to_general(qp)
            y = sol.delta_y
            lam = sol.ineq_multipliers[qp.mask]
            assert np.max(gen.g_in @ y - gen.h_in) <= 1e-8
            assert np.max(np.abs(lam * (gen.h_in - gen.g_in @ y))) <= 1e-7
            stat = gen.h_mat @ y + gen.q + gen.a_eq.T @ sol.eq_multipliers.ravel() + gen.g_in.T @ lam
            assert np.max(np.abs(stat)) <= 1e-7 * max(1, np.max(np.abs(gen.q)))

    def test_infeasible_bounds(self):
        qp = scalar_qp(0.5)
        qp = OcpQp(qp.q_xx, qp.q_uu, qp.q_xu, qp.g_x, qp.g_u, qp.dyn_a, qp.dyn_b, qp.dyn_c,
                   np.zeros((2, 2, 1)), np.array([[[1.0], [-1.0]], [[0.0], [0.0]]]), [[-1.0, -1.0], [1.0, 1.0]],
                   [[True, True], [False, False]], qp.x0)
        assert solve_ocp_qp(qp).status in ("infeasible", "max_iter")

    def test_iteration_cap(self, rng):
        sol = solve_ocp_qp(random_ocp_qp(rng, 8, 6, 2, 3), QpSettings(max_iter=2))
        assert sol.status == "max_iter" and sol.iterations <= 2

    def test_shape_validation(self, rng):
        qp = random_ocp_qp(rng, 3, 2, 1, 1)
        with pytest.raises(InvalidArgumentError):
            OcpQp(qp.q_xx[:-1], qp.q_uu, qp.q_xu, qp.g_x, qp.g_u, qp.dyn_a, qp.dyn_b, qp.dyn_c,
                  qp.c_x, qp.c_u, qp.ub, qp.mask, qp.x0)


class TestDenseActiveSet:
    def test_equality_only(self, rng):
        m = rng.standard_normal((6, 6))
        gen = GeneralQp(m @ m.T + np.eye(6), rng.standard_normal(6), rng.standard_normal((2, 6)),
                        rng.standard_normal(2))
        sol = solve_dense_kkt(gen)
        assert sol.factorizations == 1 and sol.kkt_residual <= 1e-10
        assert np.max(np.abs(gen.a_eq @ sol.x - gen.b_eq)) <= 1e-10

    def test_hand_solved_two_variables(self):
        # min 1/2|x|^2 - x1 - x2 s.t. x1 + x2 <= 1: active, x = (1/2, 1/2), lam = 1/2
        gen = GeneralQp(np.eye(2), [-1.0, -1.0], g_in=[[1.0, 1.0], [-1.0, 0.0]], h_in=[1.0, 3.0])
        sol = solve_dense_kkt(gen)
        assert np.allclose(sol.x, [0.5, 0.5], atol=1e-14)
        assert np.allclose(sol.ineq_multipliers, [0.5, 0.0], atol=1e-14)
        assert sol.active_set == [0]

    def test_infeasible_equalities(self):
        gen = GeneralQp(np.eye(2), np.zeros(2), [[1.0, 0.0], [1.0, 0.0]], [0.0, 1.0])
        assert solve_dense_kkt(gen).status == "infeasible"

    def test_infeasible_inequalities(self):
        gen = GeneralQp(np.eye(1), np.zeros(1), g_in=[[1.0], [-1.0]], h_in=[-1.0, -1.0])
        assert solve_dense_kkt(gen).status == "infeasible"

    def test_warm_start_needs_no_pivots(self, rng):
        gen = ocp_to_general(random_ocp_qp(rng, 6, 4, 2, 3))
        cold = solve_dense_kkt(gen)
        warm = solve_dense_kkt(gen, active_set=cold.active_set)
        assert warm.iterations == 0 and np.allclose(warm.x, cold.x, atol=1e-10)

    def test_agreement_with_interior_point(self, rng):
        worst = 0.0
        for _ in range(200):
            qp = random_ocp_qp(rng, int(rng.integers(1, 11)), int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                               int(rng.integers(0, 4)))
            # tol 1e-9 keeps the duality gap well below the objective tolerance; a few
            # instances stall at their round-off floor just above it, so check the residual
            a = solve_ocp_qp(qp, QpSettings(tol=1e-9))
            b = solve_dense_kkt(ocp_to_general(qp))
            assert a.kkt_residual <= 1e-8 and b.status == "optimal"
            worst = max(worst, abs(a.objective - b.objective))
        assert worst <= 1e-7

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.integers(0, 15))
    def test_kkt_point(self, seed, n, n_in):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((n, n))
        x_feas = rng.standard_normal(n)
        g = rng.standard_normal((n_in, n))
        gen = GeneralQp(m @ m.T + 0.1 * np.eye(n), rng.standard_normal(n), g_in=g,
                        h_in=g @ x_feas + rng.uniform(0, 1, n_in))
        sol = solve_dense_kkt(gen)
        assert sol.status == "optimal"
        assert np.all(sol.ineq_multipliers >= 0)
        assert np.max(g @ sol.x - gen.h_in, initial=0) <= 1e-8
        assert np.max(np.abs(sol.ineq_multipliers * (g @ sol.x - gen.h_in)), initial=0) <= 1e-8
        assert sol.kkt_residual <= 1e-8 * max(1, np.max(np.abs(gen.q)))


class TestDump:
    def test_roundtrip(self, rng, tmp_path):
        qp = random_ocp_qp(rng, 4, 3, 2, 2)
        qp.mask[1, 0] = False
        dump_qp(qp, tmp_path / "a.qp")
        back = load_qp(tmp_path / "a.qp")
        for name in ("q_xx", "q_uu", "q_xu", "g_x", "g_u", "dyn_a", "dyn_b", "dyn_c", "c_x", "c_u", "ub", "mask",
                     "x0"):
            assert np.array_equal(getattr(back, name), getattr(qp, name)), name
        assert solve_ocp_qp(back).objective == solve_ocp_qp(qp).objective

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.qp").write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(InvalidArgumentError):
            load_qp(tmp_path / "b.qp")


def per_iteration_time(qp, repeats=7):
    solve_ocp_qp(qp)
    samples = []
    for _ in range(repeats):
        t = time.perf_counter()
        sol = solve_ocp_qp(qp)
        samples.append((time.perf_counter() - t) / max(sol.iterations, 1))
    return float(np.median(samples))


class TestComplexity:
    def test_linear_in_horizon(self, rng):
        base = random_ocp_qp(rng, 20, 16, 4, 4)
        double = random_ocp_qp(rng, 40, 16, 4, 4)
        assert per_iteration_time(double) <= 2.5 * per_iteration_time(base)

    def test_cubic_in_state_dimension(self, rng):
        sizes = np.array([32, 48, 64, 96, 128])
        times = [per_iteration_time(random_ocp_qp(rng, 10, int(n), int(n) // 4, 4)) for n in sizes]
        slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
        assert 2.0 <= slope <= 4.0, slope
