import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zogp.checks import random_stages
from zogp.errors import InvalidArgumentError
from zogp.uncertainty import (
    StageLinearization,
    backoffs,
    build_vectorized_system,
    propagate_covariances,
    solve_vectorized,
    tighten,
    tightening_factor,
    unvec,
    vec,
)


def bisect_quantile(p):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if stats.norm.cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestTighteningFactor:
    def test_chebyshev_half(self):
        assert tightening_factor(0.5, "chebyshev") == 1.0

    def test_gaussian_median(self):
        assert tightening_factor(0.5) == 0.0

    @pytest.mark.parametrize("p", [0.6, 0.8, 0.9, 0.95, 0.99, 0.999])
    def test_gaussian_matches_bisection(self, p):
        assert tightening_factor(p) == pytest.approx(bisect_quantile(p), abs=1e-10)

    def test_known_value(self):
        assert tightening_factor(0.95) == pytest.approx(1.64485, abs=1e-4)

    @given(st.floats(0.5, 1.0, exclude_min=True, exclude_max=True))
    def test_gaussian_less_conservative(self, p):
        assert tightening_factor(p) < tightening_factor(p, "chebyshev")

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_out_of_range(self, p):
        with pytest.raises(InvalidArgumentError):
            tightening_factor(p)

    def test_unknown_mode(self):
        with pytest.raises(InvalidArgumentError):
            tightening_factor(0.9, "uniform")


class TestPropagation:
    def test_identity_without_noise(self):
        stages = [StageLinearization(np.eye(3), np.zeros((3, 2)), np.ones(2), np.ones(2))] * 4
        assert not propagate_covariances(stages).sigmas.any()

    def test_memoryless(self, rng):
        q = np.diag(rng.uniform(0, 1, 3))
        stages = [StageLinearization(np.zeros((3, 3)), np.eye(3), q, np.zeros(3))] * 5
        sig = propagate_covariances(stages).sigmas
        assert not sig[0].any()
        assert all(np.array_equal(s, q) for s in sig[1:])

    @pytest.mark.parametrize("a", [0.0, 0.5, -0.9, 1.0, 1.3])
    def test_geometric_series(self, a):
        q = 0.7
        stages = [StageLinearization([[a]], [[1.0]], [q / 2], [q / 2])] * 8
        sig = propagate_covariances(stages).sigmas[:, 0, 0]
        ref = [q * sum(a ** (2 * k) for k in range(i)) for i in range(9)]
        assert np.allclose(sig, ref, rtol=1e-14, atol=0)

    def test_initial_covariance(self, rng):
        m = rng.standard_normal((2, 2))
        s0 = m @ m.T
        st_ = StageLinearization(2 * np.eye(2), np.zeros((2, 1)), [0.0], [0.0])
        assert np.allclose(propagate_covariances([st_], s0).sigmas[1], 4 * s0, rtol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            propagate_covariances([StageLinearization([[np.nan]], [[1.0]], [0.1], [0.1])])

    def test_invalid_covariances(self):
        with pytest.raises(InvalidArgumentError):
            StageLinearization(np.eye(2), np.eye(2), [-0.1, 0.1], [0.0, 0.0])
        with pytest.raises(InvalidArgumentError):
            StageLinearization(np.eye(2), np.eye(2), [[0.1, 0.01], [0.01, 0.1]], [0.0, 0.0])

    def test_symmetric_psd(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 9))
            sig = propagate_covariances(random_stages(rng, int(rng.integers(1, 11)), n)).sigmas
            assert np.array_equal(sig, np.transpose(sig, (0, 2, 1)))
            assert min(np.min(np.linalg.eigvalsh(s)) for s in sig) >= -1e-10


class TestVectorized:
    def test_identity_kronecker(self):
        a_mat, b_vec = build_vectorized_system([StageLinearization(np.eye(2), np.zeros((2, 1)), [0.0], [0.0])])
        ref = np.block([[np.eye(4), np.zeros((4, 4))], [-np.eye(4), np.eye(4)]])
        assert np.array_equal(a_mat.toarray(), ref) and not b_vec.any()

    def test_scalar_block(self):
        a_mat, b_vec = build_vectorized_system([StageLinearization([[0.6]], [[1.0]], [0.2], [0.1])])
        assert a_mat.toarray()[1, 0] == pytest.approx(-0.36)
        sig = solve_vectorized(a_mat, b_vec, 1).sigmas
        assert sig[1, 0, 0] == pytest.approx(0.3, rel=1e-15)

    def test_zero_rhs(self, rng):
        a_mat, _ = build_vectorized_system(random_stages(rng, 4, 3))
        assert not solve_vectorized(a_mat, np.zeros(a_mat.shape[0]), 3).sigmas.any()

    def test_unit_lower_triangular(self, rng):
        a_mat = build_vectorized_system(random_stages(rng, 3, 2))[0].toarray()
        assert np.array_equal(np.diag(a_mat), np.ones(16)) and not np.triu(a_mat, 1).any()

    def test_residual_of_recursion(self, rng):
        stages = random_stages(rng, 6, 4, 2)
        a_mat, b_vec = build_vectorized_system(stages)
        p_rec = propagate_covariances(stages).vec()
        assert np.max(np.abs(a_mat @ p_rec + b_vec)) <= 1e-12

    def test_equivalence_random(self, rng):
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 9))
            stages = random_stages(rng, int(rng.integers(1, 11)), n, int(rng.integers(1, n + 1)))
            rec = propagate_covariances(stages).sigmas
            vect = solve_vectorized(*build_vectorized_system(stages), n).sigmas
            worst = max(worst, np.max(np.abs(rec - vect)))
        assert worst <= 1e-11

    def test_vec_roundtrip(self, rng):
        m = rng.standard_normal((3, 3))
        assert np.array_equal(unvec(vec(m), 3), m)
        # column-major vec identity: vec(A X B) = (B^T kron A) vec(X)
        a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        assert np.allclose(vec(a @ m @ b), np.kron(b.T, a) @ vec(m), atol=1e-13)


class TestTighten:
    def test_zero_covariance(self):
        tc = tighten(-0.3, [0.0, -1.0, 0.0, 2.0], np.zeros((3, 3)), 1.64)
        assert tc.backoff == 0.0 and tc.tightened == -0.3

    def test_diagonal_pick(self):
        tc = tighten(0.0, [0.0, 1.0, 0.0], np.diag([1.0, 0.25, 4.0]), 2.0)
        assert tc.backoff == pytest.approx(1.0, rel=1e-15)

    def test_input_part_ignored(self):
        sig = np.diag([0.04, 0.09])
        assert tighten(0.0, [1.0, 0.0, 5.0], sig, 1.0).backoff == pytest.approx(0.2)

    def test_degenerate_quadratic_form(self):
        assert tighten(0.0, [1.0], [[1e-15]], 3.0).backoff == 0.0

    def test_wall_row_dense_oracle(self, rng):
        m = rng.standard_normal((6, 6))
        sig = m @ m.T
        c = np.zeros(6)
        c[1] = -1.0
        tc = tighten(0.1, c, sig, 1.5)
        assert tc.backoff == pytest.approx(1.5 * np.sqrt(c @ sig @ c), rel=1e-14)
        assert backoffs(c[None], sig[None], 1.5)[0, 0] == pytest.approx(tc.backoff, rel=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 100.0))
    def test_noise_scaling_monotone(self, seed, scale):
        rng = np.random.default_rng(seed)
        stages = random_stages(rng, 5, 3, 2)
        scaled = [StageLinearization(s.a_tilde, s.b_mat, scale * s.gp_cov, scale * s.w_cov) for s in stages]
        rows = rng.standard_normal((4, 3))
        b0 = backoffs(rows, propagate_covariances(stages).sigmas, 1.0)
        b1 = backoffs(rows, propagate_covariances(scaled).sigmas, 1.0)
        assert np.all(b1 >= b0 * (1 - 1e-12))
