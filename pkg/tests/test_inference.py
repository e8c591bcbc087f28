import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from assocmodel import (ConsistencyError, IdentifiabilityError, Lambda, conf_intervals,
                        exact_moments, expected_hessian, expected_score, fit_table, info_set,
                        make_log_bilinear, safe_inverse, sandwich_cov, w_identity_residual,
                        true_lambda, w_matrix, wald_cov, wald_intervals, wald_test)
from assocmodel.simulate import benchmark_joint
from oracles import random_instance

ONE = np.array([[0.0], [1.0]])


def test_w_matrix():
    assert_allclose(w_matrix([10, 20, 40]), [[1 / 20 + 1 / 10, 1 / 10], [1 / 10, 1 / 40 + 1 / 10]])
    with pytest.raises(ValueError):
        w_matrix([1, 0])


class TestExactMoments:
    def test_two_by_two_information_is_woolf_with_expected_counts(self):
        joint = benchmark_joint()
        n_vec = np.array([300, 700])
        m = make_log_bilinear(1, 1)
        lam, misfit = true_lambda(m, joint, n_vec)
        assert misfit < 1e-12
        assert_allclose(lam.theta, [np.log(2.0)], atol=1e-12)
        I, _ = exact_moments(m, lam, joint, n_vec)
        expected_counts = joint.col_conditionals() * n_vec
        assert_allclose(safe_inverse(I)[0, 0], np.sum(1 / expected_counts), rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.booleans())
    def test_identities_on_random_instances(self, seed, stub):
        rng = np.random.default_rng(seed)
        m, theta, joint, n_vec = random_instance(rng, stub=stub)
        lam, misfit = true_lambda(m, joint, n_vec, theta=theta)
        assert misfit < 1e-9
        assert_allclose(lam.theta, theta, atol=1e-9)
        I, Sigma = exact_moments(m, lam, joint, n_vec)
        assert w_identity_residual(I, Sigma, w_matrix(n_vec)) <= 1e-8
        sandwich_cov(I, Sigma, S=m.param_dim)
        assert np.max(np.abs(expected_score(m, lam, joint, n_vec))) <= 1e-12
        assert_allclose(expected_hessian(m, lam, joint, n_vec), I, rtol=1e-9,
                        atol=1e-9 * np.abs(I).max())

    def test_info_set(self):
        joint = benchmark_joint()
        m = make_log_bilinear(1, 1)
        lam, _ = true_lambda(m, joint, [100, 100])
        s = info_set(m, lam, joint, [100, 100])
        assert s.residual < 1e-12

    def test_wrong_lambda_is_rejected(self):
        joint = benchmark_joint()
        m = make_log_bilinear(1, 1)
        with pytest.raises(ConsistencyError):
            exact_moments(m, Lambda([0.0], [0.0]), joint, [100, 100])

    def test_sandwich_check_detects_mismatch(self):
        joint = benchmark_joint()
        m = make_log_bilinear(1, 1)
        lam, _ = true_lambda(m, joint, [100, 100])
        I, Sigma = exact_moments(m, lam, joint, [100, 100])
        with pytest.raises(ConsistencyError):
            sandwich_cov(I, 0.5 * Sigma, S=1)

    def test_sigma_differs_from_information(self):
        joint = benchmark_joint()
        m = make_log_bilinear(1, 1)
        lam, _ = true_lambda(m, joint, [100, 300])
        I, Sigma = exact_moments(m, lam, joint, [100, 300])
        assert np.max(np.abs(I - Sigma)) > 1e-3
        W = w_matrix([100, 300])
        assert_allclose(I[0, 0] - Sigma[0, 0], I[0, 1:] @ W @ I[1:, 0], rtol=1e-10)


class TestWald:
    @pytest.fixture
    def report(self):
        return fit_table(make_log_bilinear(1, 1), [[10, 20], [30, 40]], ONE, ONE)

    def test_se_and_interval(self, report):
        cov = wald_cov(report)
        assert_allclose(np.sqrt(cov[0, 0]), 0.456435464587638, rtol=1e-9)
        lo, hi = conf_intervals(report, 0.95)[0]
        assert_allclose(hi - lo, 2 * 1.959963984540054 * np.sqrt(cov[0, 0]), rtol=1e-12)

    def test_scalar_wald_is_squared_z(self, report):
        res = wald_test(report, [[1.0]])
        z = report.theta_hat[0] / np.sqrt(wald_cov(report)[0, 0])
        assert_allclose(res.statistic, z ** 2)
        assert res.df == 1
        assert_allclose(res.pvalue, 2 * stats.norm.sf(abs(z)))

    def test_rhs_and_rank(self, report):
        assert_allclose(wald_test(report, [[1.0]], rhs=report.theta_hat).statistic, 0.0,
                        atol=1e-20)
        with pytest.raises(ValueError):
            wald_test(report, [[0.0]])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_interval_width_monotone_in_level(self, a, b):
        lo, hi = sorted((a, b))
        w = wald_intervals([0.0, 1.0], np.diag([0.5, 2.0]), lo)
        W = wald_intervals([0.0, 1.0], np.diag([0.5, 2.0]), hi)
        assert np.all(W[:, 1] - W[:, 0] >= w[:, 1] - w[:, 0] - 1e-12)

    def test_level_validation(self):
        with pytest.raises(ValueError):
            wald_intervals([0.0], [[1.0]], 1.0)

    def test_safe_inverse_rejects_singular(self):
        with pytest.raises(IdentifiabilityError):
            safe_inverse(np.ones((2, 2)))
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert_allclose(safe_inverse(A), np.linalg.inv(A), rtol=1e-12)
