import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from assocmodel import (ConditionalDataset, DimensionError, Lambda, cond_prob, loglik,
                        make_log_bilinear, observed_info, score)
from oracles import brute_loglik, central_diff, rel_err, sine_stub


def random_data(rng, k_x=2, levels=((0, 0), (1, 0), (0, 1)), sizes=(7, 5, 6)):
    V = np.array(levels, dtype=float)
    return ConditionalDataset.from_strata(V, [rng.normal(size=(n, k_x)) for n in sizes])


class TestDataset:
    def test_from_table_strata_are_columns(self):
        one = np.array([[0.0], [1.0]])
        d = ConditionalDataset.from_table([[10, 20], [30, 40]], one, one)
        assert_allclose(d.n_vec, [40, 60])
        assert d.n == 100

    def test_reference_must_be_zero(self):
        with pytest.raises(ValueError, match="reference"):
            ConditionalDataset([[1.0], [2.0]], np.zeros((2, 1)), [0, 1], [1, 1])

    def test_empty_stratum_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ConditionalDataset([[0.0], [1.0]], np.zeros((2, 1)), [0, 0], [1, 1])

    def test_collapse_preserves_likelihood(self):
        rng = np.random.default_rng(0)
        z = rng.integers(0, 2, size=(40, 2)).astype(float)
        k = rng.integers(0, 3, size=40)
        d = ConditionalDataset([[0, 0], [1, 0], [0, 1]], z, k, np.ones(40))
        c = d.collapsed()
        assert c.z.shape[0] <= 12
        m = make_log_bilinear(2, 2)
        lam = Lambda(rng.normal(size=4), rng.normal(size=2))
        assert_allclose(loglik(m, lam, c), loglik(m, lam, d), rtol=1e-12)
        assert_allclose(c.n_vec, d.n_vec)


class TestLikelihood:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        d = random_data(rng)
        m = make_log_bilinear(2, 2)
        theta, gamma = rng.normal(size=4), rng.normal(size=2)
        assert_allclose(loglik(m, Lambda(theta, gamma), d),
                        brute_loglik(m, theta, gamma, d), rtol=1e-12)

    def test_conditional_probabilities_sum_to_one(self):
        m = make_log_bilinear(1, 1)
        lam = Lambda([2.0], [0.5])
        p = cond_prob(m, lam, np.array([[0.0], [1.0], [3.0]]), [[0.0], [1.0]])
        assert_allclose(p.sum(axis=1), 1.0)
        # logistic form
        assert_allclose(p[:, 1], 1 / (1 + np.exp(-(0.5 + 2.0 * np.array([0, 1, 3])))))

    def test_no_overflow_for_huge_linear_predictor(self):
        m = make_log_bilinear(1, 1)
        d = ConditionalDataset([[0.0], [1.0]], [[1.0], [1.0]], [0, 1], [1, 1])
        ll = loglik(m, Lambda([800.0], [0.0]), d)
        assert np.isfinite(ll)
        assert_allclose(ll, -800.0)
        assert np.all(np.isfinite(score(m, Lambda([800.0], [0.0]), d)))

    def test_dimension_mismatch(self):
        d = random_data(np.random.default_rng(2))
        with pytest.raises(DimensionError):
            loglik(make_log_bilinear(2, 2), Lambda(np.zeros(4), np.zeros(3)), d)

    @pytest.mark.parametrize("make_model", [lambda: make_log_bilinear(2, 2), sine_stub])
    def test_score_and_information_by_finite_differences(self, make_model):
        rng = np.random.default_rng(3)
        d = random_data(rng)
        m = make_model()
        x = rng.normal(scale=0.7, size=6)

        def ll(x):
            return loglik(m, Lambda.from_vector(x, 4), d)

        def sc(x):
            return score(m, Lambda.from_vector(x, 4), d)

        g = sc(x)
        assert rel_err(g, central_diff(ll, x)) < 1e-7
        J = observed_info(m, Lambda.from_vector(x, 4), d)
        assert rel_err(J, -central_diff(sc, x)) < 1e-7
        assert_allclose(J, J.T)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_information_positive_semidefinite(self, seed):
        rng = np.random.default_rng(seed)
        d = random_data(rng)
        lam = Lambda(rng.normal(size=4), rng.normal(size=2))
        J = observed_info(make_log_bilinear(2, 2), lam, d)
        assert np.linalg.eigvalsh(J)[0] > -1e-10 * np.abs(J).max()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_gamma_shift_invariance_of_probabilities(self, seed, shift):
        # adding c to every eta_l (including the reference) leaves p unchanged;
        # with gamma*_0 fixed at 0 this shows as theta-free reparametrisation of V
        rng = np.random.default_rng(seed)
        m = make_log_bilinear(1, 1)
        z = rng.normal(size=(5, 1))
        lam = Lambda([0.3], [shift])
        p = cond_prob(m, lam, z, [[0.0], [1.0]])
        assert_allclose(np.log(p[:, 1] / p[:, 0]), shift + 0.3 * z[:, 0], atol=1e-10)
