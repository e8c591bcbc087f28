import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression

from assocmodel import (AssociationEstimator, ConditionalDataset, ConvergenceError,
                        DivergenceError, FitOptions, IdentifiabilityError, check_conditions,
                        fit, fit_loglinear, fit_reverse, fit_table, make_glm_canonical,
                        make_log_bilinear, make_multinomial_logit, multinomial_levels,
                        saturated_supports, wald_cov)
from oracles import sine_stub, woolf

ONE = np.array([[0.0], [1.0]])
FIXTURE = np.array([[10, 20], [30, 40]])


class TestClosedForm:
    def test_fixture(self):
        rep = fit_table(make_log_bilinear(1, 1), FIXTURE, ONE, ONE)
        lor, var = woolf(FIXTURE)
        assert rep.converged
        assert_allclose(rep.theta_hat, [lor], atol=1e-10)
        assert_allclose(rep.theta_hat, [np.log(2 / 3)], atol=1e-10)
        assert_allclose(wald_cov(rep), [[var]], rtol=1e-9)
        assert_allclose(rep.gamma_hat, [np.log(2.0)], atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 500), min_size=4, max_size=4))
    def test_any_positive_two_by_two(self, cells):
        counts = np.array(cells).reshape(2, 2)
        rep = fit_table(make_log_bilinear(1, 1), counts, ONE, ONE)
        lor, var = woolf(counts)
        assert_allclose(rep.theta_hat[0], lor, atol=1e-8)
        assert_allclose(wald_cov(rep)[0, 0], var, rtol=1e-7)

    def test_trace_is_monotone(self):
        rep = fit_table(make_log_bilinear(1, 1), [[3, 50], [40, 7]], ONE, ONE)
        assert np.all(np.diff(rep.trace) >= -1e-12)

    def test_report_names_and_dict(self):
        rep = fit_table(make_log_bilinear(1, 1), FIXTURE, ONE, ONE)
        assert rep.param_names == ["theta[0,0]", "gamma*[1]"]
        d = rep.to_dict()
        assert d["converged"] and d["n_vec"] == [40.0, 60.0]


class TestProspectiveOracles:
    """Under prospective sampling the conditional likelihood is a logistic one."""

    def test_binary_logistic(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(400, 2))
        y = (rng.random(400) < 1 / (1 + np.exp(-(0.3 + X @ [1.0, -0.5])))).astype(int)
        rep = fit(make_glm_canonical(2), ConditionalDataset(ONE, X, y, np.ones(400)))
        ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
        assert_allclose(rep.theta_hat, ref.coef_[0], atol=1e-5)
        assert_allclose(rep.gamma_hat, ref.intercept_, atol=1e-5)
        # Wald covariance equals the inverse Fisher information of the logistic fit
        D = np.column_stack([X, np.ones(400)])
        p = ref.predict_proba(X)[:, 1]
        fisher_inv = np.linalg.inv(D.T @ (D * (p * (1 - p))[:, None]))
        assert_allclose(wald_cov(rep), fisher_inv[:2, :2], rtol=1e-4)

    def test_multinomial_logit(self):
        rng = np.random.default_rng(1)
        B = np.array([[0.8, -0.4], [0.2, 1.0]])
        X = rng.normal(size=(600, 2))
        eta = np.column_stack([np.zeros(600), X @ B + [0.1, -0.2]])
        p = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
        y = (rng.random(600)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        rep = fit(make_multinomial_logit(2, 3),
                  ConditionalDataset(multinomial_levels(3), X, y, np.ones(600)))
        ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
        coef = (ref.coef_[1:] - ref.coef_[0]).T
        assert_allclose(rep.theta_hat.reshape(2, 2), coef, atol=1e-4)
        assert_allclose(rep.gamma_hat, ref.intercept_[1:] - ref.intercept_[0], atol=1e-4)


class TestRoutes:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_forward_reverse_loglinear_agree(self, seed):
        rng = np.random.default_rng(seed)
        Z, V = saturated_supports(3, 3)
        counts = rng.integers(3, 80, size=(3, 3))
        m = make_log_bilinear(2, 2)
        fwd = fit_table(m, counts, Z, V)
        rev = fit_reverse(m, counts, Z, V)
        llf = fit_loglinear(counts, Z, V, model=m)
        assert_allclose(rev.theta_hat, fwd.theta_hat, atol=1e-8)
        assert_allclose(llf.theta_hat, fwd.theta_hat, atol=1e-8)
        assert_allclose(wald_cov(rev), wald_cov(fwd), rtol=1e-7)
        assert_allclose(llf.cov_theta, wald_cov(fwd), rtol=1e-7)
        # saturated: theta equals the observed log odds ratios
        L = np.log(counts)
        assert_allclose(fwd.theta_hat.reshape(2, 2),
                        L[1:, 1:] - L[1:, :1] - L[:1, 1:] + L[0, 0], atol=1e-8)

    def test_non_saturated_routes_agree(self):
        rng = np.random.default_rng(5)
        Z = np.vstack([[0.0], rng.normal(size=(4, 1))])
        V = np.vstack([[0.0], rng.normal(size=(3, 1))])
        counts = rng.integers(5, 60, size=(5, 4))
        m = make_log_bilinear(1, 1)
        fwd = fit_table(m, counts, Z, V)
        rev = fit_reverse(m, counts, Z, V)
        llf = fit_loglinear(counts, Z, V)
        assert_allclose([rev.theta_hat, llf.theta_hat], [fwd.theta_hat] * 2, atol=1e-8)
        # loglinear MLE matches the sufficient statistics
        assert_allclose(llf.fitted.sum(axis=1) * counts.sum(), counts.sum(axis=1), rtol=1e-8)
        assert_allclose(llf.fitted.sum(axis=0) * counts.sum(), counts.sum(axis=0), rtol=1e-8)

    def test_reverse_names_row_intercepts(self):
        rev = fit_reverse(make_log_bilinear(1, 1), FIXTURE, ONE, ONE)
        assert rev.conditioning == "x"
        assert rev.param_names[-1] == "beta*[1]"

    def test_non_bilinear_model_fits(self):
        rng = np.random.default_rng(2)
        V = np.array([[0, 0], [1, 0.5], [0.3, 1]])
        data = ConditionalDataset.from_strata(V, [rng.normal(size=(60, 2)) for _ in range(3)])
        rep = fit(sine_stub(), data)
        assert rep.converged and rep.final_grad_norm <= 1e-8


class TestFailures:
    def test_separated_table(self):
        with pytest.raises(DivergenceError):
            fit_table(make_log_bilinear(1, 1), [[10, 0], [0, 10]], ONE, ONE)

    def test_separated_continuous_covariate(self):
        z = np.concatenate([np.linspace(-2, -0.1, 10), np.linspace(0.1, 2, 10)])
        data = ConditionalDataset(ONE, z[:, None], np.repeat([0, 1], 10), np.ones(20))
        with pytest.raises(ConvergenceError):
            fit(make_log_bilinear(1, 1), data)

    def test_rank_deficient_outcome_features(self):
        V = np.array([[0, 0], [1, 2], [2, 4]], dtype=float)
        data = ConditionalDataset.from_strata(V, [[[0.0], [1.0]]] * 3)
        with pytest.raises(IdentifiabilityError):
            fit(make_log_bilinear(1, 2), data)
        diags = {d.condition: d.flagged for d in check_conditions(make_log_bilinear(1, 2), data)}
        assert diags["RK"] and diags["R2''"]

    def test_loglinear_rank_and_margin_checks(self):
        Z, V = ONE, np.array([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(IdentifiabilityError):
            fit_loglinear(FIXTURE, Z, V)
        with pytest.raises(IdentifiabilityError):
            fit_loglinear([[0, 0], [3, 4]], ONE, ONE)

    def test_iteration_limit(self):
        with pytest.raises(ConvergenceError):
            fit_table(make_log_bilinear(1, 1), [[3, 50], [40, 7]], ONE, ONE, max_iter=1)

    def test_warm_start(self):
        m = make_log_bilinear(1, 1)
        opts = FitOptions(init_theta=[np.log(2 / 3)], init_gamma=[np.log(2.0)])
        rep = fit_table(m, FIXTURE, ONE, ONE, opts)
        assert rep.iterations <= 1


class TestEstimatorAPI:
    def _data(self, seed=0, n=300):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 2))
        y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [0.5, -1.0])))).astype(int)
        return X, y

    def test_params_and_clone(self):
        est = AssociationEstimator(max_iter=50, level=0.9)
        assert est.get_params()["max_iter"] == 50
        c = clone(est)
        assert c.get_params() == est.get_params() and c is not est

    def test_fit_attributes(self):
        X, y = self._data()
        est = AssociationEstimator().fit(X, y)
        rep = fit(make_log_bilinear(2, 1), ConditionalDataset(ONE, X, y, np.ones(len(y))))
        assert_allclose(est.theta_, rep.theta_hat)
        assert est.n_features_in_ == 2 and est.covariance_.shape == (2, 2)
        P = est.predict_proba(X)
        assert_allclose(P.sum(axis=1), 1.0)
        assert set(np.unique(est.predict(X))) <= {0, 1}
        assert est.score(X, y) < 0
        ci = est.conf_int()
        assert np.all(ci[:, 0] < est.theta_) and np.all(est.theta_ < ci[:, 1])

    def test_sample_weight_equals_duplication(self):
        X, y = self._data(1, 80)
        w = np.random.default_rng(2).integers(1, 4, size=80)
        a = AssociationEstimator().fit(X, y, sample_weight=w)
        b = AssociationEstimator().fit(np.repeat(X, w, axis=0), np.repeat(y, w))
        assert_allclose(a.theta_, b.theta_, atol=1e-9)

    def test_unfitted_and_bad_labels(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            AssociationEstimator().predict(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            AssociationEstimator().fit(np.zeros((4, 1)), [0, 1.5, 1, 0])
