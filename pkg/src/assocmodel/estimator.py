"""Maximum conditional-likelihood fitting of association models.

Three routes estimate the same odds-ratio parameter on a contingency table:

* :func:`fit` maximizes the likelihood of the stratum given the covariates
  (the natural route when sampling was conditional on the outcome);
* :func:`fit_reverse` maximizes the dual likelihood with the roles of
  covariates and outcomes exchanged;
* :func:`fit_loglinear` maximizes the unconditional multinomial likelihood
  of the whole table.

All three share a damped Newton iteration with step halving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import (ConvergenceError, DivergenceError, EvaluationError,
                         IdentifiabilityError)
from .likelihood import ConditionalDataset, Lambda, cond_prob, loglik, observed_info, score
from .model import make_log_bilinear, multinomial_levels

__all__ = [
    "FitOptions",
    "FitReport",
    "Diagnostic",
    "LogLinearFit",
    "fit",
    "fit_table",
    "fit_reverse",
    "fit_loglinear",
    "check_conditions",
    "AssociationEstimator",
]


@dataclass(frozen=True)
class FitOptions:
    """Solver settings for the damped Newton iteration."""

    grad_tol: float = 1e-8
    step_tol: float = 1e-9
    max_iter: int = 100
    max_step_halvings: int = 30
    cond_limit: float = 1e12
    divergence_bound: float = 1e4
    init_theta: Optional[np.ndarray] = None
    init_gamma: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Diagnostic:
    condition: str
    flagged: bool
    detail: str
    value: Optional[float] = None

    def __str__(self):
        mark = "FLAG" if self.flagged else "ok"
        return f"[{mark}] {self.condition}: {self.detail}"


@dataclass(frozen=True, eq=False)
class FitReport:
    """Result of a conditional-likelihood fit.

    ``observed_info_at_hat`` is ordered theta block first, then the stratum
    intercepts.  For a reverse fit the intercepts belong to the covariate
    levels (``conditioning == "x"``) while theta keeps the forward layout.
    """

    lambda_hat: Lambda
    converged: bool
    iterations: int
    final_grad_norm: float
    loglik_at_hat: float
    observed_info_at_hat: np.ndarray
    diagnostics: List[Diagnostic] = field(default_factory=list)
    trace: List[float] = field(default_factory=list)
    param_names: List[str] = field(default_factory=list)
    n_vec: Optional[np.ndarray] = None
    conditioning: str = "y"

    @property
    def theta_hat(self):
        return self.lambda_hat.theta

    @property
    def gamma_hat(self):
        return self.lambda_hat.gamma_star

    def to_dict(self):
        return {
            "theta_hat": self.theta_hat.tolist(),
            "gamma_star_hat": self.gamma_hat.tolist(),
            "param_names": list(self.param_names),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "final_grad_norm": float(self.final_grad_norm),
            "loglik": float(self.loglik_at_hat),
            "n_vec": None if self.n_vec is None else np.asarray(self.n_vec).tolist(),
            "conditioning": self.conditioning,
            "observed_info": self.observed_info_at_hat.tolist(),
            "diagnostics": [str(d) for d in self.diagnostics],
        }


def _options(options, overrides):
    opts = options if options is not None else FitOptions()
    return replace(opts, **overrides) if overrides else opts


def _newton_direction(info, grad, cond_limit):
    """Newton direction, or a scaled gradient if ``info`` is not safely PD."""
    evals, evecs = np.linalg.eigh(info)
    top = evals[-1] if evals.size else 0.0
    if evals.size and evals[0] > 0 and top / evals[0] <= cond_limit:
        return evecs @ ((evecs.T @ grad) / evals), True
    return grad / max(top, 1.0), False


def _newton_maximize(objective, derivs, x0, opts, what="likelihood"):
    """Damped Newton ascent.

    Parameters
    ----------
    objective : callable x -> float
    derivs : callable x -> (gradient, negative Hessian)

    Returns
    -------
    x, value, iterations, grad_norm, info, trace
    """
    x = np.asarray(x0, dtype=float).copy()
    value = objective(x)
    trace = [value]
    step_norm = np.inf
    for it in range(opts.max_iter + 1):
        grad, info = derivs(x)
        grad_norm = float(np.max(np.abs(grad), initial=0.0))
        if grad_norm <= opts.grad_tol and step_norm <= opts.step_tol:
            return x, value, it, grad_norm, info, trace
        if it == opts.max_iter:
            break
        direction, newton = _newton_direction(info, grad, opts.cond_limit)
        if it == 0 and not newton:
            raise IdentifiabilityError(
                f"information matrix is singular at the starting point of the {what} "
                "maximization; the parameter is not identifiable from this design")
        if newton and grad_norm <= opts.grad_tol and np.max(np.abs(direction)) > 1e-3:
            raise DivergenceError(
                f"{what} keeps increasing along a direction of vanishing curvature "
                f"(|lambda| = {np.max(np.abs(x)):.3g}); the maximum likelihood estimate "
                "does not exist (separated data)")

        slack = 1e-12 * max(1.0, abs(value))
        t = 1.0
        for _ in range(opts.max_step_halvings + 1):
            cand = x + t * direction
            try:
                cand_value = objective(cand)
            except EvaluationError:
                cand_value = -np.inf
            if np.isfinite(cand_value) and cand_value >= value - slack:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"step halving exhausted after {opts.max_step_halvings} halvings "
                f"at iteration {it} (gradient norm {grad_norm:.3e})")

        step_norm = float(np.max(np.abs(cand - x), initial=0.0))
        x, value = cand, cand_value
        trace.append(value)
        if np.max(np.abs(x), initial=0.0) > opts.divergence_bound:
            raise DivergenceError(
                f"|lambda| exceeded {opts.divergence_bound:g} with the {what} still "
                "increasing; the maximum likelihood estimate does not exist")

    if len(trace) > 2 and trace[-1] >= trace[-2] and step_norm > 1e-3:
        raise DivergenceError(
            f"no convergence in {opts.max_iter} iterations while the {what} kept "
            "increasing; the maximum likelihood estimate appears not to exist")
    raise ConvergenceError(
        f"no convergence in {opts.max_iter} iterations "
        f"(gradient norm {grad_norm:.3e}, last step {step_norm:.3e})")


def fit(model, data, options=None, **overrides):
    """Maximize the conditional log-likelihood of strata given covariates.

    Parameters
    ----------
    model : AssociationModel
    data : ConditionalDataset
    options : FitOptions, optional
    **overrides
        Individual :class:`FitOptions` fields.

    Returns
    -------
    FitReport

    Raises
    ------
    DivergenceError
        The likelihood has no maximizer (complete or quasi-complete separation).
    IdentifiabilityError
        The information matrix is singular at the start (rank-deficient design).
    """
    opts = _options(options, overrides)
    data = data.collapsed()
    S, K = model.param_dim, data.K
    n_vec = data.n_vec
    theta0 = np.zeros(S) if opts.init_theta is None else np.asarray(opts.init_theta, float)
    gamma0 = (np.log(n_vec[1:] / n_vec[0]) if opts.init_gamma is None
              else np.asarray(opts.init_gamma, float))
    diagnostics = check_conditions(model, data)

    def objective(x):
        return loglik(model, Lambda.from_vector(x, S), data)

    def derivs(x):
        lam = Lambda.from_vector(x, S)
        return score(model, lam, data), observed_info(model, lam, data)

    try:
        x, value, it, gnorm, info, trace = _newton_maximize(
            objective, derivs, np.concatenate([theta0, gamma0]), opts)
    except IdentifiabilityError as exc:
        flags = "; ".join(str(d) for d in diagnostics if d.flagged)
        raise IdentifiabilityError(f"{exc}. {flags}".strip()) from None

    lam = Lambda.from_vector(x, S)
    diagnostics = diagnostics + _envelope_diagnostics(model, lam, data)
    evals = np.linalg.eigvalsh(info)
    converged = bool(evals.size == 0 or evals[0] > 0)
    return FitReport(
        lambda_hat=lam, converged=converged, iterations=it, final_grad_norm=gnorm,
        loglik_at_hat=value, observed_info_at_hat=info, diagnostics=diagnostics,
        trace=trace, param_names=model.param_names() + [f"gamma*[{k}]" for k in range(1, K + 1)],
        n_vec=n_vec)


def fit_table(model, counts, z_support, v_support, options=None, **overrides):
    """Forward fit on a count table whose columns are the outcome strata."""
    data = ConditionalDataset.from_table(counts, z_support, v_support)
    return fit(model, data, options, **overrides)


def fit_reverse(model, counts, z_support, v_support, options=None, **overrides):
    """Fit the dual likelihood of covariate level given outcome.

    The rows of ``counts`` become the strata and the outcome features play the
    role of covariates.  Theta and its information block are returned in the
    forward layout so they compare directly with :func:`fit_table`.
    """
    counts = np.asarray(counts, dtype=float)
    swapped, perm = model.swapped()
    data = ConditionalDataset.from_table(counts.T, v_support, z_support)
    rep = fit(swapped, data, options, **overrides)
    S = model.param_dim
    order = np.concatenate([perm, S + np.arange(rep.gamma_hat.size)])
    info = rep.observed_info_at_hat[np.ix_(order, order)]
    J = rep.gamma_hat.size
    return replace(
        rep,
        lambda_hat=Lambda(rep.theta_hat[perm], rep.gamma_hat),
        observed_info_at_hat=info,
        param_names=model.param_names() + [f"beta*[{j}]" for j in range(1, J + 1)],
        conditioning="x")


@dataclass(frozen=True, eq=False)
class LogLinearFit:
    """Unconditional multinomial fit of ``log p_jk = alpha + beta_j + gamma_k + psi_jk``."""

    theta_hat: np.ndarray
    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    alpha_hat: float
    fitted: np.ndarray
    info: np.ndarray
    iterations: int
    loglik: float

    def __iter__(self):
        return iter((self.theta_hat, self.beta_hat, self.gamma_hat, self.alpha_hat))

    @property
    def cov_theta(self):
        S = self.theta_hat.size
        return np.linalg.inv(self.info)[:S, :S]


def fit_loglinear(counts, Z, V, model=None, options=None, **overrides):
    """Multinomial maximum likelihood for the whole ``(J+1) x (K+1)`` table.

    Parameters
    ----------
    counts : array (J+1, K+1)
    Z : array (J+1, K_X)
        Row features; row 0 must be zero.
    V : array (K+1, K_Y)
        Column features; row 0 must be zero.
    model : AssociationModel, optional
        Defaults to the log-bilinear model on ``(K_X, K_Y)``.

    Returns
    -------
    LogLinearFit
        Unpacks as ``theta_hat, beta_hat, gamma_hat, alpha_hat``.
    """
    opts = _options(options, overrides)
    counts = np.asarray(counts, dtype=float)
    Z = np.asarray(Z, dtype=float)
    V = np.asarray(V, dtype=float)
    Z = Z[:, None] if Z.ndim == 1 else Z
    V = V[:, None] if V.ndim == 1 else V
    if model is None:
        model = make_log_bilinear(Z.shape[1], V.shape[1])
    if np.any(Z[0] != 0) or np.any(V[0] != 0):
        raise ValueError("reference row and column features must be zero")
    if np.any(counts.sum(axis=1) <= 0) or np.any(counts.sum(axis=0) <= 0):
        raise IdentifiabilityError("table has an empty row or column margin")
    if model.is_bilinear:
        rows, cols = model.theta_shape
        if np.linalg.matrix_rank(V[1:] @ model.y_map.T) < cols:
            raise IdentifiabilityError(
                f"condition (RK) fails: column feature matrix has rank < {cols}")
        if np.linalg.matrix_rank(Z[1:] @ model.x_map.T) < rows:
            raise IdentifiabilityError(
                f"row feature matrix has rank < {rows}; theta is not identifiable")

    n_rows, n_cols = counts.shape
    S = model.param_dim
    n = counts.sum()
    r = counts.reshape(-1)
    P = S + (n_rows - 1) + (n_cols - 1)
    j_idx, k_idx = np.divmod(np.arange(n_rows * n_cols), n_cols)

    def eta_parts(x, order):
        psi, grad, hess = model.derivative_tables(Z, V, x[:S], order=order)
        beta = np.concatenate([[0.0], x[S:S + n_rows - 1]])
        gamma = np.concatenate([[0.0], x[S + n_rows - 1:]])
        eta = (beta[:, None] + gamma[None, :] + psi).reshape(-1)
        return eta, grad, hess

    def objective(x):
        eta, _, _ = eta_parts(x, 0)
        return float(r @ eta - n * logsumexp(eta))

    def derivs(x):
        eta, grad, hess = eta_parts(x, 2)
        p = np.exp(eta - logsumexp(eta))
        D = np.zeros((eta.size, P))
        D[:, :S] = grad.reshape(-1, S)
        rows_nz = j_idx > 0
        D[rows_nz, S + j_idx[rows_nz] - 1] = 1.0
        cols_nz = k_idx > 0
        D[cols_nz, S + n_rows - 1 + k_idx[cols_nz] - 1] = 1.0
        Dbar = p @ D
        g = r @ D - n * Dbar
        C = (D - Dbar) * np.sqrt(n * p)[:, None]
        info = C.T @ C
        if hess is not None:
            info[:S, :S] -= np.einsum("c,crs->rs", r - n * p, hess.reshape(-1, S, S))
        return g, 0.5 * (info + info.T)

    x0 = np.concatenate([np.zeros(S),
                         np.log(counts.sum(axis=1)[1:] / counts.sum(axis=1)[0]),
                         np.log(counts.sum(axis=0)[1:] / counts.sum(axis=0)[0])])
    if opts.init_theta is not None:
        x0[:S] = opts.init_theta
    x, value, it, _, info, _ = _newton_maximize(
        objective, derivs, x0, opts, what="multinomial likelihood")
    eta, _, _ = eta_parts(x, 0)
    alpha = -float(logsumexp(eta))
    return LogLinearFit(
        theta_hat=x[:S], beta_hat=x[S:S + n_rows - 1], gamma_hat=x[S + n_rows - 1:],
        alpha_hat=alpha, fitted=np.exp(eta + alpha).reshape(n_rows, n_cols),
        info=info, iterations=it, loglik=value)


def check_conditions(model, data, theta=None):
    """Empirical surrogates for the identifiability and moment conditions.

    Returns a list of :class:`Diagnostic`; ``flagged`` marks a violation.
    Reported: the rank condition on the outcome features (log-bilinear
    models), the rank of the centered covariate design, the full-rank
    condition on the stacked centered theta-gradients (any model), and
    per-stratum sample means of ``||z||^2`` and ``||z||^3``.
    """
    out = []
    V = data.v_levels
    w = data.weights
    if model.is_bilinear:
        rows, cols = model.theta_shape
        rk = int(np.linalg.matrix_rank(V[1:] @ model.y_map.T))
        out.append(Diagnostic(
            "RK", rk < cols, f"rank of outcome feature matrix {rk} vs K_Y={cols}", rk))
        Zs = data.z @ model.x_map.T
        centered = (Zs - (w @ Zs) / w.sum()) * np.sqrt(w)[:, None]
        rz = int(np.linalg.matrix_rank(centered))
        out.append(Diagnostic(
            "R2_LBA", rz < rows,
            f"rank of centered covariate design {rz} vs K_X={rows}", rz))

    th = np.zeros(model.param_dim) if theta is None else np.asarray(theta, float)
    if model.param_dim:
        _, grad, _ = model.derivative_tables(data.z, V, th, order=1)
        blocks = []
        for k in range(1, V.shape[0]):
            G = grad[:, k, :]
            blocks.append((G - (w @ G) / w.sum()) * np.sqrt(w)[:, None])
        rs = int(np.linalg.matrix_rank(np.vstack(blocks)))
        out.append(Diagnostic(
            "R2''", rs < model.param_dim,
            f"rank of stacked centered theta-gradients {rs} vs S={model.param_dim}", rs))

    norms = np.linalg.norm(data.z, axis=1)
    for k in range(V.shape[0]):
        m = data.stratum == k
        wk = w[m] / w[m].sum()
        m2, m3 = float(wk @ norms[m] ** 2), float(wk @ norms[m] ** 3)
        out.append(Diagnostic(
            f"moments[{k}]", not (np.isfinite(m2) and np.isfinite(m3)),
            f"mean ||z||^2 = {m2:.4g}, mean ||z||^3 = {m3:.4g}", m3))
    return out


def _envelope_diagnostics(model, lam, data, max_rows=500):
    if model.envelope_x is None or model.envelope_y is None:
        return []
    bad = 0
    for z in data.z[:max_rows]:
        for v in data.v_levels:
            bad += not model.envelope_ok(z, v, lam.theta)
    return [Diagnostic("OR2", bad > 0, f"{bad} envelope violations at theta_hat", bad)]


class AssociationEstimator(BaseEstimator):
    """Scikit-learn style front end to :func:`fit`.

    ``X`` holds covariate features ``z`` (one row per sampled unit) and ``y``
    the integer stratum (outcome level) each unit was sampled under.

    Parameters
    ----------
    model : AssociationModel, optional
        Defaults to the log-bilinear model matching ``X`` and ``v_levels``.
    v_levels : array (K+1, K_Y), optional
        Outcome features; defaults to multinomial-logit unit vectors.
    grad_tol, max_iter, max_step_halvings : solver settings.
    level : float
        Confidence level used by :meth:`conf_int`.
    """

    def __init__(self, model=None, v_levels=None, grad_tol=1e-8, max_iter=100,
                 max_step_halvings=30, level=0.95):
        self.model = model
        self.v_levels = v_levels
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.max_step_halvings = max_step_halvings
        self.level = level

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float)
        if not np.allclose(y, np.round(y)) or y.min() < 0:
            raise ValueError("y must hold nonnegative integer stratum labels")
        y = y.astype(int)
        V = (multinomial_levels(y.max() + 1) if self.v_levels is None
             else np.asarray(self.v_levels, dtype=float))
        V = V[:, None] if V.ndim == 1 else V
        model = self.model or make_log_bilinear(X.shape[1], V.shape[1])
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        data = ConditionalDataset(V, X, y, w)
        report = fit(model, data, FitOptions(
            grad_tol=self.grad_tol, max_iter=self.max_iter,
            max_step_halvings=self.max_step_halvings))

        from .inference import wald_cov

        self.model_ = model
        self.v_levels_ = V
        self.report_ = report
        self.theta_ = report.theta_hat
        self.gamma_star_ = report.gamma_hat
        self.covariance_ = wald_cov(report)
        self.n_iter_ = report.iterations
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "report_")
        X = check_array(X, dtype=float)
        return cond_prob(self.model_, self.report_.lambda_hat, X, self.v_levels_)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y):
        """Mean conditional log-likelihood per observation."""
        check_is_fitted(self, "report_")
        X, y = check_X_y(X, y, dtype=float)
        data = ConditionalDataset(self.v_levels_, X, y.astype(int), np.ones(len(y)))
        return loglik(self.model_, self.report_.lambda_hat, data) / len(y)

    def conf_int(self, level=None):
        from .inference import conf_intervals

        check_is_fitted(self, "report_")
        return conf_intervals(self.report_, self.level if level is None else level)
