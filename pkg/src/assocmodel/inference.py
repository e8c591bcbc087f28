"""Covariances, tests and exact information identities.

Parameter blocks are always ordered theta first, then the stratum
intercepts gamma*.  Exact expected information ``I`` and score covariance
``Sigma`` are available only when the covariate distribution within each
stratum has finite support (a :class:`~assocmodel.distfactory.FiniteJoint`);
for observed data the Wald covariance uses the observed information.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import stats

from .distfactory import mixture_and_conditionals, odds_ratio_matrix
from .exceptions import ConsistencyError, DimensionError, IdentifiabilityError
from .likelihood import ConditionalDataset, Lambda, _eta_jacobian, _softmax, _eta, observed_info

__all__ = [
    "InfoSet",
    "WaldResult",
    "w_matrix",
    "true_lambda",
    "expected_score",
    "exact_moments",
    "expected_hessian",
    "info_set",
    "w_identity_residual",
    "safe_inverse",
    "wald_cov",
    "sandwich_cov",
    "wald_test",
    "wald_intervals",
    "conf_intervals",
]

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class InfoSet:
    I_exp: np.ndarray
    Sigma: np.ndarray
    W: np.ndarray
    n_vec: np.ndarray
    J_obs: Optional[np.ndarray] = None

    @property
    def residual(self):
        return w_identity_residual(self.I_exp, self.Sigma, self.W)


class WaldResult(NamedTuple):
    statistic: float
    df: int

    @property
    def pvalue(self):
        return float(stats.chi2.sf(self.statistic, self.df))


def w_matrix(n_vec):
    """``W_kl = delta_kl / n_k + 1 / n_0`` for ``k, l = 1..K``."""
    n_vec = np.asarray(n_vec, dtype=float)
    if n_vec.size < 2:
        raise DimensionError("need at least two strata")
    if np.any(n_vec <= 0):
        raise ValueError("all stratum sizes must be positive")
    return np.diag(1.0 / n_vec[1:]) + 1.0 / n_vec[0]


def true_lambda(model, joint, n_vec, theta=None, refine=True):
    """Parameter ``(theta, gamma*)`` reproducing a joint under stratified sampling.

    The intercepts follow from the joint and the sampling fractions
    ``r_k = n_k / n``:

        gamma*_k = log(r_k / r_0) + log(p_0k / p_00) + log(p_+0 / p_+k).

    For log-bilinear models ``theta`` defaults to the least-squares solution
    of ``Z Theta V^T = psi`` on the joint's supports; other models need it
    supplied.

    With ``refine`` the closed form is polished by Newton steps on the exact
    expected log-likelihood, so the result zeroes the expected score of the
    table as stored (in exact arithmetic both coincide).  Under
    misspecification this moves to the pseudo-true value, the limit of the
    estimator.

    Returns
    -------
    lam : Lambda
    misfit : float
        Largest absolute difference between the model's log odds ratios at
        the returned ``theta`` and those of the joint (zero for a correct
        specification).
    """
    n_vec = np.asarray(n_vec, dtype=float)
    P = joint.probs
    rbar = n_vec / n_vec.sum()
    colsum = P.sum(axis=0)
    gamma = (np.log(rbar[1:] / rbar[0]) + np.log(P[0, 1:] / P[0, 0])
             + np.log(colsum[0] / colsum[1:]))
    psi_obs = odds_ratio_matrix(joint)
    if theta is None:
        if not model.is_bilinear:
            raise ValueError("theta must be given for models that are not log-bilinear")
        Zs = joint.z_support[1:] @ model.x_map.T
        Vs = joint.v_support[1:] @ model.y_map.T
        theta = np.linalg.lstsq(np.kron(Zs, Vs), psi_obs.reshape(-1), rcond=None)[0]
    lam = Lambda(np.asarray(theta, dtype=float).reshape(-1), gamma)
    if refine:
        lam = _polish(model, lam, joint, n_vec)
    psi_fit, _, _ = model.derivative_tables(joint.z_support, joint.v_support, lam.theta, order=0)
    misfit = float(np.max(np.abs(psi_fit[1:, 1:] - psi_obs)))
    return lam, misfit


def _polish(model, lam, joint, n_vec, max_steps=5):
    x = lam.vector
    s = expected_score(model, lam, joint, n_vec)
    for _ in range(max_steps):
        I, _ = exact_moments(model, Lambda.from_vector(x, lam.S), joint, n_vec, check=False)
        try:
            x_new = x + np.linalg.solve(I, s)
        except np.linalg.LinAlgError:
            break
        s_new = expected_score(model, Lambda.from_vector(x_new, lam.S), joint, n_vec)
        if not np.all(np.isfinite(s_new)) or np.max(np.abs(s_new)) >= np.max(np.abs(s)):
            break
        x, s = x_new, s_new
    return Lambda.from_vector(x, lam.S)


def _stratum_scores(model, lam, joint):
    """Score of one observation ``z_j`` drawn in stratum ``k``: shape (J+1, K+1, P)."""
    eta, grad, _ = _eta(model, lam, joint.z_support, joint.v_support, order=1)
    p, _ = _softmax(eta)
    D = _eta_jacobian(grad, lam.K)
    Dbar = np.einsum("jl,jlp->jp", p, D)
    return D - Dbar[:, None, :], p


def _stratum_scores_extended(model, lam, joint):
    """As :func:`_stratum_scores` for log-bilinear models, in extended precision."""
    ld = np.longdouble
    Zm = joint.z_support.astype(ld) @ model.x_map.T.astype(ld)
    Vm = joint.v_support.astype(ld) @ model.y_map.T.astype(ld)
    eta = Zm @ lam.theta.astype(ld).reshape(model.theta_shape) @ Vm.T
    eta[:, 1:] += lam.gamma_star.astype(ld)
    eta -= eta.max(axis=1, keepdims=True)
    p = np.exp(eta)
    p /= p.sum(axis=1, keepdims=True)
    grad = np.einsum("ja,lb->jlab", Zm, Vm).reshape(Zm.shape[0], Vm.shape[0], -1)
    D = _eta_jacobian(grad, lam.K).astype(ld)
    Dbar = np.einsum("jl,jlp->jp", p, D)
    return D - Dbar[:, None, :]


def _check_consistent(model, lam, joint, n_vec, p_model, tol):
    _, p_star = mixture_and_conditionals(joint, n_vec)
    err = float(np.max(np.abs(p_model - p_star)))
    if err > tol:
        raise ConsistencyError(
            f"lambda does not reproduce the joint's stratum posteriors (max error {err:.3e})")


def expected_score(model, lam, joint, n_vec):
    """Exact ``E[D_lambda loglik] = sum_k n_k E[D log p*_k(X_k)]``.

    For log-bilinear models the sum is formed in extended precision, so the
    result is limited by the rounding of ``lam`` and of the table itself.
    """
    n_vec = np.asarray(n_vec, dtype=float)
    cond = joint.col_conditionals()
    if model.is_bilinear:
        s = _stratum_scores_extended(model, lam, joint)
        ld = np.longdouble
        return np.einsum("k,jk,jkp->p", n_vec.astype(ld), cond.astype(ld), s).astype(float)
    s, _ = _stratum_scores(model, lam, joint)
    return np.einsum("k,jk,jkp->p", n_vec, cond, s)


def exact_moments(model, lam, joint, n_vec, check=True, tol=1e-9):
    """Exact expected information ``I`` and score covariance ``Sigma``.

    Sums over the finite covariate support of each stratum's conditional
    distribution ``p(x_j | y_k)``:

        I     = sum_k n_k E_k[s s^T]
        Sigma = sum_k n_k Cov_k(s)

    where ``s`` is the score contribution of one observation.

    Parameters
    ----------
    check : bool
        Verify that ``lam`` reproduces the stratum posteriors implied by the
        joint and ``n_vec`` (within ``tol``) and that the expected score is
        zero relative to its scale.

    Raises
    ------
    ConsistencyError
    """
    n_vec = np.asarray(n_vec, dtype=float)
    if n_vec.size != joint.shape[1] or lam.K != joint.shape[1] - 1:
        raise DimensionError("n_vec, lambda and joint disagree on the number of strata")
    s, p_model = _stratum_scores(model, lam, joint)
    if check:
        _check_consistent(model, lam, joint, n_vec, p_model, tol)
    cond = joint.col_conditionals()
    weights = cond * n_vec
    I = np.einsum("jk,jkp,jkq->pq", weights, s, s)
    means = np.einsum("jk,jkp->kp", cond, s)
    centered = s - means[None, :, :]
    Sigma = np.einsum("jk,jkp,jkq->pq", weights, centered, centered)
    if check:
        total = n_vec @ means
        scale = max(1.0, float(np.einsum("k,jk,jkp->", n_vec, cond, np.abs(s))))
        if np.max(np.abs(total)) > 1e-12 * scale:
            raise ConsistencyError(
                f"expected score is not zero (max {np.max(np.abs(total)):.3e})")
    return 0.5 * (I + I.T), 0.5 * (Sigma + Sigma.T)


def expected_hessian(model, lam, joint, n_vec):
    """``-E[Hessian of loglik]`` by exact summation of second derivatives.

    Independent of :func:`exact_moments`: evaluates the analytic observed
    information on the support with weights ``n_k p(x_j | y_k)``.
    """
    n_vec = np.asarray(n_vec, dtype=float)
    cond = joint.col_conditionals()
    n_rows, n_cols = joint.shape
    j, k = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    data = ConditionalDataset(joint.v_support, joint.z_support[j.ravel()],
                              k.ravel(), (cond * n_vec).ravel())
    return observed_info(model, lam, data)


def info_set(model, lam, joint, n_vec):
    I, Sigma = exact_moments(model, lam, joint, n_vec)
    return InfoSet(I_exp=I, Sigma=Sigma, W=w_matrix(n_vec), n_vec=np.asarray(n_vec, float))


def w_identity_residual(I_exp, Sigma, W):
    """Relative residual of ``I - Sigma = I diag(0, W) I`` (max-abs norms)."""
    I_exp = np.asarray(I_exp, dtype=float)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    S = I_exp.shape[0] - W.shape[0]
    if S < 0:
        raise DimensionError("W is larger than the information matrix")
    M = np.zeros_like(I_exp)
    M[S:, S:] = W
    lhs = I_exp - np.asarray(Sigma, dtype=float)
    rhs = I_exp @ M @ I_exp
    return float(np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(I_exp))))


def safe_inverse(A, cond_limit=COND_LIMIT):
    """Inverse of a symmetric positive definite matrix with a conditioning guard."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return A.copy()
    evals = np.linalg.eigvalsh(A)
    if evals[0] <= 0 or evals[-1] / evals[0] > cond_limit:
        raise IdentifiabilityError(
            f"matrix is singular or ill-conditioned (eigenvalues {evals[0]:.3e}.."
            f"{evals[-1]:.3e}); the parameters are not identifiable")
    L = np.linalg.cholesky(A)
    Linv = np.linalg.solve(L, np.eye(A.shape[0]))
    return Linv.T @ Linv


def wald_cov(report):
    """Estimated covariance of theta-hat: theta block of the inverse observed information."""
    S = report.theta_hat.size
    cov = safe_inverse(report.observed_info_at_hat)[:S, :S]
    return 0.5 * (cov + cov.T)


def sandwich_cov(I_exp, Sigma, S=None, rtol=1e-8):
    """``I^{-1} Sigma I^{-1}``.

    When ``S`` (the theta dimension) is given, also checks that the theta
    block equals the theta block of ``I^{-1}`` to relative ``rtol``, which
    holds whenever ``I`` and ``Sigma`` come from the same stratified design.
    """
    Iinv = safe_inverse(I_exp)
    sand = Iinv @ np.asarray(Sigma, dtype=float) @ Iinv
    sand = 0.5 * (sand + sand.T)
    if S:
        a, b = sand[:S, :S], Iinv[:S, :S]
        err = np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)
        if err > rtol:
            raise ConsistencyError(
                f"sandwich theta block differs from [I^-1]_theta,theta (rel {err:.3e})")
    return sand


def wald_test(report, C, rhs=None):
    """Wald statistic for ``C theta = rhs`` (default 0) with ``q = rows(C)`` df."""
    theta = report.theta_hat
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != theta.size:
        raise DimensionError(f"C has {C.shape[1]} columns, theta has {theta.size} entries")
    if np.linalg.matrix_rank(C) < C.shape[0]:
        raise ValueError("C must have full row rank")
    diff = C @ theta - (0.0 if rhs is None else np.asarray(rhs, dtype=float))
    V = C @ wald_cov(report) @ C.T
    stat = float(diff @ safe_inverse(V) @ diff)
    return WaldResult(stat, C.shape[0])


def wald_intervals(theta, cov, level):
    """Intervals ``theta_s +- z_{(1+level)/2} sqrt(cov_ss)``; returns (S, 2)."""
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    theta = np.asarray(theta, dtype=float).reshape(-1)
    se = np.sqrt(np.clip(np.diag(np.atleast_2d(cov)), 0, None))
    half = stats.norm.ppf(0.5 + level / 2) * se
    return np.column_stack([theta - half, theta + half])


def conf_intervals(report, level=0.95):
    return wald_intervals(report.theta_hat, wald_cov(report), level)
