"""Sampling from finite joints and Monte-Carlo checks of the estimator.

Every replicate draws from its own Philox stream, keyed by the run seed and
the replicate index (``SeedSequence(seed, spawn_key=(grid, replicate))``),
so results do not depend on execution order or on ``n_jobs``.  Categorical
draws use inverse-CDF lookup over cumulative probabilities in a fixed
(row-major) cell order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from .distfactory import FiniteJoint, ipf_fit
from .estimator import fit, fit_loglinear, fit_reverse, fit_table
from .exceptions import ConvergenceError, IdentifiabilityError
from .inference import exact_moments, safe_inverse, true_lambda, wald_cov, wald_intervals
from .likelihood import ConditionalDataset
from .model import make_log_bilinear

__all__ = [
    "McConfig",
    "rng_for",
    "benchmark_joint",
    "sample_cond_on_y",
    "sample_cond_on_x",
    "sample_unconditional",
    "stratum_sizes",
    "mc_consistency",
    "mc_coverage",
    "mc_invariance",
    "invariance_discrepancy",
]

SCHEMES = ("cond_on_y", "cond_on_x", "unconditional")


def rng_for(seed, *key):
    """Independent generator for the stream identified by ``key``."""
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _categorical_counts(probs, size, rng):
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(int(size)), side="right")
    return np.bincount(np.minimum(idx, probs.size - 1), minlength=probs.size)


def _cond_counts(cond, sizes, rng):
    """Column ``k`` gets ``sizes[k]`` draws from ``cond[:, k]``."""
    return np.column_stack([_categorical_counts(cond[:, k], sizes[k], rng)
                            for k in range(cond.shape[1])])


def _check_sizes(sizes, expected):
    sizes = np.asarray(sizes)
    if sizes.size != expected:
        raise ValueError(f"need {expected} stratum sizes, got {sizes.size}")
    if np.any(sizes < 1) or not np.all(sizes == np.round(sizes)):
        raise ValueError("every stratum size must be a positive integer")
    return sizes.astype(int)


def sample_cond_on_y(joint, n_vec, seed):
    """Draw ``n_k`` covariate levels from ``p(x | y_k)`` for every stratum ``k``.

    Returns a :class:`ConditionalDataset` with identical rows collapsed.
    """
    n_vec = _check_sizes(n_vec, joint.shape[1])
    counts = _cond_counts(joint.col_conditionals(), n_vec, rng_for(seed))
    return ConditionalDataset.from_table(counts, joint.z_support, joint.v_support)


def sample_cond_on_x(joint, m_vec, seed):
    """Dual of :func:`sample_cond_on_y`: strata are the covariate levels.

    The dataset's strata are the rows of the joint, its level features are
    the row features, and its observations are outcome features.
    """
    m_vec = _check_sizes(m_vec, joint.shape[0])
    t = joint.transpose()
    counts = _cond_counts(t.col_conditionals(), m_vec, rng_for(seed))
    return ConditionalDataset.from_table(counts, t.z_support, t.v_support)


def sample_unconditional(joint, n, seed):
    """Multinomial count table of total ``n`` over the joint's cells."""
    if int(n) < 1:
        raise ValueError("n must be at least 1")
    flat = _categorical_counts(joint.probs.reshape(-1), n, rng_for(seed))
    return flat.reshape(joint.shape)


def stratum_sizes(n, fractions):
    """Integer sizes summing to ``n`` with ratios ``fractions`` (largest remainder)."""
    fractions = np.asarray(fractions, dtype=float)
    fractions = fractions / fractions.sum()
    raw = n * fractions
    sizes = np.floor(raw).astype(int)
    short = int(n - sizes.sum())
    sizes[np.argsort(-(raw - sizes), kind="stable")[:short]] += 1
    return sizes


def benchmark_joint():
    """2x2 benchmark: row marginal (0.6, 0.4), column marginal (0.5, 0.5), log OR = log 2."""
    return ipf_fit([0.6, 0.4], [0.5, 0.5], [[math.log(2.0)]])


@dataclass(frozen=True, eq=False)
class McConfig:
    """Monte-Carlo run description.

    ``fractions`` are the fixed sampling ratios of the strata (outcome
    columns for ``cond_on_y``, covariate rows for ``cond_on_x``); equal
    ratios by default.  ``n`` is the total sample size.
    """

    joint: FiniteJoint
    model: object = None
    replicates: int = 1000
    seed: int = 0
    scheme: str = "cond_on_y"
    n: int = 2000
    fractions: Optional[np.ndarray] = None
    level: float = 0.95
    max_excluded_frac: float = 0.01
    n_jobs: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.model is None:
            object.__setattr__(self, "model", make_log_bilinear(
                self.joint.z_support.shape[1], self.joint.v_support.shape[1]))

    def sizes(self, n=None):
        n = self.n if n is None else n
        n_strata = self.joint.shape[0 if self.scheme == "cond_on_x" else 1]
        fr = np.ones(n_strata) if self.fractions is None else self.fractions
        return stratum_sizes(n, fr)

    def truth(self, n=None):
        """True ``theta`` and the exact stratified-design oracle quantities."""
        n_vec = self.sizes(n) if self.scheme == "cond_on_y" else None
        if n_vec is None:
            n_vec = stratum_sizes(self.n if n is None else n, self.joint.col_marginal)
        lam, misfit = true_lambda(self.model, self.joint, n_vec)
        return lam, misfit, n_vec


def _replicate_fit(cfg, n, key):
    """Fit one replicate; returns (theta_hat, wald covariance) or None if excluded."""
    rng = rng_for(cfg.seed, *key)
    j = cfg.joint
    try:
        if cfg.scheme == "cond_on_y":
            data = sample_cond_on_y(j, cfg.sizes(n), rng)
            rep = fit(cfg.model, data)
        elif cfg.scheme == "cond_on_x":
            counts = _cond_counts(j.transpose().col_conditionals(), cfg.sizes(n), rng).T
            rep = fit_reverse(cfg.model, counts, j.z_support, j.v_support)
        else:
            counts = sample_unconditional(j, n, rng)
            rep = fit_table(cfg.model, counts, j.z_support, j.v_support)
        return rep.theta_hat, wald_cov(rep)
    except (ConvergenceError, IdentifiabilityError, ValueError):
        return None


def _run(cfg, n, grid_index):
    if cfg.n_jobs == 1:
        results = [_replicate_fit(cfg, n, (grid_index, r)) for r in range(cfg.replicates)]
    else:
        results = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_replicate_fit)(cfg, n, (grid_index, r)) for r in range(cfg.replicates))
    kept = [r for r in results if r is not None]
    excluded = len(results) - len(kept)
    if excluded > cfg.max_excluded_frac * cfg.replicates:
        raise ConvergenceError(
            f"{excluded} of {cfg.replicates} replicates at n={n} had no estimate "
            f"(limit {cfg.max_excluded_frac:.1%})")
    thetas = np.array([k[0] for k in kept])
    covs = np.array([k[1] for k in kept])
    return thetas, covs, excluded


def mc_consistency(cfg, n_grid):
    """RMSE of theta-hat about the true theta along increasing sample sizes.

    Returns a list of rows (dicts) with keys ``n``, ``replicates``,
    ``excluded``, ``rmse``, ``bias`` (max absolute mean error over
    components) and ``mean_theta``.
    """
    rows = []
    for g, n in enumerate(n_grid):
        lam, _, _ = cfg.truth(n)
        thetas, _, excluded = _run(cfg, int(n), g)
        err = thetas - lam.theta
        rows.append({
            "n": int(n),
            "replicates": int(thetas.shape[0]),
            "excluded": int(excluded),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "bias": float(np.max(np.abs(err.mean(axis=0)))),
            "mean_theta": thetas.mean(axis=0).tolist(),
        })
    return rows


def _inv_sqrt(A):
    evals, evecs = np.linalg.eigh(A)
    return evecs @ np.diag(evals ** -0.5) @ evecs.T


def mc_coverage(cfg):
    """Coverage of Wald intervals and normality of standardized estimates.

    Returns a dict with per-component ``coverage`` and ``mean_width``,
    pooled ``standardized`` summary (mean, variance, skewness) of
    ``[J^{-1}]^{-1/2} (theta_hat - theta)``, the empirical covariance of
    ``sqrt(n) (theta_hat - theta)``, the exact asymptotic covariance
    ``n [I^{-1}]_theta,theta`` and their largest relative discrepancy.
    """
    lam, misfit, n_vec = cfg.truth()
    thetas, covs, excluded = _run(cfg, cfg.n, 0)
    theta0 = lam.theta
    S = theta0.size

    lo_hi = np.array([wald_intervals(t, c, cfg.level) for t, c in zip(thetas, covs)])
    covered = (lo_hi[:, :, 0] <= theta0) & (theta0 <= lo_hi[:, :, 1])
    z = np.array([_inv_sqrt(c) @ (t - theta0) for t, c in zip(thetas, covs)]).reshape(-1)
    zc = z - z.mean()
    skew = float(np.mean(zc ** 3) / np.mean(zc ** 2) ** 1.5)

    dev = np.sqrt(cfg.n) * (thetas - theta0)
    emp_cov = np.atleast_2d(np.cov(dev, rowvar=False, ddof=1))
    oracle = None
    rel = None
    if cfg.scheme == "cond_on_y":
        I, _ = exact_moments(cfg.model, lam, cfg.joint, n_vec)
        oracle = cfg.n * safe_inverse(I)[:S, :S]
        rel = float(np.max(np.abs(emp_cov - oracle)) / np.max(np.abs(oracle)))
    return {
        "n": int(cfg.n),
        "replicates": int(thetas.shape[0]),
        "excluded": int(excluded),
        "theta_true": theta0.tolist(),
        "misspecification": misfit,
        "coverage": covered.mean(axis=0).tolist(),
        "mean_width": (lo_hi[:, :, 1] - lo_hi[:, :, 0]).mean(axis=0).tolist(),
        "standardized": {"mean": float(z.mean()), "variance": float(z.var(ddof=1)),
                         "skewness": skew},
        "empirical_cov": emp_cov.tolist(),
        "oracle_cov": None if oracle is None else oracle.tolist(),
        "cov_rel_error": rel,
    }


def _max_rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def invariance_discrepancy(model, counts, z_support, v_support):
    """Largest theta and covariance-block differences among the three fit routes."""
    fwd = fit_table(model, counts, z_support, v_support)
    rev = fit_reverse(model, counts, z_support, v_support)
    llf = fit_loglinear(counts, z_support, v_support, model=model)
    thetas = [fwd.theta_hat, rev.theta_hat, llf.theta_hat]
    covs = [wald_cov(fwd), wald_cov(rev), llf.cov_theta]
    d_theta = max(float(np.max(np.abs(a - b))) for a in thetas for b in thetas)
    d_cov = max(_max_rel(a, b) for a in covs for b in covs)
    return d_theta, d_cov


def mc_invariance(joint, n, seed, replicates, model=None):
    """Draw unconditional tables and compare the three fit routes on each.

    Returns a dict with per-replicate ``rows`` (``replicate``,
    ``theta_discrepancy``, ``cov_discrepancy``), the maxima and the number
    of excluded (degenerate or separated) replicates.
    """
    if model is None:
        model = make_log_bilinear(joint.z_support.shape[1], joint.v_support.shape[1])
    rows, excluded = [], 0
    for r in range(replicates):
        counts = sample_unconditional(joint, n, rng_for(seed, 0, r))
        try:
            d_theta, d_cov = invariance_discrepancy(model, counts, joint.z_support,
                                                    joint.v_support)
        except (ConvergenceError, IdentifiabilityError, ValueError):
            excluded += 1
            continue
        rows.append({"replicate": r, "theta_discrepancy": d_theta, "cov_discrepancy": d_cov})
    return {
        "rows": rows,
        "excluded": excluded,
        "max_theta_discrepancy": max((r["theta_discrepancy"] for r in rows), default=0.0),
        "max_cov_discrepancy": max((r["cov_discrepancy"] for r in rows), default=0.0),
    }
