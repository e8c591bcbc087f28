"""Finite joint distributions built from marginals and odds ratios.

A :class:`FiniteJoint` is a ``(J+1) x (K+1)`` table of positive cell
probabilities with feature vectors attached to its rows and columns.  Row 0
and column 0 are the reference levels and carry zero feature vectors.

:func:`ipf_fit` constructs the unique table with prescribed row and column
marginals and prescribed log odds ratios by iterative proportional fitting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConvergenceError, DataFormatError, DimensionError

__all__ = [
    "FiniteJoint",
    "LogLinearParams",
    "saturated_supports",
    "odds_ratio_matrix",
    "ipf_fit",
    "loglinear_params",
    "mixture_and_conditionals",
    "empirical_marginal",
    "kl_divergence",
    "read_table_csv",
    "write_table_csv",
]


def saturated_supports(n_rows, n_cols):
    """Indicator features: row ``j > 0`` maps to ``e_j``, row 0 to zero."""
    z = np.vstack([np.zeros((1, n_rows - 1)), np.eye(n_rows - 1)])
    v = np.vstack([np.zeros((1, n_cols - 1)), np.eye(n_cols - 1)])
    return z, v


def _as_rows(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


@dataclass(frozen=True, eq=False)
class FiniteJoint:
    """Positive probability table with reference-zero feature supports."""

    probs: np.ndarray
    z_support: np.ndarray = None
    v_support: np.ndarray = None

    def __post_init__(self):
        P = np.array(self.probs, dtype=float)
        if P.ndim != 2 or min(P.shape) < 2:
            raise DimensionError(f"joint table must be at least 2x2, got shape {P.shape}")
        if not np.all(P > 0):
            raise ValueError("all cell probabilities must be positive")
        if abs(P.sum() - 1.0) > 1e-12:
            raise ValueError(f"cell probabilities sum to {P.sum():.17g}, not 1")
        z, v = saturated_supports(*P.shape)
        z = z if self.z_support is None else _as_rows(self.z_support).copy()
        v = v if self.v_support is None else _as_rows(self.v_support).copy()
        if z.shape[0] != P.shape[0] or v.shape[0] != P.shape[1]:
            raise DimensionError("supports must have one feature vector per row/column")
        if np.any(z[0] != 0) or np.any(v[0] != 0):
            raise ValueError("reference row and column must carry zero feature vectors")
        for a in (P, z, v):
            a.setflags(write=False)
        object.__setattr__(self, "probs", P)
        object.__setattr__(self, "z_support", z)
        object.__setattr__(self, "v_support", v)

    @property
    def shape(self):
        return self.probs.shape

    @property
    def row_marginal(self):
        return self.probs.sum(axis=1)

    @property
    def col_marginal(self):
        return self.probs.sum(axis=0)

    def col_conditionals(self):
        """``p(x_j | y_k)``; each column sums to one."""
        return self.probs / self.col_marginal

    def transpose(self):
        return FiniteJoint(self.probs.T, self.v_support, self.z_support)


@dataclass(frozen=True)
class LogLinearParams:
    """``log p_jk = alpha + beta_j + gamma_k + psi_jk`` with reference terms zero."""

    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray

    def reconstruct(self):
        b = np.concatenate([[0.0], self.beta])
        g = np.concatenate([[0.0], self.gamma])
        full = np.zeros((b.size, g.size))
        full[1:, 1:] = self.psi
        return np.exp(self.alpha + b[:, None] + g[None, :] + full)


def _probs(p):
    return p.probs if isinstance(p, FiniteJoint) else np.asarray(p, dtype=float)


def odds_ratio_matrix(joint):
    """Log odds ratios ``log(p_jk p_00 / (p_j0 p_0k))`` for ``j, k >= 1``."""
    L = np.log(_probs(joint))
    return L[1:, 1:] - L[1:, :1] - L[:1, 1:] + L[0, 0]


def _check_marginal(pi, name):
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.size < 2 or not np.all(pi > 0):
        raise ValueError(f"{name} must have at least two strictly positive entries")
    if abs(pi.sum() - 1.0) > 1e-8:
        raise ValueError(f"{name} sums to {pi.sum()}, not 1")
    return pi / pi.sum()


def ipf_fit(pi_x, pi_y, psi, tol=1e-12, max_iter=10000, init=None,
            z_support=None, v_support=None):
    """Joint table with given marginals and log odds-ratio matrix.

    Starts from ``q_jk ∝ exp(psi_jk)`` (reference row and column padded with
    zeros) and alternates row and column rescaling in log space until the
    larger of the two L-infinity margin residuals is at most ``tol``.

    Parameters
    ----------
    pi_x : array (J+1,)
    pi_y : array (K+1,)
    psi : array (J, K)
        Log odds ratios relative to row 0 and column 0.
    tol : float
    max_iter : int
    init : array (J+1, K+1), optional
        Alternative positive starting table.  Its odds ratios must equal
        ``psi``, otherwise the result would not.
    z_support, v_support : array, optional
        Feature vectors attached to the result.

    Returns
    -------
    FiniteJoint
    """
    pi_x = _check_marginal(pi_x, "pi_x")
    pi_y = _check_marginal(pi_y, "pi_y")
    psi = np.asarray(psi, dtype=float).reshape(pi_x.size - 1, pi_y.size - 1)
    if not np.all(np.isfinite(psi)):
        raise ValueError("psi must be finite")

    if init is None:
        logq = np.zeros((pi_x.size, pi_y.size))
        logq[1:, 1:] = psi
    else:
        init = np.asarray(init, dtype=float)
        if init.shape != (pi_x.size, pi_y.size) or not np.all(init > 0):
            raise ValueError("init must be a positive table of the joint's shape")
        if np.max(np.abs(odds_ratio_matrix(init) - psi)) > 1e-8:
            raise ValueError("init odds ratios differ from psi")
        logq = np.log(init)

    log_px, log_py = np.log(pi_x), np.log(pi_y)
    residual = np.inf
    for _ in range(max_iter):
        logq += (log_px - logsumexp(logq, axis=1))[:, None]
        logq += (log_py - logsumexp(logq, axis=0))[None, :]
        q = np.exp(logq)
        q /= q.sum()
        residual = max(np.max(np.abs(q.sum(axis=1) - pi_x)),
                       np.max(np.abs(q.sum(axis=0) - pi_y)))
        if residual <= tol:
            return FiniteJoint(q, z_support, v_support)
    raise ConvergenceError(
        f"IPF did not reach tol={tol} in {max_iter} iterations "
        f"(margin residual {residual:.3e})", residuals=residual)


def loglinear_params(joint):
    """Decompose a table into ``alpha``, row, column and interaction terms."""
    L = np.log(_probs(joint))
    return LogLinearParams(
        alpha=float(L[0, 0]),
        beta=L[1:, 0] - L[0, 0],
        gamma=L[0, 1:] - L[0, 0],
        psi=odds_ratio_matrix(joint),
    )


def mixture_and_conditionals(joint, n_vec):
    """Covariate mixture and stratum posteriors under stratified sampling.

    With sampling fractions ``r_k = n_k / n`` the covariate density is the
    mixture ``p*(x_j) = sum_k r_k p(x_j | y_k)`` and the stratum posterior is
    ``p*_k(x_j) = r_k p(x_j | y_k) / p*(x_j)``.

    Returns
    -------
    p_star_x : ndarray (J+1,)
    p_star : ndarray (J+1, K+1)
        Rows sum to one.
    """
    n_vec = np.asarray(n_vec, dtype=float)
    P = _probs(joint)
    if n_vec.size != P.shape[1]:
        raise DimensionError(f"n_vec has {n_vec.size} entries, table has {P.shape[1]} columns")
    if np.any(n_vec <= 0):
        raise ValueError("stratum sizes must be positive")
    rbar = n_vec / n_vec.sum()
    cond = P / P.sum(axis=0)
    weighted = cond * rbar
    p_star_x = weighted.sum(axis=1)
    return p_star_x, weighted / p_star_x[:, None]


def empirical_marginal(counts):
    """Relative frequencies ``r_k / n``."""
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("counts must have a positive total")
    return counts / total


def kl_divergence(p, q):
    """Kullback-Leibler divergence ``sum p log(p / q)`` (cells with p = 0 add 0)."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise DimensionError(f"shapes differ: {p.shape} vs {q.shape}")
    if not np.all(q > 0):
        raise ValueError("q must be strictly positive")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _fmt_vec(v):
    return ";".join(repr(float(x)) for x in np.atleast_1d(v))


def _parse_vec(cell, where):
    try:
        return [float(x) for x in cell.split(";")]
    except ValueError:
        raise DataFormatError(f"{where}: cannot parse feature vector {cell!r}") from None


def write_table_csv(path, matrix, z_support, v_support):
    """Write a matrix with feature-vector row and column headers.

    The header row holds ``z\\v`` followed by one column feature vector per
    column; each following row starts with its row feature vector.  Vector
    components are separated by ``;``.
    """
    matrix = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z\\v"] + [_fmt_vec(v) for v in _as_rows(v_support)])
        for z, row in zip(_as_rows(z_support), matrix):
            w.writerow([_fmt_vec(z)] + [repr(float(x)) for x in row])


def read_table_csv(path):
    """Inverse of :func:`write_table_csv`; returns ``(matrix, z_support, v_support)``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 3:
        raise DataFormatError(f"{path}: table needs a header and at least two rows")
    header = rows[0]
    v = [_parse_vec(c, f"{path} row 1") for c in header[1:]]
    z, values = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataFormatError(f"{path} row {i}: expected {len(header)} cells, got {len(r)}")
        z.append(_parse_vec(r[0], f"{path} row {i}"))
        try:
            values.append([float(c) for c in r[1:]])
        except ValueError:
            raise DataFormatError(f"{path} row {i}: non-numeric cell") from None
    try:
        return np.array(values), np.array(z), np.array(v)
    except ValueError:
        raise DataFormatError(f"{path}: feature vectors have inconsistent lengths") from None
