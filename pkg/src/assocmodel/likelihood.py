"""Conditional ("reverse") log-likelihood for samples drawn within outcome strata.

Observations ``z`` are grouped by the outcome level ``k = 0..K`` they were
sampled under.  The likelihood treats the stratum as the response of a
multinomial logistic model with linear predictor

    eta_k(z) = gamma*_k + psi_theta(z, v_k),    gamma*_0 = 0,

and ``p*_k(z) = softmax(eta(z))_k``.  Parameters are stacked as
``lambda = (theta, gamma*_1..gamma*_K)``, theta block first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import DimensionError

__all__ = [
    "Lambda",
    "ConditionalDataset",
    "cond_prob",
    "loglik",
    "score",
    "observed_info",
]


@dataclass(frozen=True)
class Lambda:
    """Compound parameter ``(theta, gamma*)``; ``gamma*_0 = 0`` is implicit."""

    theta: np.ndarray
    gamma_star: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(-1))
        object.__setattr__(self, "gamma_star",
                           np.asarray(self.gamma_star, dtype=float).reshape(-1))

    @property
    def S(self):
        return self.theta.size

    @property
    def K(self):
        return self.gamma_star.size

    @property
    def vector(self):
        return np.concatenate([self.theta, self.gamma_star])

    @classmethod
    def from_vector(cls, vec, S):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:S], vec[S:])


@dataclass(frozen=True, eq=False)
class ConditionalDataset:
    """Covariate features sampled within fixed outcome strata.

    Parameters
    ----------
    v_levels : ndarray (K+1, K_Y)
        Response features ``v_k``; row 0 is the reference and must be zero.
    z : ndarray (N, K_X)
        Covariate feature rows.
    stratum : ndarray (N,) of int
        Stratum index of each row.
    weights : ndarray (N,)
        Multiplicity of each row (1 for raw observations).
    """

    v_levels: np.ndarray
    z: np.ndarray
    stratum: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        V = _as_rows(self.v_levels)
        Z = np.asarray(self.z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        k = np.asarray(self.stratum).astype(int).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (Z.shape[0] == k.size == w.size):
            raise DimensionError("z, stratum and weights must have equal length")
        if V.shape[0] < 2:
            raise ValueError("need at least two outcome strata (K + 1 >= 2)")
        if np.any(V[0] != 0):
            raise ValueError("reference stratum 0 must have the zero response feature")
        if k.size and (k.min() < 0 or k.max() >= V.shape[0]):
            raise ValueError("stratum index out of range")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        counts = np.bincount(k, weights=w, minlength=V.shape[0])
        if np.any(counts <= 0):
            empty = np.nonzero(counts <= 0)[0].tolist()
            raise ValueError(f"every stratum needs at least one observation; empty: {empty}")
        object.__setattr__(self, "v_levels", V)
        object.__setattr__(self, "z", Z)
        object.__setattr__(self, "stratum", k)
        object.__setattr__(self, "weights", w)

    @property
    def K(self):
        return self.v_levels.shape[0] - 1

    @property
    def n_vec(self):
        return np.bincount(self.stratum, weights=self.weights, minlength=self.K + 1)

    @property
    def n(self):
        return float(self.weights.sum())

    @classmethod
    def from_strata(cls, v_levels, strata):
        """Build from one list (or array) of z-vectors per stratum."""
        rows, ks = [], []
        for k, zs in enumerate(strata):
            zs = np.asarray(zs, dtype=float)
            if zs.ndim == 1:
                zs = zs[:, None]
            rows.append(zs)
            ks.append(np.full(zs.shape[0], k))
        Z = np.vstack(rows)
        return cls(v_levels, Z, np.concatenate(ks), np.ones(Z.shape[0]))

    @classmethod
    def from_table(cls, counts, z_support, v_support):
        """Strata are the columns of a ``(J+1) x (K+1)`` count table."""
        counts = np.asarray(counts, dtype=float)
        Zs = _as_rows(z_support)
        if Zs.shape[0] != counts.shape[0]:
            raise DimensionError("z_support needs one row per table row")
        j, k = np.nonzero(counts > 0)
        return cls(_as_rows(v_support), Zs[j], k, counts[j, k])

    def collapsed(self):
        """Merge identical (stratum, z) rows into weighted rows."""
        key = np.column_stack([self.stratum, self.z])
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        w = np.bincount(inverse.reshape(-1), weights=self.weights)
        keep = w > 0
        return ConditionalDataset(self.v_levels, uniq[keep, 1:],
                                  uniq[keep, 0].astype(int), w[keep])


def _as_rows(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _check_dims(model, lam, V):
    if lam.S != model.param_dim:
        raise DimensionError(f"theta has length {lam.S}, model expects {model.param_dim}")
    if lam.K != V.shape[0] - 1:
        raise DimensionError(
            f"gamma* has length {lam.K}, data has {V.shape[0] - 1} non-reference strata")


def _eta(model, lam, Z, V, order):
    _check_dims(model, lam, V)
    psi, grad, hess = model.derivative_tables(Z, V, lam.theta, order=order)
    gamma = np.concatenate([[0.0], lam.gamma_star])
    return psi + gamma, grad, hess


def _softmax(eta):
    shifted = eta - eta.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(e.sum(axis=-1, keepdims=True))
    return p, logp


def _eta_jacobian(grad, K):
    """``D eta_l / D lambda`` for every (row, level): shape (N, L, S + K)."""
    N, L, S = grad.shape
    D = np.zeros((N, L, S + K))
    D[:, :, :S] = grad
    D[:, np.arange(1, L), S + np.arange(K)] = 1.0
    return D


def cond_prob(model, lam, z, v_levels):
    """Conditional stratum probabilities ``p*_k(z)``.

    ``z`` may be a single feature vector (returns shape ``(K+1,)``) or a
    ``(N, K_X)`` array (returns ``(N, K+1)``).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z.reshape(1, -1) if single else z
    V = _as_rows(v_levels)
    eta, _, _ = _eta(model, lam, Z, V, order=0)
    p, _ = _softmax(eta)
    return p[0] if single else p


def loglik(model, lam, data):
    """Conditional log-likelihood ``sum_k sum_i log p*_k(z_ki)``."""
    eta, _, _ = _eta(model, lam, data.z, data.v_levels, order=0)
    logp = eta - logsumexp(eta, axis=1, keepdims=True)
    rows = np.arange(data.z.shape[0])
    return float(np.dot(data.weights, logp[rows, data.stratum]))


def _score_parts(model, lam, data, order):
    eta, grad, hess = _eta(model, lam, data.z, data.v_levels, order=order)
    p, logp = _softmax(eta)
    D = _eta_jacobian(grad, lam.K)
    Dbar = np.einsum("il,ilp->ip", p, D)
    rows = np.arange(data.z.shape[0])
    own = D[rows, data.stratum] - Dbar
    return p, D, Dbar, own, hess


def score(model, lam, data):
    """Gradient of :func:`loglik` with respect to ``(theta, gamma*)``."""
    _, _, _, own, _ = _score_parts(model, lam, data, order=1)
    return data.weights @ own


def observed_info(model, lam, data):
    """Observed information ``-d^2 loglik / d lambda d lambda^T``.

    Per observation the negative Hessian of ``log p*_k`` is the covariance of
    ``D eta_l`` under ``p*`` minus the curvature of ``psi`` (theta block only):

        sum_l p_l (D_l - Dbar)(D_l - Dbar)^T - [H_k - sum_l p_l H_l].
    """
    p, D, Dbar, _, hess = _score_parts(model, lam, data, order=2)
    centered = D - Dbar[:, None, :]
    wp = p * data.weights[:, None]
    C = (centered * np.sqrt(wp)[:, :, None]).reshape(-1, centered.shape[2])
    info = C.T @ C
    if hess is not None:
        S = lam.S
        rows = np.arange(data.z.shape[0])
        curv = hess[rows, data.stratum] - np.einsum("il,ilrs->irs", p, hess)
        info[:S, :S] -= np.einsum("i,irs->rs", data.weights, curv)
    return 0.5 * (info + info.T)
