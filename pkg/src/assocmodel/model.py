"""Parametric log odds-ratio families.

An association model fixes the log odds-ratio function of a joint
distribution as ``psi(x, y) = G(z, v, theta)`` with feature vectors
``z = h_X(x)`` and ``v = h_Y(y)``.  The library never sees raw ``x`` or
``y``; callers supply features whose reference value maps to the zero
vector, so ``G(0, v, theta) = G(z, 0, theta) = 0``.

Matrix parameters are flattened row-major into the parameter vector: for a
``k_x x k_y`` matrix, entry ``(a, b)`` sits at position ``a * k_y + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import DimensionError, EvaluationError

__all__ = [
    "AssociationModel",
    "eval_psi",
    "make_log_bilinear",
    "make_glm_canonical",
    "make_multinomial_logit",
    "multinomial_levels",
    "make_mv_linear",
    "restrict_bilinear",
    "derivative_check",
    "model_from_config",
]


@dataclass(frozen=True, eq=False)
class AssociationModel:
    """A family ``psi_theta(z, v) = G(z, v, theta)`` with its theta-derivatives.

    Parameters
    ----------
    param_dim : int
        Length ``S`` of the flattened parameter vector.
    dim_x, dim_y : int
        Lengths of the feature vectors ``z`` and ``v``.
    g_eval, g_grad, g_hess : callable
        ``(z, v, theta)`` -> scalar, ``(S,)`` array, ``(S, S)`` array.
    g_third : callable, optional
        ``(z, v, theta)`` -> ``(S, S, S)`` array of third derivatives.
    envelope_x, envelope_y : callable, optional
        Nonnegative bounds with ``|G| <= (env_x(z) + env_y(v)) * ||theta||``.
    kind : str
        Constructor tag, used for reporting and config round trips.
    theta : ndarray, optional
        Parameter value implied by the constructing regression model, when
        the constructor was given regression coefficients.
    x_map, y_map : ndarray, optional
        Present only for log-bilinear models: ``G = (x_map z)^T Theta (y_map v)``.
    """

    param_dim: int
    dim_x: int
    dim_y: int
    g_eval: Callable
    g_grad: Callable
    g_hess: Callable
    g_third: Optional[Callable] = None
    envelope_x: Optional[Callable] = None
    envelope_y: Optional[Callable] = None
    kind: str = "general"
    theta: Optional[np.ndarray] = None
    x_map: Optional[np.ndarray] = field(default=None, repr=False)
    y_map: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.param_dim < 0 or self.dim_x < 1 or self.dim_y < 1:
            raise DimensionError(
                f"invalid model dimensions S={self.param_dim}, "
                f"K_X={self.dim_x}, K_Y={self.dim_y}")

    @property
    def is_bilinear(self):
        return self.x_map is not None

    @property
    def theta_shape(self):
        """Shape of the parameter matrix for log-bilinear models, else ``(S,)``."""
        if self.is_bilinear:
            return (self.x_map.shape[0], self.y_map.shape[0])
        return (self.param_dim,)

    def param_names(self):
        if self.is_bilinear:
            rows, cols = self.theta_shape
            return [f"theta[{a},{b}]" for a in range(rows) for b in range(cols)]
        return [f"theta[{s}]" for s in range(self.param_dim)]

    def _check(self, z, v, theta):
        z = np.asarray(z, dtype=float).reshape(-1)
        v = np.asarray(v, dtype=float).reshape(-1)
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if z.size != self.dim_x:
            raise DimensionError(f"z has length {z.size}, expected {self.dim_x}")
        if v.size != self.dim_y:
            raise DimensionError(f"v has length {v.size}, expected {self.dim_y}")
        if theta.size != self.param_dim:
            raise DimensionError(
                f"theta has length {theta.size}, expected {self.param_dim}")
        return z, v, theta

    def psi(self, z, v, theta):
        z, v, theta = self._check(z, v, theta)
        return float(self.g_eval(z, v, theta))

    def grad(self, z, v, theta):
        z, v, theta = self._check(z, v, theta)
        return np.asarray(self.g_grad(z, v, theta), dtype=float).reshape(self.param_dim)

    def hess(self, z, v, theta):
        z, v, theta = self._check(z, v, theta)
        S = self.param_dim
        return np.asarray(self.g_hess(z, v, theta), dtype=float).reshape(S, S)

    def third(self, z, v, theta):
        z, v, theta = self._check(z, v, theta)
        if self.g_third is None:
            raise NotImplementedError("model does not supply third derivatives")
        S = self.param_dim
        return np.asarray(self.g_third(z, v, theta), dtype=float).reshape(S, S, S)

    def derivative_tables(self, Z, V, theta, order=1):
        """Evaluate ``psi`` and its theta-derivatives on all (row, level) pairs.

        Parameters
        ----------
        Z : ndarray of shape (N, dim_x)
        V : ndarray of shape (L, dim_y)
        theta : ndarray of shape (S,)
        order : {0, 1, 2}

        Returns
        -------
        psi : ndarray (N, L)
        grad : ndarray (N, L, S) or None when ``order < 1``
        hess : ndarray (N, L, S, S) or None when ``order < 2`` or when the
            model is log-bilinear (second derivatives vanish).
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if Z.shape[1] != self.dim_x or V.shape[1] != self.dim_y:
            raise DimensionError(
                f"feature arrays have widths {Z.shape[1]}, {V.shape[1]}; "
                f"expected {self.dim_x}, {self.dim_y}")
        if theta.size != self.param_dim:
            raise DimensionError(
                f"theta has length {theta.size}, expected {self.param_dim}")
        N, L, S = Z.shape[0], V.shape[0], self.param_dim

        if self.is_bilinear:
            Zs = Z @ self.x_map.T
            Vs = V @ self.y_map.T
            with np.errstate(over="ignore", invalid="ignore"):
                psi = Zs @ theta.reshape(self.theta_shape) @ Vs.T
            # exact zeros at zero features, also when other entries overflow
            psi[~Zs.any(axis=1)] = 0.0
            psi[:, ~Vs.any(axis=1)] = 0.0
            grad = None
            if order >= 1:
                grad = np.einsum("ia,lb->ilab", Zs, Vs).reshape(N, L, S)
            hess = None
        else:
            psi = np.empty((N, L))
            grad = np.empty((N, L, S)) if order >= 1 else None
            hess = np.empty((N, L, S, S)) if order >= 2 else None
            for i in range(N):
                for l in range(L):
                    psi[i, l] = self.g_eval(Z[i], V[l], theta)
                    if order >= 1:
                        grad[i, l] = np.reshape(self.g_grad(Z[i], V[l], theta), S)
                    if order >= 2:
                        hess[i, l] = np.reshape(self.g_hess(Z[i], V[l], theta), (S, S))

        bad = ~np.isfinite(psi)
        if bad.any():
            l = int(np.nonzero(bad.any(axis=0))[0][0])
            raise EvaluationError(
                f"non-finite log odds ratio in stratum {l}", stratum=l)
        return psi, grad, hess

    def swapped(self):
        """Model with the roles of ``z`` and ``v`` exchanged.

        Returns
        -------
        model : AssociationModel
            ``G'(v, z, theta') = G(z, v, theta)``.
        perm : ndarray of int
            Index array with ``theta = theta_prime[perm]``.  For log-bilinear
            models ``theta'`` is the transposed matrix; otherwise the identity.
        """
        if self.is_bilinear:
            rows, cols = self.theta_shape
            model = _bilinear(self.y_map, self.x_map, kind=self.kind + "_swapped")
            perm = np.arange(rows * cols).reshape(cols, rows).T.reshape(-1)
            return model, perm

        f, g, h, t = self.g_eval, self.g_grad, self.g_hess, self.g_third
        model = AssociationModel(
            param_dim=self.param_dim, dim_x=self.dim_y, dim_y=self.dim_x,
            g_eval=lambda v, z, th: f(z, v, th),
            g_grad=lambda v, z, th: g(z, v, th),
            g_hess=lambda v, z, th: h(z, v, th),
            g_third=None if t is None else (lambda v, z, th: t(z, v, th)),
            envelope_x=self.envelope_y, envelope_y=self.envelope_x,
            kind=self.kind + "_swapped")
        return model, np.arange(self.param_dim)

    def envelope_ok(self, z, v, theta):
        """Check the (OR2)-type bound at one probe; True if no envelope is set."""
        if self.envelope_x is None or self.envelope_y is None:
            return True
        z, v, theta = self._check(z, v, theta)
        bound = (self.envelope_x(z) + self.envelope_y(v)) * np.linalg.norm(theta)
        return abs(self.g_eval(z, v, theta)) <= bound * (1 + 1e-12) + 1e-300


def eval_psi(model, z, v, theta):
    """Log odds-ratio contribution ``psi_theta`` at features ``(z, v)``."""
    return model.psi(z, v, theta)


def _bilinear(x_map, y_map, kind="log_bilinear", theta=None):
    x_map = np.array(x_map, dtype=float)
    y_map = np.array(y_map, dtype=float)
    x_map.setflags(write=False)
    y_map.setflags(write=False)
    rows, cols = x_map.shape[0], y_map.shape[0]
    S = rows * cols

    def g_eval(z, v, th):
        return float((x_map @ z) @ np.reshape(th, (rows, cols)) @ (y_map @ v))

    def g_grad(z, v, th):
        return np.outer(x_map @ z, y_map @ v).reshape(S)

    def g_hess(z, v, th):
        return np.zeros((S, S))

    def g_third(z, v, th):
        return np.zeros((S, S, S))

    if theta is not None:
        theta = np.array(theta, dtype=float).reshape(S)
        theta.setflags(write=False)
    return AssociationModel(
        param_dim=S, dim_x=x_map.shape[1], dim_y=y_map.shape[1],
        g_eval=g_eval, g_grad=g_grad, g_hess=g_hess, g_third=g_third,
        envelope_x=lambda z: float(np.sum((x_map @ z) ** 2)),
        envelope_y=lambda v: float(np.sum((y_map @ v) ** 2)),
        kind=kind, theta=theta, x_map=x_map, y_map=y_map)


def make_log_bilinear(k_x, k_y):
    """Log-bilinear association ``psi = z^T Theta v`` with a ``k_x x k_y`` Theta."""
    if int(k_x) < 1 or int(k_y) < 1:
        raise DimensionError(f"dimensions must be positive, got ({k_x}, {k_y})")
    return _bilinear(np.eye(int(k_x)), np.eye(int(k_y)))


def make_glm_canonical(k_x, beta=None, dispersion=1.0):
    """GLM with canonical link: ``psi = z^T theta (y - y_ref)``.

    The response feature is the scalar ``y - y_ref``.  When regression
    coefficients ``beta`` are given, the implied association parameter
    ``theta = beta / a(phi)`` is attached as ``model.theta``; for logistic
    and Poisson regression ``a(phi) = 1`` so ``theta = beta``.
    """
    if int(k_x) < 1:
        raise DimensionError(f"k_x must be positive, got {k_x}")
    theta = None
    if beta is not None:
        if dispersion <= 0:
            raise ValueError("dispersion a(phi) must be positive")
        beta = np.asarray(beta, dtype=float).reshape(-1)
        if beta.size != int(k_x):
            raise DimensionError(f"beta has length {beta.size}, expected {k_x}")
        theta = beta / dispersion
    return _bilinear(np.eye(int(k_x)), np.eye(1), kind="glm_canonical", theta=theta)


def multinomial_levels(n_classes):
    """Response features for classes ``0..K``: zero vector, then unit vectors."""
    if int(n_classes) < 2:
        raise DimensionError(f"need at least 2 classes, got {n_classes}")
    K = int(n_classes) - 1
    return np.vstack([np.zeros((1, K)), np.eye(K)])


def make_multinomial_logit(k_x, n_classes):
    """Multinomial linear logistic regression as a log-bilinear association.

    Theta is ``k_x x K`` whose column ``k`` is the coefficient vector of
    class ``k``; class features come from :func:`multinomial_levels`.
    """
    if int(n_classes) < 2:
        raise DimensionError(f"need at least 2 classes, got {n_classes}")
    if int(k_x) < 1:
        raise DimensionError(f"k_x must be positive, got {k_x}")
    return _bilinear(np.eye(int(k_x)), np.eye(int(n_classes) - 1),
                     kind="multinomial_logit")


def make_mv_linear(beta, sigma):
    """Multivariate normal linear regression ``E[Y|x] = alpha + beta^T z``.

    The association parameter is ``theta = beta sigma^{-1}`` with ``h_Y(y) = y``.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    K = sigma.shape[0]
    if sigma.shape != (K, K) or beta.shape[1] != K:
        raise DimensionError(
            f"beta {beta.shape} and sigma {sigma.shape} do not conform")
    if not np.allclose(sigma, sigma.T, rtol=1e-12, atol=1e-14):
        raise ValueError("sigma must be symmetric")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("sigma must be positive definite") from None
    theta = np.linalg.solve(sigma, beta.T).T
    return _bilinear(np.eye(beta.shape[0]), np.eye(K), kind="mv_linear",
                     theta=theta.reshape(-1))


def restrict_bilinear(model, A, B):
    """Submodel ``Theta = A^T Theta* B`` of a log-bilinear model.

    The result is again log-bilinear, over ``Theta*`` and the mapped
    features ``A h_X`` and ``B h_Y``.
    """
    if not model.is_bilinear:
        raise ValueError("restriction requires a log-bilinear base model")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    rows, cols = model.theta_shape
    if A.shape[1] != rows or B.shape[1] != cols:
        raise DimensionError(
            f"A {A.shape} and B {B.shape} do not conform to Theta {(rows, cols)}")
    return _bilinear(A @ model.x_map, B @ model.y_map, kind="restricted")


def derivative_check(model, z, v, theta, rel_step=1e-5):
    """Largest relative discrepancies of analytic derivatives vs central differences.

    Step for parameter ``r`` is ``rel_step * max(1, |theta_r|)``.  Returns a
    dict with keys ``grad``, ``hess`` and, when available, ``third``.
    """
    z, v, theta = model._check(z, v, theta)
    S = model.param_dim
    steps = rel_step * np.maximum(1.0, np.abs(theta))

    def central(fn, shape):
        out = np.empty((S,) + shape)
        for r in range(S):
            e = np.zeros(S)
            e[r] = steps[r]
            hi = np.asarray(fn(z, v, theta + e), dtype=float).reshape(shape)
            lo = np.asarray(fn(z, v, theta - e), dtype=float).reshape(shape)
            out[r] = (hi - lo) / (2 * steps[r])
        return np.moveaxis(out, 0, -1)

    def rel(a, b):
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))

    report = {
        "grad": rel(model.grad(z, v, theta), central(model.g_eval, ())),
        "hess": rel(model.hess(z, v, theta), central(model.g_grad, (S,))),
    }
    if model.g_third is not None:
        report["third"] = rel(model.third(z, v, theta), central(model.g_hess, (S, S)))
    return report


def model_from_config(spec):
    """Build a model from a config mapping.

    Recognized ``kind`` values: ``log_bilinear`` (``k_x``, ``k_y``),
    ``glm_canonical`` (``k_x``, optional ``beta``, ``dispersion``),
    ``multinomial_logit`` (``k_x``, ``n_classes``), ``mv_linear``
    (``beta``, ``sigma``) and ``restricted`` (``base``, ``A``, ``B``).
    """
    spec = dict(spec)
    kind = spec.get("kind")
    try:
        if kind == "log_bilinear":
            return make_log_bilinear(spec["k_x"], spec["k_y"])
        if kind == "glm_canonical":
            return make_glm_canonical(spec["k_x"], spec.get("beta"),
                                      spec.get("dispersion", 1.0))
        if kind == "multinomial_logit":
            return make_multinomial_logit(spec["k_x"], spec["n_classes"])
        if kind == "mv_linear":
            return make_mv_linear(spec["beta"], spec["sigma"])
        if kind == "restricted":
            return restrict_bilinear(model_from_config(spec["base"]),
                                     spec["A"], spec["B"])
    except KeyError as exc:
        raise ValueError(f"model spec of kind {kind!r} is missing {exc}") from None
    raise ValueError(f"unknown model kind {kind!r}")
