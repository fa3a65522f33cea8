"""Differentiable squared-error regression models on feature bases.

A :class:`DerivativeBundle` packages a per-sample loss l(theta, x, y) with
its first and second derivatives in theta and x — everything the influence
and sensitivity formulas consume.  The concrete instances here are basis
regression models with loss ``0.5 * (y - theta . v(x))^2`` for a feature
map v; their derivatives are

    grad_theta    = (theta.v - y) v
    grad_x        = (theta.v - y) J(x)^T theta
    hessian_theta = v v^T
    mixed_grad    = v (J^T theta)^T + (theta.v - y) J

with J(x) the (d, m) Jacobian dv/dx.  Batch variants avoid per-sample
Python loops; optimizers and estimators rely on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dataset import Dataset
from .errors import ConfigurationError, RankDeficiencyError

BASIS_KINDS = ("identity", "quadratic-diag", "full-quadratic")

CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class BasisSpec:
    """Feature map selector.

    identity         v(x) = x                        d = m
    quadratic-diag   v(x) = (x, (x/2) ⊙ (x/2))       d = 2m
    full-quadratic   v(x) = (x, x^2/2, {x_j x_k}_{j<k})  d = m(m+3)/2
    """

    kind: str
    m: int

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigurationError(
                f"unknown basis kind {self.kind!r}; expected one of {BASIS_KINDS}"
            )
        if self.m < 1:
            raise ConfigurationError(f"input dimension must be >= 1, got {self.m}")

    @property
    def d(self) -> int:
        if self.kind == "identity":
            return self.m
        if self.kind == "quadratic-diag":
            return 2 * self.m
        return self.m * (self.m + 3) // 2

    def pair_indices(self) -> list[tuple[int, int]]:
        """Cross-term column order for full-quadratic: (j, k), j < k, lexicographic."""
        return [(j, k) for j in range(self.m) for k in range(j + 1, self.m)]


class DerivativeBundle:
    """Abstract loss-plus-derivatives contract.

    Subclasses must implement the per-sample methods; the batch methods have
    generic loop fallbacks that subclasses override with vectorized versions
    where performance matters.
    """

    dim_theta: int
    dim_x: int

    # -- per-sample contract -------------------------------------------------
    def loss(self, theta, x, y) -> float:
        raise NotImplementedError

    def grad_theta(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def grad_x(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def hessian_theta(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    def mixed_grad(self, theta, x, y) -> np.ndarray:
        raise NotImplementedError

    # -- batch fallbacks -----------------------------------------------------
    def loss_batch(self, theta, X, Y) -> np.ndarray:
        return np.array([self.loss(theta, x, y) for x, y in zip(X, Y)])

    def grad_x_batch(self, theta, X, Y) -> np.ndarray:
        return np.stack([self.grad_x(theta, x, y) for x, y in zip(X, Y)])

    def grad_theta_mean(self, theta, X, Y) -> np.ndarray:
        acc = np.zeros(self.dim_theta)
        for x, y in zip(X, Y):
            acc += self.grad_theta(theta, x, y)
        return acc / len(Y)

    def hessian_mean(self, theta, X, Y) -> np.ndarray:
        acc = np.zeros((self.dim_theta, self.dim_theta))
        for x, y in zip(X, Y):
            acc += self.hessian_theta(theta, x, y)
        return acc / len(Y)

    def mixed_dot_batch(self, theta, X, Y, W) -> np.ndarray:
        """Rows mixed_grad(theta, x_i, y_i) @ w_i, shape (n, d)."""
        return np.stack(
            [self.mixed_grad(theta, x, y) @ w for x, y, w in zip(X, Y, W)]
        )


class BasisModel(DerivativeBundle):
    """Squared-error regression on a feature basis; loss 0.5 (y - theta.v(x))^2."""

    def __init__(self, basis: BasisSpec):
        self.basis = basis
        self.dim_theta = basis.d
        self.dim_x = basis.m

    # -- feature map ----------------------------------------------------------
    def features(self, X: np.ndarray) -> np.ndarray:
        """v(x) for each row of X, shape (n, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        kind, m = self.basis.kind, self.basis.m
        if kind == "identity":
            return X.copy()
        if kind == "quadratic-diag":
            return np.hstack([X, (X / 2.0) * (X / 2.0)])
        cols = [X, X**2 / 2.0]
        pairs = self.basis.pair_indices()
        if pairs:
            j, k = np.array(pairs).T
            cols.append(X[:, j] * X[:, k])
        return np.hstack(cols)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """dv/dx at a single point, shape (d, m)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        kind, m = self.basis.kind, self.basis.m
        if kind == "identity":
            return np.eye(m)
        if kind == "quadratic-diag":
            return np.vstack([np.eye(m), np.diag(x / 2.0)])
        J = np.zeros((self.basis.d, m))
        J[:m] = np.eye(m)
        J[m : 2 * m] = np.diag(x)
        for row, (j, k) in enumerate(self.basis.pair_indices(), start=2 * m):
            J[row, j] = x[k]
            J[row, k] = x[j]
        return J

    def jacobian_t_theta(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Rows J(x_i)^T theta — the x-gradient of the prediction, shape (n, m)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        kind, m = self.basis.kind, self.basis.m
        theta = np.asarray(theta, dtype=np.float64)
        if kind == "identity":
            return np.broadcast_to(theta, X.shape).copy()
        if kind == "quadratic-diag":
            return theta[:m] + theta[m:] * (X / 2.0)
        S = self._quadratic_form_matrix(theta)
        return theta[:m] + X @ S

    def jacobian_dot(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """Rows J(x_i) @ w_i, shape (n, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        kind, m = self.basis.kind, self.basis.m
        if kind == "identity":
            return W.copy()
        if kind == "quadratic-diag":
            return np.hstack([W, (X / 2.0) * W])
        out = np.empty((X.shape[0], self.basis.d))
        out[:, :m] = W
        out[:, m : 2 * m] = X * W
        pairs = self.basis.pair_indices()
        if pairs:
            j, k = np.array(pairs).T
            out[:, 2 * m :] = X[:, k] * W[:, j] + X[:, j] * W[:, k]
        return out

    def _quadratic_form_matrix(self, theta: np.ndarray) -> np.ndarray:
        # prediction = theta_lin.x + 0.5 x^T S x with S_kk = theta_sq_k,
        # S_jk = theta_pair_jk; then J^T theta = theta_lin + S x.
        m = self.basis.m
        S = np.diag(theta[m : 2 * m]).astype(np.float64)
        for idx, (j, k) in enumerate(self.basis.pair_indices()):
            S[j, k] = S[k, j] = theta[2 * m + idx]
        return S

    # -- per-sample contract ---------------------------------------------------
    def residual(self, theta, x, y) -> float:
        return float(self.features(x)[0] @ theta - y)

    def loss(self, theta, x, y) -> float:
        return 0.5 * self.residual(theta, x, y) ** 2

    def grad_theta(self, theta, x, y) -> np.ndarray:
        v = self.features(x)[0]
        return (v @ theta - y) * v

    def grad_x(self, theta, x, y) -> np.ndarray:
        r = self.residual(theta, x, y)
        return r * self.jacobian_t_theta(theta, x)[0]

    def hessian_theta(self, theta, x, y) -> np.ndarray:
        v = self.features(x)[0]
        return np.outer(v, v)

    def mixed_grad(self, theta, x, y) -> np.ndarray:
        v = self.features(x)[0]
        jt = self.jacobian_t_theta(theta, x)[0]
        r = float(v @ theta - y)
        return np.outer(v, jt) + r * self.jacobian(x)

    # -- vectorized batch paths --------------------------------------------------
    def residual_batch(self, theta, X, Y) -> np.ndarray:
        return self.features(X) @ theta - Y

    def loss_batch(self, theta, X, Y) -> np.ndarray:
        return 0.5 * self.residual_batch(theta, X, Y) ** 2

    def grad_x_batch(self, theta, X, Y) -> np.ndarray:
        r = self.residual_batch(theta, X, Y)
        return r[:, None] * self.jacobian_t_theta(theta, X)

    def grad_theta_mean(self, theta, X, Y) -> np.ndarray:
        V = self.features(X)
        return V.T @ (V @ theta - Y) / len(Y)

    def hessian_mean(self, theta, X, Y) -> np.ndarray:
        V = self.features(X)
        return V.T @ V / len(Y)

    def mixed_dot_batch(self, theta, X, Y, W) -> np.ndarray:
        # mixed_i @ w_i = v_i ((J^T theta)_i . w_i) + r_i (J w)_i
        V = self.features(X)
        r = V @ theta - Y
        s = np.sum(self.jacobian_t_theta(theta, X) * W, axis=1)
        return V * s[:, None] + r[:, None] * self.jacobian_dot(X, W)


def make_regression_model(basis: BasisSpec) -> BasisModel:
    """Squared-error regression bundle for the given feature basis."""
    return BasisModel(basis)


def basis_gram(model: BasisModel, d: Dataset) -> np.ndarray:
    """Sample Gram matrix (1/n) sum_i v(x_i) v(x_i)^T."""
    V = model.features(d.inputs)
    return V.T @ V / d.n


def fit(model: BasisModel, d: Dataset) -> np.ndarray:
    """Exact least-squares solution of the basis regression on a dataset.

    Fails with a :class:`RankDeficiencyError` (reporting the condition
    estimate) instead of silently regularizing when the Gram matrix is
    numerically singular.
    """
    V = model.features(d.inputs)
    G = V.T @ V
    eigs = scipy.linalg.eigvalsh(G)
    if eigs[-1] <= 0 or eigs[0] <= 0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        cond = float("inf") if eigs[0] <= 0 else float(eigs[-1] / eigs[0])
        raise RankDeficiencyError(
            f"singular basis Gram matrix (condition estimate {cond:.3e})", cond
        )
    c, low = scipy.linalg.cho_factor(G)
    return scipy.linalg.cho_solve((c, low), V.T @ d.outputs)


def finite_difference_check(
    model: DerivativeBundle,
    theta: np.ndarray,
    x: np.ndarray,
    y: float,
    h: float = 1e-5,
) -> float:
    """Worst relative error of the analytic derivatives vs central differences.

    Covers grad_theta, grad_x, hessian_theta and mixed_grad.  Relative error
    uses a unit floor in the denominator so identically-zero derivatives
    compare exactly.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d, m = theta.size, x.size

    def rel(analytic, numeric):
        analytic, numeric = np.asarray(analytic), np.asarray(numeric)
        denom = max(1.0, float(np.max(np.abs(analytic))))
        return float(np.max(np.abs(analytic - numeric))) / denom

    num_gt = np.zeros(d)
    num_ht = np.zeros((d, d))
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        num_gt[a] = (model.loss(theta + e, x, y) - model.loss(theta - e, x, y)) / (2 * h)
        num_ht[:, a] = (
            model.grad_theta(theta + e, x, y) - model.grad_theta(theta - e, x, y)
        ) / (2 * h)

    num_gx = np.zeros(m)
    num_mx = np.zeros((d, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        num_gx[k] = (model.loss(theta, x + e, y) - model.loss(theta, x - e, y)) / (2 * h)
        num_mx[:, k] = (
            model.grad_theta(theta, x + e, y) - model.grad_theta(theta, x - e, y)
        ) / (2 * h)

    return max(
        rel(model.grad_theta(theta, x, y), num_gt),
        rel(model.grad_x(theta, x, y), num_gx),
        rel(model.hessian_theta(theta, x, y), num_ht),
        rel(model.mixed_grad(theta, x, y), num_mx),
    )
