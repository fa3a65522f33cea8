"""Kernel ridge regression, the two-layer ReLU tangent kernel, and its influence.

The regression objective is

    L(theta, X, Y) = (1/n) sum_i (y_i - K(x_i).theta)^2 + lambda ||theta||^2,

an un-halved squared error (unlike the basis models), so derivative
formulas here carry the factor 2.  Because every sample appears inside
every kernel row, the loss does not decompose per sample; input gradients
and the influence assembly contract the kernel derivative tensor

    dK(u, v)/du = A(u, v) * v + B(u, v) * u

through scalar coefficient matrices, which keeps memory at O(n^2 + nm)
even for image-sized inputs.

The tangent-kernel entry for unit rows is s (pi - arccos s) / (2 pi) with
s = x_i.x_j.  Off the unit sphere (as happens under perturbation) the
angle-normalized extension s (pi - arccos(s / (|u||v|))) / (2 pi) is used:
it coincides with the displayed kernel on the sphere and stays
differentiable at the diagonal, where the raw form has an arccos
singularity.  The arccos argument is clamped a hair inside [-1, 1] before
differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .attack import steepest_directions
from .dataset import Dataset, mean_norm
from .errors import ConfigurationError, DegenerateGradientError, NumericalError
from .rng import substream

KERNEL_KINDS = ("linear", "rbf", "ntk")

UNIT_ROW_TOL = 1e-8
ARCCOS_CLAMP = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family, bandwidth (rbf only) and ridge penalty."""

    kind: str
    lam: float
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigurationError(
                f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}"
            )
        if self.lam <= 0:
            raise ConfigurationError(f"ridge penalty must be > 0, got {self.lam}")
        if self.kind == "rbf":
            if self.gamma is None or self.gamma <= 0:
                raise ConfigurationError("rbf kernel needs a bandwidth gamma > 0")


def ntk_matrix(X: np.ndarray) -> np.ndarray:
    """Tangent-kernel Gram matrix for unit-normalized rows.

    entry(i, j) = s (pi - arccos(clamp(s, -1, 1))) / (2 pi), s = x_i.x_j.
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.max(np.abs(norms - 1.0)) > UNIT_ROW_TOL:
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise ConfigurationError(
            f"tangent kernel requires unit-normalized rows; row {worst} has "
            f"l2 norm {norms[worst]:.6f}"
        )
    s = X @ X.T
    return s * (math.pi - np.arccos(np.clip(s, -1.0, 1.0))) / (2.0 * math.pi)


def gram_matrix(spec: KernelSpec, X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    """Kernel values K(x_i, z_j); Z defaults to X."""
    X = np.asarray(X, dtype=np.float64)
    Z = X if Z is None else np.asarray(Z, dtype=np.float64)
    if spec.kind == "linear":
        return X @ Z.T
    if spec.kind == "rbf":
        sq = (
            np.sum(X**2, axis=1)[:, None]
            + np.sum(Z**2, axis=1)[None, :]
            - 2.0 * X @ Z.T
        )
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * spec.gamma**2))
    s = X @ Z.T
    rho = np.linalg.norm(X, axis=1)[:, None] * np.linalg.norm(Z, axis=1)[None, :]
    c = np.clip(s / rho, -1.0, 1.0)
    K = s * (math.pi - np.arccos(c)) / (2.0 * math.pi)
    if Z is X:
        # coincident pairs have angle exactly 0; arccos of a c within ulps of 1
        # would otherwise inject noise ~1e-8 that finite differences amplify
        diag = np.arange(X.shape[0])
        K[diag, diag] = s[diag, diag] / 2.0
    return K


def _pair_coefficients(
    spec: KernelSpec, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(K, A, B) with dK(x_i, x_j)/dx_i = A_ij x_j + B_ij x_i."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if spec.kind == "linear":
        K = X @ X.T
        return K, np.ones((n, n)), np.zeros((n, n))
    if spec.kind == "rbf":
        K = gram_matrix(spec, X)
        A = K / spec.gamma**2
        return K, A, -A
    s = X @ X.T
    norms = np.linalg.norm(X, axis=1)
    rho = norms[:, None] * norms[None, :]
    K = gram_matrix(spec, X)
    c = np.clip(s / rho, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    inv_root = 1.0 / np.sqrt(1.0 - c**2)
    base = (math.pi - np.arccos(c)) / (2.0 * math.pi)
    A = base + s * inv_root / (2.0 * math.pi * rho)
    B = -(s**2) * inv_root / (2.0 * math.pi * rho * (norms**2)[:, None])
    # Coincident pairs: the angle terms of A and B cancel exactly, but not in
    # floats once clamped; substitute the analytic limit (K(x, x) = |x|^2 / 2,
    # so each slot contributes x/2, smooth in x).
    diag = np.arange(X.shape[0])
    A[diag, diag] = 0.5
    B[diag, diag] = 0.0
    return K, A, B


def kernel_derivative(spec: KernelSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """dK(u, v)/du for a single pair (reference implementation for checks)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    X = np.stack([u, v])
    _, A, B = _pair_coefficients(spec, X)
    return A[0, 1] * v + B[0, 1] * u


# ---------------------------------------------------------------------------
# Ridge fit and loss derivatives
# ---------------------------------------------------------------------------


def kernel_loss(spec: KernelSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    K = gram_matrix(spec, X)
    r = K @ theta - Y
    return float(np.mean(r**2) + spec.lam * theta @ theta)


def kernel_grad_theta(
    spec: KernelSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray
) -> np.ndarray:
    K = gram_matrix(spec, X)
    return 2.0 / len(Y) * (K @ (K @ theta - Y)) + 2.0 * spec.lam * theta


def kernel_grad_inputs(
    spec: KernelSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray
) -> np.ndarray:
    """Gradient of the ridge objective in every input row, shape (n, m).

    Row k is the derivative with respect to x_k, accounting for x_k's
    appearance in both kernel slots.
    """
    K, A, B = _pair_coefficients(spec, X)
    n = len(Y)
    r = K @ theta - Y
    M1 = (A * theta[None, :]) @ X
    M2 = (A * r[None, :]) @ X
    coef = r * (B @ theta) + theta * (B @ r)
    return 2.0 / n * (r[:, None] * M1 + theta[:, None] * M2 + coef[:, None] * X)


def fit_kernel_ridge(spec: KernelSpec, d: Dataset) -> np.ndarray:
    """Minimizer of the kernel ridge objective: solve (K^2 + n lam I) theta = K y."""
    K = gram_matrix(spec, d.inputs)
    G = K @ K + d.n * spec.lam * np.eye(d.n)
    try:
        c, low = scipy.linalg.cho_factor(G)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"kernel ridge system not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve((c, low), K @ d.outputs)


# ---------------------------------------------------------------------------
# Kernel influence
# ---------------------------------------------------------------------------


def kernel_aif(
    spec: KernelSpec,
    theta: np.ndarray,
    d: Dataset,
    p: float = 2.0,
    norm_scale: float | None = None,
    skip_degenerate: bool = False,
) -> np.ndarray:
    """Influence vector of the kernel ridge fit under an l_p input attack.

    Assembles, for each sample k, the steepest direction of the objective's
    gradient in x_k scaled by the mean input norm, contracts it against the
    mixed parameter-input derivative of the objective, and solves against
    the objective's theta-Hessian:

        I = -(K^2 + n lam I)^{-1} (K (T theta) + T^T r),
        T_ij = dK(x_i, x_j)/d(x_i) . w_i + dK(x_i, x_j)/d(x_j) . w_j,

    where w_k = scale * phi_k and r is the residual vector.
    """
    theta = np.asarray(theta, dtype=np.float64)
    scale = mean_norm(d, p) if norm_scale is None else float(norm_scale)
    X, Y = d.inputs, d.outputs
    n = d.n

    G = kernel_grad_inputs(spec, theta, X, Y)
    alive = np.abs(G).max(axis=1) > 0
    if not np.any(alive):
        raise DegenerateGradientError("objective gradient vanishes at every input")
    if not np.all(alive) and not skip_degenerate:
        dead = np.nonzero(~alive)[0]
        raise DegenerateGradientError(
            f"{dead.size} input(s) have zero objective gradient "
            f"(first indices {dead[:5].tolist()}); pass skip_degenerate=True to "
            "leave them unattacked"
        )
    W = scale * steepest_directions(G, p)

    K, A, B = _pair_coefficients(spec, X)
    r = K @ theta - Y
    P = X @ W.T  # P[a, b] = x_a . w_b
    dP = np.diag(P)
    T = A * P.T + B * dP[:, None] + A.T * P + B.T * dP[None, :]

    lhs = K @ K + n * spec.lam * np.eye(n)
    rhs = K @ (T @ theta) + T.T @ r
    try:
        c, low = scipy.linalg.cho_factor(lhs)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"kernel influence system not positive definite: {exc}") from exc
    return -scipy.linalg.cho_solve((c, low), rhs)


# ---------------------------------------------------------------------------
# Robust kernel fit (PGD with a frozen-Hessian outer step)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelRobustResult:
    theta: np.ndarray
    converged: bool
    grad_norm: float
    iterations: int


def _inner_max_kernel(
    spec: KernelSpec,
    theta: np.ndarray,
    d: Dataset,
    r: float,
    p: float,
    inner_steps: int,
    step: float,
    restarts: int,
    seed: int,
    warm_start: np.ndarray | None = None,
) -> np.ndarray:
    """Joint ascent over all perturbations, projected per sample.

    Starts at zero, at seeded random ball points, and at ``warm_start`` when
    given; the best perturbation visited (by joint objective) is returned,
    so the result never scores below the unperturbed loss.
    """
    from .robustopt import project_ball

    n, m = d.inputs.shape
    if r == 0:
        return np.zeros((n, m))
    best = np.zeros((n, m))
    best_val = kernel_loss(spec, theta, d.inputs, d.outputs)

    starts = [np.zeros((n, m))]
    if warm_start is not None:
        starts.append(project_ball(warm_start, r, p))
    for k in range(restarts):
        noise = substream(seed, "kernel-inner-restart", k).standard_normal((n, m))
        starts.append(project_ball(noise * r, r, p))

    for delta in starts:
        delta = delta.copy()
        for _ in range(inner_steps):
            G = kernel_grad_inputs(spec, theta, d.inputs + delta, d.outputs)
            delta = project_ball(delta + step * steepest_directions(G, p), r, p)
            val = kernel_loss(spec, theta, d.inputs + delta, d.outputs)
            if val > best_val:
                best_val = val
                best = delta.copy()
    return best


def robust_fit_kernel(
    spec: KernelSpec,
    d: Dataset,
    epsilon: float,
    p: float = 2.0,
    inner_steps: int = 20,
    inner_step_size: float = 0.2,
    outer_steps: int = 400,
    tolerance: float = 1e-9,
    seed: int = 0,
    inner_restarts: int = 1,
) -> KernelRobustResult:
    """Robust kernel ridge optimizer under per-sample l_p balls.

    Alternates the projected inner ascent (warm-started across iterations,
    so its accuracy keeps improving as the outer pair settles) with the
    exact ridge re-solve on the perturbed inputs — the best response in
    theta, which a quadratic objective makes available in closed form.  The
    best response is damped when the stationarity norm stops improving.
    Converged means the objective gradient at (theta, Delta(theta)) dropped
    below the tolerance.
    """
    X, Y = d.inputs, d.outputs
    n = d.n
    r = epsilon * mean_norm(d, p)
    theta = fit_kernel_ridge(spec, d)
    if r == 0:
        return KernelRobustResult(theta, True, 0.0, 0)

    delta = None
    grad_norm = math.inf
    best_norm = math.inf
    alpha = 1.0
    worse_streak = 0
    for it in range(1, outer_steps + 1):
        delta = _inner_max_kernel(
            spec, theta, d, r, p, inner_steps, inner_step_size * r,
            inner_restarts, seed, warm_start=delta,
        )
        g = kernel_grad_theta(spec, theta, X + delta, Y)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm < tolerance:
            return KernelRobustResult(theta, True, grad_norm, it)
        if grad_norm < best_norm:
            best_norm = grad_norm
            worse_streak = 0
        else:
            worse_streak += 1
            if worse_streak >= 5:
                alpha = max(alpha / 2.0, 1.0 / 64.0)
                worse_streak = 0
        Kp = gram_matrix(spec, X + delta)
        try:
            c, low = scipy.linalg.cho_factor(Kp @ Kp + n * spec.lam * np.eye(n))
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(
                f"perturbed kernel system not positive definite: {exc}"
            ) from exc
        response = scipy.linalg.cho_solve((c, low), Kp @ Y)
        move = response - theta
        if float(np.linalg.norm(move)) < 1e-14 * (1.0 + float(np.linalg.norm(theta))):
            return KernelRobustResult(theta, grad_norm < tolerance, grad_norm, it)
        theta = theta + alpha * move
    return KernelRobustResult(theta, False, grad_norm, outer_steps)
