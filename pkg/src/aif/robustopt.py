"""Projected-gradient robust optimization and low-dimensional oracles.

These provide the ground truth the influence estimators are validated
against: the robust optimizer

    theta_eps = argmin_theta (1/n) sum_i max_{||delta_i||_p <= r} l(theta, x_i + delta_i, y_i)

is computed by alternating per-sample inner ascent (projected gradient, a
few steps, best-visited point kept, random restarts as a hedge against
non-concavity) with an outer full-batch descent step using the envelope
gradient at the inner maximizer.  The 1-D oracle solves the same problem by
interval evaluation plus golden-section search, giving an independent
finite-difference slope d theta / d eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .attack import AttackConfig, radius, steepest_directions
from .dataset import Dataset
from .errors import ConfigurationError, NumericalError
from .model import BasisModel, DerivativeBundle, fit
from .rng import substream


@dataclass(frozen=True)
class PgdConfig:
    """Projected-gradient schedule.

    inner_step_size is a fraction of the attack radius; outer_step_size is
    the initial outer trial step (default 1 / L with L the largest Hessian
    eigenvalue at the clean optimum), halved by backtracking until the
    worst-case objective decreases.  The backtracking is not optional: the
    inner-maximized objective carries a |residual| term whose curvature
    grows with the attack radius, so any fixed step oscillates once the
    budget is large enough.  ``precondition`` steers the descent through
    the inverse clean Hessian, which cuts the iteration count for
    ill-conditioned bases.
    """

    inner_steps: int = 20
    inner_step_size: float = 0.2
    outer_steps: int = 5000
    outer_step_size: float | None = None
    tolerance: float = 1e-9
    seed: int = 0
    inner_restarts: int = 2
    precondition: bool = False
    backtracks: int = 40

    def __post_init__(self):
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise ConfigurationError("step counts must be >= 1")
        if self.inner_step_size <= 0:
            raise ConfigurationError("inner_step_size must be > 0")
        if self.outer_step_size is not None and self.outer_step_size <= 0:
            raise ConfigurationError("outer_step_size must be > 0")
        if self.inner_restarts < 0:
            raise ConfigurationError("inner_restarts must be >= 0")
        if self.backtracks < 1:
            raise ConfigurationError("backtracks must be >= 1")


@dataclass(frozen=True)
class RobustFitResult:
    theta: np.ndarray
    converged: bool
    grad_norm: float
    iterations: int


def project_ball(delta: np.ndarray, r: float, p: float) -> np.ndarray:
    """Row-wise projection onto the l_p ball of radius r."""
    delta = np.asarray(delta, dtype=np.float64)
    if r == 0:
        return np.zeros_like(delta)
    if p == 2:
        norms = np.linalg.norm(delta, axis=1)
        factors = np.ones_like(norms)
        over = norms > r
        factors[over] = r / norms[over]
        return delta * factors[:, None]
    if p == math.inf:
        return np.clip(delta, -r, r)
    if p == 1:
        return np.stack([_project_l1_row(row, r) for row in delta])
    raise ConfigurationError(f"projection implemented for p in {{1, 2, inf}}, got {p}")


def _project_l1_row(v: np.ndarray, r: float) -> np.ndarray:
    # Euclidean projection onto the l1 ball via the sorted-threshold method.
    a = np.abs(v)
    if a.sum() <= r:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, u.size + 1)
    rho = np.nonzero(u > (css - r) / j)[0][-1]
    tau = (css[rho] - r) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - tau, 0.0)


def inner_max(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    r: float,
    p: float,
    cfg: PgdConfig,
) -> np.ndarray:
    """Per-sample perturbations maximizing the loss over the radius-r ball.

    Ascends along the steepest unit-l_p direction of the input gradient with
    projection after every step; one deterministic start at zero plus seeded
    random restarts, keeping the best perturbation visited per sample.  All
    starts advance as one stacked batch.
    """
    n, m = d.inputs.shape
    if r == 0:
        return np.zeros((n, m))
    step = cfg.inner_step_size * r

    starts = [np.zeros((n, m))]
    for k in range(cfg.inner_restarts):
        noise = substream(cfg.seed, "inner-restart", k).standard_normal((n, m))
        starts.append(project_ball(noise * r, r, p))
    S = len(starts)
    Xb = np.vstack([d.inputs] * S)
    Yb = np.concatenate([d.outputs] * S)
    delta = np.vstack(starts)

    best = np.zeros((n, m))
    best_loss = model.loss_batch(theta, d.inputs, d.outputs)
    for _ in range(cfg.inner_steps):
        G = model.grad_x_batch(theta, Xb + delta, Yb)
        delta = project_ball(delta + step * steepest_directions(G, p), r, p)
        losses = model.loss_batch(theta, Xb + delta, Yb).reshape(S, n)
        which = losses.argmax(axis=0)
        values = losses[which, np.arange(n)]
        improved = values > best_loss
        if np.any(improved):
            stacked = delta.reshape(S, n, m)
            rows = np.nonzero(improved)[0]
            best[rows] = stacked[which[rows], rows]
            best_loss[rows] = values[rows]
    return best


def robust_objective(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    r: float,
    p: float,
    cfg: PgdConfig,
) -> float:
    """Inner-maximized empirical loss at theta."""
    delta = inner_max(model, theta, d, r, p, cfg)
    return float(np.mean(model.loss_batch(theta, d.inputs + delta, d.outputs)))


def robust_fit(
    model: DerivativeBundle,
    d: Dataset,
    attack: AttackConfig,
    cfg: PgdConfig | None = None,
    theta0: np.ndarray | None = None,
) -> RobustFitResult:
    """Robust optimizer theta_eps via PGD with envelope outer gradients.

    Warm starts at the clean least-squares fit when the model exposes one.
    The outer update descends along the envelope gradient (optionally
    preconditioned by the clean Hessian) with Armijo backtracking on the
    inner-maximized objective.  Stops when the outer gradient norm drops
    below the tolerance; otherwise returns the last iterate with
    ``converged=False``.
    """
    cfg = cfg or PgdConfig()
    r = radius(attack, d)
    if theta0 is not None:
        theta = np.asarray(theta0, dtype=np.float64).copy()
    elif isinstance(model, BasisModel):
        theta = fit(model, d)
    else:
        theta = np.zeros(model.dim_theta)

    X, Y = d.inputs, d.outputs
    H0 = model.hessian_mean(theta, X, Y)
    L = float(scipy.linalg.eigvalsh(H0)[-1])
    if L <= 0:
        raise NumericalError("clean Hessian has no positive eigenvalue; cannot set step size")
    factor = None
    if cfg.precondition:
        try:
            factor = scipy.linalg.cho_factor(H0)
        except scipy.linalg.LinAlgError:
            factor = None
    if cfg.outer_step_size is not None:
        base_step = cfg.outer_step_size
    else:
        base_step = 1.0 if factor is not None else 1.0 / L

    grad_norm = math.inf
    step = base_step
    stall_count = 0
    for it in range(1, cfg.outer_steps + 1):
        delta = inner_max(model, theta, d, r, p=attack.p, cfg=cfg)
        g = model.grad_theta_mean(theta, X + delta, Y)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm < cfg.tolerance:
            return RobustFitResult(theta, True, grad_norm, it)
        direction = scipy.linalg.cho_solve(factor, g) if factor is not None else g
        slope = float(g @ direction)
        value = float(np.mean(model.loss_batch(theta, X + delta, Y)))
        step = min(2.0 * step, base_step)  # warm-started trial step
        candidate, accepted = theta, False
        for _ in range(cfg.backtracks):
            candidate = theta - step * direction
            cand_value = robust_objective(model, candidate, d, r, attack.p, cfg)
            if cand_value < value - 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # descent no longer measurable in floats; report the floor reached
            return RobustFitResult(theta, grad_norm < cfg.tolerance, grad_norm, it)
        # a nonsmooth valley floor shows up as vanishing relative progress
        if value - cand_value < 1e-15 * (1.0 + abs(value)):
            stall_count += 1
            if stall_count >= 5:
                return RobustFitResult(candidate, grad_norm < cfg.tolerance, grad_norm, it)
        else:
            stall_count = 0
        theta = candidate
    return RobustFitResult(theta, False, grad_norm, cfg.outer_steps)


# ---------------------------------------------------------------------------
# Surrogate quadratic loss
# ---------------------------------------------------------------------------


class SurrogateModel(DerivativeBundle):
    """Damped quadratic expansion of a loss around a reference parameter.

    For losses quadratic in theta (every model in this package) the
    second-order expansion around theta_tilde is exact, so the surrogate
    reduces to the base loss plus a damping ridge centered at theta_tilde:

        l~(theta, x, y) = l(theta, x, y) + (lambda/2) ||theta - theta_tilde||^2.

    Its Hessian is the base Hessian plus lambda * I, which removes
    eigenvalues below lambda; at theta_tilde the value and gradient match
    the base loss exactly.
    """

    def __init__(self, base: DerivativeBundle, theta_tilde: np.ndarray, lambda_damp: float):
        if lambda_damp < 0:
            raise ConfigurationError(f"lambda_damp must be >= 0, got {lambda_damp}")
        self.base = base
        self.theta_tilde = np.asarray(theta_tilde, dtype=np.float64).copy()
        self.lambda_damp = float(lambda_damp)
        self.dim_theta = base.dim_theta
        self.dim_x = base.dim_x

    def _ridge(self, theta) -> float:
        dev = np.asarray(theta) - self.theta_tilde
        return 0.5 * self.lambda_damp * float(dev @ dev)

    def loss(self, theta, x, y) -> float:
        return self.base.loss(theta, x, y) + self._ridge(theta)

    def grad_theta(self, theta, x, y) -> np.ndarray:
        dev = np.asarray(theta) - self.theta_tilde
        return self.base.grad_theta(theta, x, y) + self.lambda_damp * dev

    def grad_x(self, theta, x, y) -> np.ndarray:
        return self.base.grad_x(theta, x, y)

    def hessian_theta(self, theta, x, y) -> np.ndarray:
        return self.base.hessian_theta(theta, x, y) + self.lambda_damp * np.eye(self.dim_theta)

    def mixed_grad(self, theta, x, y) -> np.ndarray:
        return self.base.mixed_grad(theta, x, y)

    def loss_batch(self, theta, X, Y) -> np.ndarray:
        return self.base.loss_batch(theta, X, Y) + self._ridge(theta)

    def grad_x_batch(self, theta, X, Y) -> np.ndarray:
        return self.base.grad_x_batch(theta, X, Y)

    def grad_theta_mean(self, theta, X, Y) -> np.ndarray:
        dev = np.asarray(theta) - self.theta_tilde
        return self.base.grad_theta_mean(theta, X, Y) + self.lambda_damp * dev

    def hessian_mean(self, theta, X, Y) -> np.ndarray:
        return self.base.hessian_mean(theta, X, Y) + self.lambda_damp * np.eye(self.dim_theta)

    def mixed_dot_batch(self, theta, X, Y, W) -> np.ndarray:
        return self.base.mixed_dot_batch(theta, X, Y, W)


def surrogate_model(
    model: DerivativeBundle, theta_tilde: np.ndarray, lambda_damp: float
) -> SurrogateModel:
    """Damped quadratic surrogate usable anywhere a bundle is expected."""
    return SurrogateModel(model, theta_tilde, lambda_damp)


# ---------------------------------------------------------------------------
# 1-D brute-force oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Oracle1dResult:
    theta_eps: float
    dtheta_deps: float
    degenerate: bool


def _oracle_objective(model, d, theta: float, r: float) -> float:
    # m = 1: the inner max over [-r, r] sits on the boundary for losses
    # convex in the input perturbation (identity-basis squared error).
    lo = model.loss_batch(np.array([theta]), d.inputs - r, d.outputs)
    hi = model.loss_batch(np.array([theta]), d.inputs + r, d.outputs)
    return float(np.mean(np.maximum(lo, hi)))


def _golden_section(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    e = a + inv_phi * (b - a)
    fc, fe = f(c), f(e)
    while b - a > tol:
        if fc < fe:
            b, e, fe = e, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + inv_phi * (b - a)
            fe = f(e)
    return (a + b) / 2.0


def _bracket(f, center: float, width: float) -> tuple[float, float]:
    for _ in range(40):
        lo, hi = center - width, center + width
        if f(lo) > f(center) and f(hi) > f(center):
            return lo, hi
        width *= 2.0
    raise NumericalError("failed to bracket the robust 1-D objective minimum")


def oracle_1d(
    model: BasisModel,
    d: Dataset,
    epsilon: float,
    p: float = 2.0,
    fd_step: float = 1e-4,
) -> Oracle1dResult:
    """Brute-force robust fit for 1-D models with a finite-difference slope.

    Solves the inner max exactly on the interval boundary, the outer min by
    golden-section search, and estimates d theta / d eps by central
    differences at ``epsilon`` (step ``fd_step``).
    """
    if d.m != 1:
        raise ConfigurationError(f"oracle requires 1-D inputs, got m={d.m}")
    if d.n > 10:
        raise ConfigurationError(f"oracle intended for n <= 10, got n={d.n}")
    if p not in (1, 2, math.inf):
        raise ConfigurationError("1-D oracle supports p in {1, 2, inf}")
    # in one dimension every l_p ball is the same interval [-r, r]
    from .dataset import mean_norm

    scale = mean_norm(d, p)
    theta_hat = float(fit(model, d)[0]) if model.dim_theta == 1 else None
    if theta_hat is None:
        raise ConfigurationError("oracle requires a one-parameter model")

    def solve(eps: float) -> float:
        r = eps * scale
        f = lambda t: _oracle_objective(model, d, t, r)
        lo, hi = _bracket(f, theta_hat, max(1.0, 10.0 * r + 1e-3))
        return _golden_section(f, lo, hi)

    theta_eps = solve(epsilon)
    eps_lo = max(epsilon - fd_step, 0.0)
    eps_hi = epsilon + fd_step
    slope = (solve(eps_hi) - solve(eps_lo)) / (eps_hi - eps_lo)

    grads = model.grad_x_batch(np.array([theta_hat]), d.inputs, d.outputs)
    degenerate = bool(np.any(np.abs(grads).max(axis=1) == 0))
    return Oracle1dResult(theta_eps=theta_eps, dtheta_deps=slope, degenerate=degenerate)
