"""Adversarial influence estimators.

The influence vector of a fitted model measures the first-order drift of the
robust optimizer as the attack budget grows from zero:

    I_hat = -H_hat^{-1} Phi,
    Phi   = (1/n) sum_i mixed_grad(theta, x_i, y_i) * scale * phi_i,

where H_hat is the empirical loss Hessian at the clean optimum, phi_i is the
steepest-ascent unit-l_p direction of the per-sample input gradient, and
``scale`` is the empirical mean l_p input norm (the attack budget is
relative to the data's scale).  Per-sample contributions

    zeta_i = -H_hat^{-1} mixed_grad_i * scale * phi_i

average exactly to I_hat and provide an asymptotic covariance for
confidence intervals, plus the single-sample variant used by the
distributionally-robust formulation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg
import scipy.stats

from .attack import steepest_directions
from .dataset import Dataset, mean_norm
from .errors import DegenerateGradientError, NumericalError, RankDeficiencyError
from .model import CONDITION_LIMIT, DerivativeBundle

logger = logging.getLogger(__name__)

DENSE_SOLVE_LIMIT = 2000
CG_TOLERANCE = 1e-10


@dataclass(frozen=True)
class AifResult:
    """Influence vector with its ingredients and asymptotic covariance."""

    influence: np.ndarray  # d
    hessian: np.ndarray  # d x d
    per_sample: np.ndarray  # n_kept x d rows zeta_i
    mu_hat: np.ndarray  # d; equals influence by construction
    sigma_hat: np.ndarray  # d x d
    condition_estimate: float
    norm_scale: float
    p: float
    skipped: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_samples(self) -> int:
        return self.per_sample.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "influence": self.influence.tolist(),
            "mu_hat": self.mu_hat.tolist(),
            "sigma_hat_diag": np.diag(self.sigma_hat).tolist(),
            "condition_estimate": self.condition_estimate,
            "norm_scale": self.norm_scale,
            "p": "inf" if self.p == math.inf else self.p,
            "skipped_samples": list(self.skipped),
        }


@dataclass(frozen=True)
class DroAifResult:
    """Influence under u-Wasserstein distributional perturbation."""

    influence: np.ndarray
    sample_index: int
    tied_indices: tuple[int, ...]
    scale_factor: float  # n^{(1-u)/u}
    u: float

    def to_json_dict(self) -> dict:
        return {
            "influence": self.influence.tolist(),
            "sample_index": self.sample_index,
            "tied_indices": list(self.tied_indices),
            "scale_factor": self.scale_factor,
            "u": self.u,
        }


def empirical_hessian(model: DerivativeBundle, theta: np.ndarray, d: Dataset) -> np.ndarray:
    """Mean per-sample loss Hessian in theta, symmetrized."""
    H = model.hessian_mean(theta, d.inputs, d.outputs)
    return (H + H.T) / 2.0


def _hessian_condition(H: np.ndarray) -> tuple[float, float]:
    eigs = scipy.linalg.eigvalsh(H)
    lo, hi = float(eigs[0]), float(eigs[-1])
    if lo <= 0:
        return math.inf, lo
    return hi / lo, lo


def _solve_neg(H: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve H Z = -rhs for SPD H; rhs may be a matrix of stacked columns."""
    if H.shape[0] <= DENSE_SOLVE_LIMIT:
        c, low = scipy.linalg.cho_factor(H)
        return scipy.linalg.cho_solve((c, low), -rhs)
    op = scipy.sparse.linalg.LinearOperator(H.shape, matvec=lambda w: H @ w)
    cols = np.atleast_2d(rhs.T)
    out = np.empty_like(cols)
    for i, col in enumerate(cols):
        sol, info = scipy.sparse.linalg.cg(op, -col, rtol=CG_TOLERANCE, atol=0.0)
        if info != 0:
            raise NumericalError(f"conjugate-gradient solve failed (info={info})")
        out[i] = sol
    return out.T if rhs.ndim == 2 else out[0]


def _phi_terms(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    p: float,
    norm_scale: float | None,
    skip_degenerate: bool,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-sample vectors mixed_grad_i * scale * phi_i and the kept index set."""
    scale = mean_norm(d, p) if norm_scale is None else float(norm_scale)
    G = model.grad_x_batch(theta, d.inputs, d.outputs)
    alive = np.abs(G).max(axis=1) > 0
    if not np.any(alive):
        raise DegenerateGradientError(
            "every sample has a vanishing input gradient; influence sum is empty"
        )
    if not np.all(alive):
        dead = np.nonzero(~alive)[0]
        if not skip_degenerate:
            raise DegenerateGradientError(
                f"{dead.size} sample(s) have zero input gradient "
                f"(first indices {dead[:5].tolist()}); pass skip_degenerate=True "
                "to drop them from the average"
            )
        for i in dead:
            logger.info("skipping degenerate-gradient sample %d", i)
    kept = np.nonzero(alive)[0]
    Phi_dirs = steepest_directions(G[kept], p)
    terms = model.mixed_dot_batch(
        theta, d.inputs[kept], d.outputs[kept], Phi_dirs
    ) * scale
    return terms, kept, scale


def compute_phi(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    p: float,
    norm_scale: float | None = None,
    skip_degenerate: bool = False,
) -> np.ndarray:
    """The assembled vector Phi = mean_i mixed_grad_i * scale * phi_i."""
    terms, _, _ = _phi_terms(model, theta, d, p, norm_scale, skip_degenerate)
    return terms.mean(axis=0)


def compute_aif(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    p: float = 2.0,
    norm_scale: float | None = None,
    skip_degenerate: bool = False,
) -> AifResult:
    """Closed-form influence vector with per-sample contributions.

    The influence is computed as the exact arithmetic mean of the per-sample
    zeta rows, so the two agree bitwise.  Fails when the empirical Hessian
    is not positive definite within the condition limit.
    """
    theta = np.asarray(theta, dtype=np.float64)
    H = empirical_hessian(model, theta, d)
    cond, lo = _hessian_condition(H)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise RankDeficiencyError(
            f"empirical Hessian not positive definite within limits "
            f"(condition estimate {cond:.3e}, smallest eigenvalue {lo:.3e})",
            cond,
        )
    terms, kept, scale = _phi_terms(model, theta, d, p, norm_scale, skip_degenerate)
    zeta = _solve_neg(H, terms.T).T  # n_kept x d
    influence = zeta.mean(axis=0)
    centered = zeta - influence
    sigma = centered.T @ centered / zeta.shape[0]
    skipped = tuple(int(i) for i in np.setdiff1d(np.arange(d.n), kept))
    return AifResult(
        influence=influence,
        hessian=H,
        per_sample=zeta,
        mu_hat=influence,
        sigma_hat=(sigma + sigma.T) / 2.0,
        condition_estimate=cond,
        norm_scale=scale,
        p=p,
        skipped=skipped,
    )


def confidence_region(result: AifResult, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise normal intervals mu_k +/- z * sqrt(Sigma_kk / n).

    A zero covariance diagonal (all per-sample contributions equal) gives
    zero-width intervals.
    """
    if not 0 < level < 1:
        raise NumericalError(f"confidence level must be in (0, 1), got {level}")
    n = result.n_samples
    var = np.diag(result.sigma_hat).copy()
    var[var < 0] = 0.0  # clip tiny negative rounding
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(var / n)
    return result.mu_hat - half, result.mu_hat + half


def dro_aif(
    model: DerivativeBundle,
    theta: np.ndarray,
    d: Dataset,
    p: float = 2.0,
    u: float = 1.0,
    norm_scale: float | None = None,
) -> DroAifResult:
    """Influence under u-Wasserstein distributional attack.

    The whole budget concentrates on the sample J with the largest conjugate
    q-norm input gradient (lowest index on ties; ties are reported), and the
    result carries the sample-size factor n^{(1-u)/u}.
    """
    if u < 1:
        raise NumericalError(f"Wasserstein order must be >= 1, got {u}")
    theta = np.asarray(theta, dtype=np.float64)
    H = empirical_hessian(model, theta, d)
    cond, lo = _hessian_condition(H)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise RankDeficiencyError(
            f"empirical Hessian not positive definite within limits "
            f"(condition estimate {cond:.3e}, smallest eigenvalue {lo:.3e})",
            cond,
        )
    scale = mean_norm(d, p) if norm_scale is None else float(norm_scale)
    from .attack import conjugate_exponent, steepest_direction

    q = conjugate_exponent(p)
    G = model.grad_x_batch(theta, d.inputs, d.outputs)
    qnorms = np.linalg.norm(G, ord=q, axis=1)
    if not np.any(qnorms > 0):
        raise DegenerateGradientError("all input gradients vanish; no attack target")
    J = int(np.argmax(qnorms))
    ties = tuple(
        int(i) for i in np.nonzero(np.isclose(qnorms, qnorms[J], rtol=1e-12, atol=0.0))[0]
    )
    if len(ties) > 1:
        logger.info("distributional attack target tied across samples %s", ties)
    phi = steepest_direction(G[J], p)
    varrho = model.mixed_grad(theta, d.inputs[J], d.outputs[J]) @ phi * scale
    factor = float(d.n) ** ((1.0 - u) / u)
    influence = _solve_neg(H, varrho) * factor
    return DroAifResult(
        influence=influence,
        sample_index=J,
        tied_indices=ties,
        scale_factor=factor,
        u=u,
    )
