"""Model sensitivity: the clean-data loss premium paid for robust training.

The primary estimate is the quadratic form shared by every route in the
package,

    S_eps = 0.5 * eps^2 * I^T H_eval I          (influence plug-in)
    S_eps = 0.5 * (theta_eps - theta)^T H_eval (theta_eps - theta)   (empirical)

with H_eval the empirical loss Hessian on the evaluation split.  The
closed forms below evaluate the same quantity analytically for specific
generating processes; they are stated in the same 0.5-convention so that
plug-in, empirical, and analytic routes are directly comparable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from .dataset import Dataset, mean_norm
from .errors import ConfigurationError, NumericalError, RankDeficiencyError
from .influence import AifResult
from .model import BasisModel, DerivativeBundle, basis_gram

METHODS = (
    "aif-plugin",
    "empirical-pgd",
    "closed-form-linear",
    "closed-form-random-effect",
    "upper-bound-general",
    "smoothing-ratio",
)

ISOTROPY_WARN_FRACTION = 0.20


@dataclass(frozen=True)
class SensitivityEstimate:
    """A sensitivity value with its provenance."""

    value: float
    epsilon: float
    method: str
    eval_hessian: np.ndarray | None = None
    loss_difference: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown sensitivity method {self.method!r}")

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "epsilon": self.epsilon,
            "method": self.method,
            "loss_difference": self.loss_difference,
        }


def sensitivity_from_aif(
    aif: AifResult | np.ndarray,
    eval_hessian: np.ndarray,
    epsilon: float,
) -> SensitivityEstimate:
    """Plug-in estimate 0.5 * eps^2 * I^T H_eval I."""
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be >= 0, got {epsilon}")
    influence = aif.influence if isinstance(aif, AifResult) else np.asarray(aif)
    H = np.asarray(eval_hessian, dtype=np.float64)
    if H.shape != (influence.size, influence.size):
        raise ConfigurationError(
            f"eval Hessian shape {H.shape} does not match influence dim {influence.size}"
        )
    value = 0.5 * epsilon**2 * float(influence @ H @ influence)
    return SensitivityEstimate(value, epsilon, "aif-plugin", eval_hessian=H)


def empirical_sensitivity(
    model: DerivativeBundle,
    theta_hat: np.ndarray,
    theta_eps: np.ndarray,
    eval_d: Dataset,
    epsilon: float,
) -> SensitivityEstimate:
    """Quadratic-form estimate from an actually-computed robust optimizer.

    Also reports the raw loss difference mean[l(theta_eps) - l(theta_hat)]
    on the evaluation split for cross-checking the definition directly.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    theta_eps = np.asarray(theta_eps, dtype=np.float64)
    H = model.hessian_mean(theta_hat, eval_d.inputs, eval_d.outputs)
    delta = theta_eps - theta_hat
    value = 0.5 * float(delta @ H @ delta)
    diff = float(
        np.mean(
            model.loss_batch(theta_eps, eval_d.inputs, eval_d.outputs)
            - model.loss_batch(theta_hat, eval_d.inputs, eval_d.outputs)
        )
    )
    return SensitivityEstimate(
        value, epsilon, "empirical-pgd", eval_hessian=H, loss_difference=diff
    )


def _isotropic_sigma_sq(inputs: np.ndarray, context: str) -> float:
    """Mean per-coordinate variance, warning when coordinates are anisotropic."""
    variances = inputs.var(axis=0)
    sigma_sq = float(variances.mean())
    if sigma_sq > 0 and np.max(np.abs(variances - sigma_sq)) > ISOTROPY_WARN_FRACTION * sigma_sq:
        warnings.warn(
            f"{context}: per-coordinate input variances deviate more than "
            f"{ISOTROPY_WARN_FRACTION:.0%} from isotropy; the closed form assumes "
            "Cov(x) = sigma_x^2 I",
            stacklevel=3,
        )
    return sigma_sq


def linear_closed_form(
    d_train: Dataset,
    d_eval: Dataset,
    theta_hat: np.ndarray,
    epsilon: float,
) -> SensitivityEstimate:
    """Closed form for linear models under an l2 attack.

    Plugs the empirical mean input norm, mean absolute residual, and the
    isotropic variance estimate into

        0.5 * eps^2 * (mean ||x||_2)^2 * (mean |residual|)^2 / sigma_x^2.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    if theta_hat.size != d_train.m:
        raise ConfigurationError("linear closed form needs an identity-basis fit")
    scale = mean_norm(d_train, 2)
    resid = d_train.inputs @ theta_hat - d_train.outputs
    mean_abs = float(np.abs(resid).mean())
    if mean_abs == 0.0:
        warnings.warn("all residuals vanish; closed-form sensitivity is 0", stacklevel=2)
        return SensitivityEstimate(0.0, epsilon, "closed-form-linear")
    sigma_sq = _isotropic_sigma_sq(d_eval.inputs, "linear closed form")
    if sigma_sq <= 0:
        raise NumericalError("evaluation inputs have zero variance")
    value = 0.5 * epsilon**2 * scale**2 * mean_abs**2 / sigma_sq
    return SensitivityEstimate(value, epsilon, "closed-form-linear")


def random_effect_closed_form(
    m: int,
    M: int,
    sigma_x: float,
    sigma_xi: float,
    epsilon: float,
) -> SensitivityEstimate:
    """Analytic sensitivity of an m-feature linear fit to an M-feature
    random-effect process.

    Value: (2 eps^2 / (pi sigma_x^2)) * (Gamma((m+1)/2)/Gamma(m/2))^2
           * ((M - m) sigma_x^2 + sigma_xi^2),
    with the Gamma ratio evaluated in log space for large m.
    """
    if not 1 <= m <= M:
        raise ConfigurationError(f"need 1 <= m <= M, got m={m}, M={M}")
    if sigma_x <= 0:
        raise ConfigurationError(f"sigma_x must be > 0, got {sigma_x}")
    gamma_ratio_sq = math.exp(2.0 * (gammaln((m + 1) / 2.0) - gammaln(m / 2.0)))
    value = (
        2.0
        * epsilon**2
        / (math.pi * sigma_x**2)
        * gamma_ratio_sq
        * ((M - m) * sigma_x**2 + sigma_xi**2)
    )
    return SensitivityEstimate(value, epsilon, "closed-form-random-effect")


def gram_lambda_min(model: BasisModel, d: Dataset) -> float:
    """Smallest eigenvalue of the sample basis Gram matrix."""
    return float(scipy.linalg.eigvalsh(basis_gram(model, d))[0])


def general_upper_bound(
    model: BasisModel,
    d: Dataset,
    theta_hat: np.ndarray,
    epsilon: float,
) -> float:
    """Upper bound on the sensitivity of a general basis regression.

    0.5 * eps^2 * (mean ||x||_2)^2 * (1 / lambda_min(Gram))
        * mean_i ||J_i^T J_i||_2 * (mean |residual|)^2,

    with every factor an empirical plug-in on the given dataset.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    lam_min = gram_lambda_min(model, d)
    if lam_min <= 0:
        raise RankDeficiencyError(
            f"basis Gram matrix has non-positive smallest eigenvalue {lam_min:.3e}"
        )
    scale = mean_norm(d, 2)
    resid = model.residual_batch(theta_hat, d.inputs, d.outputs)
    mean_abs = float(np.abs(resid).mean())
    spec_norms = np.empty(d.n)
    for i, x in enumerate(d.inputs):
        J = model.jacobian(x)
        spec_norms[i] = scipy.linalg.eigvalsh(J.T @ J)[-1]
    return 0.5 * epsilon**2 * scale**2 / lam_min * float(spec_norms.mean()) * mean_abs**2


def smoothing_ratio(
    sigma_x: float,
    sigma_r: float,
    sigma_xi: float,
    beta_norm: float,
) -> float:
    """Sensitivity ratio induced by training with isotropic input noise.

    ratio = (sigma_x^2 / sigma_xi^2) / (sigma_x^2 + sigma_r^2)
            * (2 sigma_r^2 sigma_x^2 / (sigma_x^2 + sigma_r^2) * ||beta||^2
               + sigma_xi^2)

    where beta is the population coefficient of the clean linear fit.  At
    sigma_r = 0 the ratio is exactly 1.
    """
    if sigma_x <= 0:
        raise ConfigurationError(f"sigma_x must be > 0, got {sigma_x}")
    if sigma_r < 0:
        raise ConfigurationError(f"sigma_r must be >= 0, got {sigma_r}")
    if sigma_xi <= 0:
        raise NumericalError("smoothing ratio undefined for sigma_xi = 0")
    sx2, sr2, sxi2 = sigma_x**2, sigma_r**2, sigma_xi**2
    inner = 2.0 * sr2 * sx2 / (sx2 + sr2) * beta_norm**2 + sxi2
    return (sx2 / sxi2) / (sx2 + sr2) * inner
