"""Adversarial influence functions for regression models.

Computes the closed-form first-order response of a robustly trained model
to its attack budget, uses it to estimate the clean-data sensitivity of
robust training, and cross-validates against projected-gradient robust
optimization and brute-force oracles.
"""

from .attack import AttackConfig, conjugate_exponent, radius, steepest_direction
from .dataset import (
    Dataset,
    GeneratorConfig,
    generate,
    load_csv,
    load_mnist_idx,
    mean_norm,
    write_csv,
)
from .errors import (
    AifError,
    ConfigurationError,
    DataError,
    DegenerateGradientError,
    NumericalError,
    RankDeficiencyError,
)
from .experiments import ExperimentSpec, ResultTable, emit, run
from .influence import (
    AifResult,
    DroAifResult,
    compute_aif,
    compute_phi,
    confidence_region,
    dro_aif,
    empirical_hessian,
)
from .kernel import (
    KernelSpec,
    fit_kernel_ridge,
    gram_matrix,
    kernel_aif,
    ntk_matrix,
    robust_fit_kernel,
)
from .model import (
    BasisSpec,
    DerivativeBundle,
    finite_difference_check,
    fit,
    make_regression_model,
)
from .robustopt import (
    Oracle1dResult,
    PgdConfig,
    RobustFitResult,
    inner_max,
    oracle_1d,
    robust_fit,
    surrogate_model,
)
from .sensitivity import (
    SensitivityEstimate,
    empirical_sensitivity,
    general_upper_bound,
    linear_closed_form,
    random_effect_closed_form,
    sensitivity_from_aif,
    smoothing_ratio,
)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
