"""l_p perturbation geometry: conjugate exponents and steepest-ascent directions.

For a nonzero gradient g and norm order p, the steepest direction is the
unit-l_p vector phi maximizing g.phi; by Holder's inequality the attained
value is exactly ||g||_q with q the conjugate exponent.  Coordinates with
zero partial derivative contribute zero (sgn(0) = 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, mean_norm
from .errors import ConfigurationError, DegenerateGradientError


def conjugate_exponent(p: float) -> float:
    """q with 1/p + 1/q = 1 (p=1 <-> q=inf, p=2 <-> q=2, p=inf <-> q=1)."""
    if p == 1:
        return math.inf
    if p == math.inf:
        return 1.0
    if p <= 1:
        raise ConfigurationError(f"norm order must satisfy p >= 1, got {p}")
    return p / (p - 1.0)


@dataclass(frozen=True)
class AttackConfig:
    """Norm order, relative budget, and Wasserstein order for DRO."""

    p: float = 2.0
    epsilon: float = 0.0
    u: float = 1.0

    def __post_init__(self):
        conjugate_exponent(self.p)  # validates p
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.u < 1:
            raise ConfigurationError(f"Wasserstein order must be >= 1, got {self.u}")

    @property
    def q(self) -> float:
        return conjugate_exponent(self.p)


def steepest_direction(g: np.ndarray, p: float) -> np.ndarray:
    """Unit-l_p direction maximizing first-order loss increase for gradient g.

    p=2 returns g/||g||_2; p=inf returns sgn(g); p=1 puts all mass on the
    largest-magnitude coordinate (lowest index on ties).  General p in
    (1, inf) uses psi_k = b_k^(q-1) / (sum b^q)^(1/p) * sgn(g_k) with
    b = |g|.
    """
    g = np.asarray(g, dtype=np.float64)
    b = np.abs(g)
    if not np.any(b > 0):
        raise DegenerateGradientError("zero gradient has no steepest direction")
    if p == 2:
        return g / np.linalg.norm(g)
    if p == math.inf:
        return np.sign(g)
    if p == 1:
        k = int(np.argmax(b))
        phi = np.zeros_like(g)
        phi[k] = np.sign(g[k])
        return phi
    q = conjugate_exponent(p)
    # scale out the max for overflow safety; the formula is 0-homogeneous
    scale = b.max()
    bs = b / scale
    psi = bs ** (q - 1.0) / np.sum(bs**q) ** (1.0 / p)
    return psi * np.sign(g)


def steepest_directions(G: np.ndarray, p: float) -> np.ndarray:
    """Row-wise :func:`steepest_direction` for an (n, m) gradient matrix.

    Rows with zero gradient are returned as zero; callers decide whether
    that is an error (see the influence module's skip policy).
    """
    G = np.asarray(G, dtype=np.float64)
    out = np.zeros_like(G)
    alive = np.abs(G).max(axis=1) > 0
    if not np.any(alive):
        return out
    Ga = G[alive]
    if p == 2:
        out[alive] = Ga / np.linalg.norm(Ga, axis=1)[:, None]
    elif p == math.inf:
        out[alive] = np.sign(Ga)
    elif p == 1:
        rows = np.nonzero(alive)[0]
        cols = np.argmax(np.abs(Ga), axis=1)
        out[rows, cols] = np.sign(G[rows, cols])
    else:
        q = conjugate_exponent(p)
        b = np.abs(Ga)
        bs = b / b.max(axis=1, keepdims=True)
        psi = bs ** (q - 1.0) / np.sum(bs**q, axis=1, keepdims=True) ** (1.0 / p)
        out[alive] = psi * np.sign(Ga)
    return out


def radius(config: AttackConfig, d: Dataset) -> float:
    """Absolute per-sample budget r = epsilon * mean l_p norm of the inputs."""
    return config.epsilon * mean_norm(d, config.p)
