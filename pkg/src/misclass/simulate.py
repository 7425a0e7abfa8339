"""Data generators for the simulation experiments.

Every generator takes an explicit integer seed; the hidden true covariate
is kept in ``Dataset.truth`` for evaluation only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core import Dataset, validate_mc_matrix
from .latent_gaussian import LatentGaussianData
from .response import marginal_success_probability


def simulate_covariate_mc(n: int = 100, alpha=(-0.5, 0.25), matrix=((0.9, 0.1), (0.2, 0.8)),
                          beta=(1.0, 1.0, 1.0), sigma: float = 1.0, seed: int = 0,
                          missing_rate: float = 0.0) -> Dataset:
    """Linear model with a misclassified and/or partly missing binary covariate.

    ``z ~ Unif(-1, 1)``, ``x ~ Bernoulli(expit(a0 + az z))``, ``w`` drawn
    from row ``x`` of ``matrix``, and ``y = b0 + bx x + bz z + N(0, sigma^2)``.
    With ``missing_rate > 0`` exactly ``round(missing_rate * n)`` entries of
    ``w``, chosen completely at random, are marked missing.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not 0.0 <= missing_rate <= 1.0:
        raise ValueError("missing_rate must lie in [0, 1]")
    mat = validate_mc_matrix(matrix)
    a0, az = alpha
    b0, bx, bz = beta
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, n)
    x = (rng.random(n) < expit(a0 + az * z)).astype(np.int8)
    flip_to_one = np.array([mat.prob(1, 0), mat.prob(1, 1)])[x]
    w = (rng.random(n) < flip_to_one).astype(np.int8)
    y = b0 + bx * x + bz * z + sigma * rng.standard_normal(n)
    w_list = w.tolist()
    n_missing = int(round(missing_rate * n))
    if n_missing:
        for i in rng.choice(n, size=n_missing, replace=False):
            w_list[int(i)] = None
    return Dataset.from_columns(y, w_list, {"z": z}, truth={"x": x})


def simulate_response_mc(n: int = 1000, p_y: float = 0.10, pi00: float = 0.90, pi11: float = 0.95,
                         seed: int = 0) -> Dataset:
    """Observed test results ``s ~ Bernoulli(p_s)`` with ``p_s`` from ``p_y``."""
    for name, v in (("p_y", p_y), ("pi00", pi00), ("pi11", pi11)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be a probability")
    p_s = float(marginal_success_probability(p_y, pi00, pi11))
    rng = np.random.default_rng(seed)
    s = (rng.random(n) < p_s).astype(float)
    return Dataset.from_columns(s, None)


@dataclass(frozen=True, eq=False)
class DichotomizedSample:
    """Latent continuous covariate, its noisy copy, and their dichotomies."""

    y: np.ndarray
    x_c: np.ndarray
    w_c: np.ndarray
    x_d: np.ndarray
    w_d: np.ndarray

    def latent_data(self) -> LatentGaussianData:
        return LatentGaussianData.build(self.y, self.w_d)

    def sample_matrix(self) -> np.ndarray:
        """Row-normalised cross-tabulation of ``w_d`` against ``x_d``."""
        counts = np.zeros((2, 2))
        np.add.at(counts, (self.x_d, self.w_d), 1.0)
        return counts / counts.sum(axis=1, keepdims=True)


def simulate_dichotomized(n: int = 200, beta0: float = 1.0, beta_xc: float = 1.0,
                          sd_x: float = 1.0, sd_u: float = 1.0, sd_e: float = 1.0,
                          seed: int = 0) -> DichotomizedSample:
    """``x_c ~ N(0, sd_x^2)``, ``w_c = x_c + u``, both cut at zero."""
    rng = np.random.default_rng(seed)
    x_c = sd_x * rng.standard_normal(n)
    w_c = x_c + sd_u * rng.standard_normal(n)
    y = beta0 + beta_xc * x_c + sd_e * rng.standard_normal(n)
    return DichotomizedSample(y, x_c, w_c, (x_c > 0).astype(np.int8), (w_c > 0).astype(np.int8))
