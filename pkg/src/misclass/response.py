"""Binary response observed through an imperfect test.

With specificity ``pi00`` and sensitivity ``pi11`` the observed response
``s`` has success probability ``p_s = (1 - pi00) + (pi11 - (1 - pi00)) p_y``,
so a logistic model for the true ``p_y`` becomes a Bernoulli model for ``s``
with the shifted and squeezed ``sslogit`` link.  Uncertainty about
``(pi00, pi11)`` is propagated by fitting on a weighted grid of values and
merging the resulting posteriors.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate, stats
from scipy.special import expit, logit

from .core import Dataset, GlmSpec, design_matrix
from .errors import (
    GridPointDroppedWarning,
    HessianNotPD,
    InstabilityWarning,
    InvalidSensSpec,
    NotConverged,
    SeparationSuspected,
    TooManyFailedFits,
)
from .glm import ConditionalFit, check_sens_spec, fit_laplace_glm

MAX_DROPPED_WEIGHT = 0.05
SUMMARY_LEVELS = (0.025, 0.5, 0.975)
_GH_X, _GH_W = hermegauss(80)
_GH_W = _GH_W / _GH_W.sum()


def sslogit_inverse(eta, pi00: float, pi11: float):
    """Observed-response success probability for linear predictor ``eta``."""
    check_sens_spec(pi00, pi11)
    lo = 1.0 - pi00
    return lo + (pi11 - lo) * expit(np.asarray(eta, dtype=float))


def marginal_success_probability(p_y, pi00: float, pi11: float):
    """``p_s = pi11 p_y + (1 - pi00)(1 - p_y)``."""
    p_y = np.asarray(p_y, dtype=float)
    return pi11 * p_y + (1.0 - pi00) * (1.0 - p_y)


def true_success_probability(p_s, pi00: float, pi11: float):
    """Algebraic inverse of :func:`marginal_success_probability`."""
    check_sens_spec(pi00, pi11)
    lo = 1.0 - pi00
    return (np.asarray(p_s, dtype=float) - lo) / (pi11 - lo)


def _compressed(X, y):
    """Collapse identical (row, response) pairs into frequency weights."""
    keyed = np.column_stack([X, y])
    uniq, counts = np.unique(keyed, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(float)


def fit_binary(dataset: Dataset, glm_spec: GlmSpec, family: str, pi00=None, pi11=None) -> ConditionalFit:
    """Laplace fit of a Bernoulli GLM on compressed rows."""
    dataset.check_family(family)
    X, y, w = _compressed(design_matrix(dataset, glm_spec), dataset.y)
    return fit_laplace_glm(X, y, family, glm_spec.prior_variances(), pi00=pi00, pi11=pi11, weights=w)


def fit_response_mc(dataset: Dataset, glm_spec: GlmSpec, pi00: float | None = None,
                    pi11: float | None = None) -> ConditionalFit:
    """Adjusted fit with the sslogit link at fixed specificity/sensitivity.

    ``pi00``/``pi11`` default to the values on ``glm_spec``.  A ridge fallback
    during the Newton iterations is reported with ``InstabilityWarning``.
    """
    pi00 = glm_spec.pi00 if pi00 is None else pi00
    pi11 = glm_spec.pi11 if pi11 is None else pi11
    check_sens_spec(pi00, pi11)
    fit = fit_binary(dataset, glm_spec, "bernoulli-sslogit", pi00, pi11)
    if fit.diagnostics.get("ridge", 0.0) > 0.0:
        warnings.warn(f"ridge {fit.diagnostics['ridge']:g} needed at pi00={pi00}, pi11={pi11}; "
                      "treat this fit with caution", InstabilityWarning, stacklevel=2)
    return fit


def linear_predictor(fit: ConditionalFit, at) -> tuple[float, float]:
    """Gaussian mean and sd of ``at @ beta`` under a Laplace fit."""
    at = np.asarray(at, dtype=float)
    if at.shape != (fit.n_coef,):
        raise ValueError(f"covariate configuration needs {fit.n_coef} entries")
    m = float(at @ fit.loc)
    s = float(np.sqrt(at @ fit.cov @ at))
    return m, s


def probability_summary(fit: ConditionalFit, at=None) -> dict:
    """Posterior summary of ``p_y = expit(at @ beta)``.

    ``at`` defaults to the intercept-only configuration.  Quantiles map
    through ``expit`` exactly; mean and sd use Gauss-Hermite quadrature.
    """
    at = np.eye(fit.n_coef)[0] if at is None else at
    m, s = linear_predictor(fit, at)
    vals = expit(m + s * _GH_X)
    mean = float(_GH_W @ vals)
    out = {"mean": mean, "sd": float(np.sqrt(max(_GH_W @ vals ** 2 - mean ** 2, 0.0)))}
    for a in SUMMARY_LEVELS:
        out[f"q{a:g}"] = float(expit(m + s * stats.norm.ppf(a)))
    return out


# --------------------------------------------------------------------------- #
# Sensitivity/specificity grid
# --------------------------------------------------------------------------- #


def beta_from_interval(lower: float, upper: float) -> tuple[float, float]:
    """Beta(a, b) with mean at the midpoint and sd = half-width / 1.96."""
    if not 0.0 < lower < upper < 1.0:
        raise InvalidSensSpec(f"interval ({lower}, {upper}) must lie inside (0, 1)")
    m = 0.5 * (lower + upper)
    sd = 0.5 * (upper - lower) / stats.norm.ppf(0.975)
    total = m * (1.0 - m) / sd ** 2 - 1.0
    if total <= 0:
        raise InvalidSensSpec(f"interval ({lower}, {upper}) is too wide for a Beta fit")
    return m * total, (1.0 - m) * total


@dataclass(frozen=True, eq=False)
class SensSpecGrid:
    """Weighted ``(pi00, pi11)`` points; weights sum to one."""

    points: np.ndarray        # (K, 2): specificity, sensitivity
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0] or pts.shape[0] == 0:
            raise ValueError("points and weights must be non-empty and aligned")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        for pi00, pi11 in pts:
            check_sens_spec(pi00, pi11)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def single(cls, pi00: float, pi11: float) -> "SensSpecGrid":
        return cls(np.array([[pi00, pi11]]), np.array([1.0]))

    @classmethod
    def from_intervals(cls, specificity_interval, sensitivity_interval,
                       resolution: int = 11) -> "SensSpecGrid":
        """Tensor grid at equal-mass nodes of moment-matched Beta laws."""
        if resolution < 1:
            raise ValueError("resolution must be positive")
        levels = (np.arange(resolution) + 0.5) / resolution
        a0, b0 = beta_from_interval(*specificity_interval)
        a1, b1 = beta_from_interval(*sensitivity_interval)
        spec_nodes = stats.beta.ppf(levels, a0, b0)
        sens_nodes = stats.beta.ppf(levels, a1, b1)
        pts = np.array([(s0, s1) for s0 in spec_nodes for s1 in sens_nodes])
        w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        return cls(pts, w)

    def __len__(self):
        return self.points.shape[0]


# --------------------------------------------------------------------------- #
# Merged posterior
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class MergedPosterior:
    """Grid-weighted mixture of per-point posteriors of one target.

    Each component is Gaussian in ``eta`` (the linear predictor or a
    coefficient); the target is ``expit(eta)`` for probabilities and ``eta``
    itself otherwise.
    """

    target: str
    points: np.ndarray
    weights: np.ndarray
    fits: tuple
    eta_loc: np.ndarray
    eta_scale: np.ndarray
    probability: bool
    values: np.ndarray        # evaluation grid
    density: np.ndarray
    dropped_weight: float = 0.0

    def _forward(self, v):
        return logit(v) if self.probability else v

    def _component_values(self):
        vals = self.eta_loc[:, None] + self.eta_scale[:, None] * _GH_X[None, :]
        return expit(vals) if self.probability else vals

    def component_means(self):
        return self._component_values() @ _GH_W

    def component_variances(self):
        vals = self._component_values()
        m = vals @ _GH_W
        return np.maximum(vals ** 2 @ _GH_W - m ** 2, 0.0)

    @property
    def mean(self) -> float:
        return float(self.weights @ self.component_means())

    @property
    def sd(self) -> float:
        m = self.component_means()
        total = self.weights @ (self.component_variances() + m ** 2) - (self.weights @ m) ** 2
        return float(np.sqrt(max(total, 0.0)))

    def cdf(self, q) -> float:
        if self.probability and not 0.0 < q < 1.0:
            return 0.0 if q <= 0.0 else 1.0
        z = (self._forward(q) - self.eta_loc) / self.eta_scale
        return float(self.weights @ stats.norm.cdf(z))

    def quantile(self, alpha: float, tol: float = 1e-12) -> float:
        """Mixture quantile by bisection on the linear-predictor scale."""
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        qs = self.eta_loc + self.eta_scale * stats.norm.ppf(alpha)
        lo, hi = float(qs.min()), float(qs.max())
        for _ in range(200):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            z = (mid - self.eta_loc) / self.eta_scale
            if self.weights @ stats.norm.cdf(z) < alpha:
                lo = mid
            else:
                hi = mid
        eta = 0.5 * (lo + hi)
        return float(expit(eta)) if self.probability else eta

    def integral(self) -> float:
        return float(integrate.trapezoid(self.density, self.values))

    def summary(self) -> dict:
        out = {"mean": self.mean, "sd": self.sd}
        for a in SUMMARY_LEVELS:
            out[f"q{a:g}"] = self.quantile(a)
        return out

    def write_density_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["quantity_value", "density"])
            for v, d in zip(self.values, self.density):
                writer.writerow([repr(float(v)), repr(float(d))])

    def write_summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _density(loc, scale, weights, probability, n_eval):
    lo = float(np.min(loc - 9.0 * scale))
    hi = float(np.max(loc + 9.0 * scale))
    u = np.linspace(lo, hi, n_eval)
    dens_u = (weights[:, None] * stats.norm.pdf((u[None, :] - loc[:, None]) / scale[:, None])
              / scale[:, None]).sum(axis=0)
    if not probability:
        return u, dens_u
    p = expit(u)
    return p, dens_u / (p * (1.0 - p))


_FIT_FAILURES = (NotConverged, HessianNotPD, SeparationSuspected, np.linalg.LinAlgError)


def marginalize_sens_spec(dataset: Dataset, glm_spec: GlmSpec, grid: SensSpecGrid,
                          target: str = "p_y", at=None, threads: int = 1,
                          n_eval: int = 20001) -> MergedPosterior:
    """Fit the sslogit model at every grid point and merge the posteriors.

    ``target`` is ``"p_y"`` (probability at covariate configuration ``at``,
    default intercept only) or a coefficient name.  Failed points are
    dropped with ``GridPointDroppedWarning`` while their total weight stays
    below 5%; otherwise ``TooManyFailedFits`` is raised.
    """
    names = glm_spec.coef_names
    probability = target == "p_y"
    if probability:
        at = np.eye(glm_spec.n_coef)[0] if at is None else np.asarray(at, dtype=float)
    elif target in names:
        at = np.eye(glm_spec.n_coef)[names.index(target)]
    else:
        raise ValueError(f"unknown target {target!r}; use 'p_y' or one of {names}")

    def work(point):
        pi00, pi11 = point
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = fit_response_mc(dataset, glm_spec, pi00, pi11)
            return fit, [w.message for w in caught]
        except _FIT_FAILURES as exc:
            return exc, []

    pts = [tuple(p) for p in grid.points]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, pts))
    else:
        results = [work(p) for p in pts]

    ok = np.array([isinstance(r[0], ConditionalFit) for r in results])
    lost = float(grid.weights[~ok].sum())
    if lost >= MAX_DROPPED_WEIGHT:
        first = next(r[0] for r in results if not isinstance(r[0], ConditionalFit))
        raise TooManyFailedFits(f"failed grid points carry weight {lost:.3g}: {first}")
    if lost > 0:
        warnings.warn(f"dropped {int((~ok).sum())} grid points with total weight {lost:.3g}",
                      GridPointDroppedWarning, stacklevel=2)
    for fit, msgs in results:
        for msg in msgs:
            warnings.warn(msg, stacklevel=2)

    fits = tuple(r[0] for r, good in zip(results, ok) if good)
    w = grid.weights[ok] / grid.weights[ok].sum()
    eta = np.array([linear_predictor(f, at) for f in fits])
    values, density = _density(eta[:, 0], eta[:, 1], w, probability, n_eval)
    return MergedPosterior(target, grid.points[ok], w, fits, eta[:, 0], eta[:, 1], probability,
                           values, density, lost)
