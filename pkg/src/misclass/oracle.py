"""Brute-force posterior over all 2**n latent covariate configurations.

Reference implementation for small ``n``: every configuration is weighted by
its exact sampling probability times its exact conjugate evidence, so the
mixture posterior carries no Monte-Carlo or approximation error.  Sums use
``math.fsum`` so results do not depend on enumeration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CovariateDependentMC,
    Dataset,
    ExposureModel,
    GlmSpec,
    MisclassModel,
    design_matrix,
    exposure_probability,
    mc_matrix_for_observation,
)
from .covariate import DEFAULT_QUANTILES, conditional_success_probability
from .errors import NotSupported, SpecMismatch, TooLarge
from .glm import fit_conjugate_linear, marginal_cdf, marginal_quantile


def _fsum_weighted(weights, values):
    """Exactly rounded ``sum_k weights[k] * values[k]`` per column."""
    values = np.asarray(values, dtype=float)
    prods = weights[:, None] * values.reshape(values.shape[0], -1)
    return np.array([math.fsum(col) for col in prods.T])


@dataclass(frozen=True, eq=False)
class EnumerationResult:
    coef_names: tuple
    configs: np.ndarray          # (K, n) configurations with positive weight
    log_weights: np.ndarray      # normalised log weights
    weights: np.ndarray
    log_normalizer: float
    means: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    df: float
    quantile_levels: tuple
    weighted_quantiles: np.ndarray

    def mixture_cdf(self, coefficient_index: int, q: float) -> float:
        j = coefficient_index
        return math.fsum(self.weights * marginal_cdf(q, self.loc[:, j], self.scale[:, j], self.df))

    def mixture_quantile(self, coefficient_index: int, alpha: float, tol: float = 1e-10) -> float:
        j = coefficient_index
        qs = marginal_quantile(self.loc[:, j], self.scale[:, j], self.df, alpha)
        lo, hi = float(qs.min()), float(qs.max())
        for _ in range(200):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            if self.mixture_cdf(j, mid) < alpha:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def enumerate_exact_posterior(dataset: Dataset, glm_spec: GlmSpec, mc_model: MisclassModel,
                              exposure_model: ExposureModel, max_n: int = 14,
                              quantile_levels=DEFAULT_QUANTILES) -> EnumerationResult:
    """Exact mixture posterior by enumerating every latent configuration."""
    n = dataset.n
    if n > max_n:
        raise TooLarge(f"n = {n} exceeds max_n = {max_n}")
    if glm_spec.family != "gaussian":
        raise NotSupported("the exact oracle needs the analytic gaussian evidence")
    levels = dataset.response_levels() if np.all((dataset.y == 0) | (dataset.y == 1)) else None
    z = dataset.column(mc_model.z_column) if isinstance(mc_model, CovariateDependentMC) else None

    # sampling probabilities, observation by observation
    probs = np.empty(n)
    for i in range(n):
        lvl = None if levels is None else int(levels[i])
        row = [dataset.column(c)[i] for c in exposure_model.columns]
        p_x = exposure_probability(exposure_model, row, lvl)
        if dataset.x_known is not None and not dataset.x_known_missing[i]:
            probs[i] = float(dataset.x_known[i])
            continue
        if dataset.w_missing[i]:
            probs[i] = conditional_success_probability(None, None, p_x)
            continue
        mat = mc_matrix_for_observation(mc_model, i, lvl, None if z is None else z[i])
        probs[i] = conditional_success_probability(mat, int(dataset.w[i]), p_x)

    configs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(np.int8)
    with np.errstate(divide="ignore"):
        log_p1, log_p0 = np.log(probs), np.log1p(-probs)
    log_prior = np.where(configs == 1, log_p1, log_p0).sum(axis=1)
    keep = np.isfinite(log_prior)
    configs, log_prior = configs[keep], log_prior[keep]

    prior_var = glm_spec.prior_variances()
    K, p = configs.shape[0], glm_spec.n_coef
    log_ev = np.empty(K)
    loc = np.empty((K, p))
    scale = np.empty((K, p))
    means = np.empty((K, p))
    df = np.inf
    for k, x in enumerate(configs):
        fit = fit_conjugate_linear(design_matrix(dataset, glm_spec, x), dataset.y, prior_var,
                                   glm_spec.noise)
        log_ev[k] = fit.log_marginal_likelihood
        loc[k], scale[k], means[k], df = fit.loc, fit.scale, fit.means, fit.df

    log_joint = log_prior + log_ev
    top = float(np.max(log_joint))
    log_norm = top + math.log(math.fsum(np.exp(log_joint - top)))
    log_w = log_joint - log_norm
    weights = np.exp(log_w)

    levels_q = tuple(float(a) for a in quantile_levels)
    wq = np.array([_fsum_weighted(weights, marginal_quantile(loc, scale, df, a)) for a in levels_q])
    return EnumerationResult(
        coef_names=tuple(glm_spec.coef_names), configs=configs, log_weights=log_w, weights=weights,
        log_normalizer=log_norm, means=_fsum_weighted(weights, means), loc=loc, scale=scale, df=df,
        quantile_levels=levels_q, weighted_quantiles=wq.reshape(len(levels_q), p))


def exact_vs_is_distance(oracle: EnumerationResult, is_result) -> dict:
    """Per-coefficient gaps between the exact posterior and another posterior.

    ``is_result`` is normally a ``WeightedPosterior``; any object exposing
    ``coef_names``, ``means``, ``quantile_levels``, ``weighted_quantiles`` and
    ``mixture_quantile`` works (including another ``EnumerationResult``).
    """
    if tuple(oracle.coef_names) != tuple(is_result.coef_names):
        raise SpecMismatch(f"coefficients differ: {oracle.coef_names} vs {is_result.coef_names}")
    if tuple(oracle.quantile_levels) != tuple(is_result.quantile_levels):
        raise SpecMismatch("quantile levels differ")
    report = {}
    for j, name in enumerate(oracle.coef_names):
        row = {"abs_mean_gap": abs(float(oracle.means[j] - is_result.means[j]))}
        for k, a in enumerate(oracle.quantile_levels):
            row[f"abs_q{a:g}_gap"] = abs(float(oracle.weighted_quantiles[k, j]
                                               - is_result.weighted_quantiles[k, j]))
            row[f"abs_mixture_q{a:g}_gap"] = abs(oracle.mixture_quantile(j, a)
                                                 - is_result.mixture_quantile(j, a))
        report[name] = row
    return report
