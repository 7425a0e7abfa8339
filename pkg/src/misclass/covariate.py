"""Importance sampling over a latent, correctly classified binary covariate.

Each iteration draws a full latent vector from its conditional distribution
given the observed (misclassified or missing) covariate and the exposure
model, fits the regression of interest conditional on that draw, and keeps
the fit's log marginal likelihood as the importance log weight.  Posterior
summaries are weight-averaged over iterations.

Iteration ``j`` always uses its own counter-based random stream derived
from the root seed, so results do not depend on how iterations are split
across worker threads.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BINARY_FAMILIES,
    Dataset,
    ExposureModel,
    GlmSpec,
    MisclassMatrix,
    MisclassModel,
    design_matrix,
    exposure_probabilities,
    observation_matrices,
)
from .errors import (
    AllWeightsDegenerate,
    LowESSWarning,
    MisclassError,
    NotConverged,
    OutOfRange,
    TooManyFailedFits,
    ZeroDenominator,
)
from .glm import (
    ConditionalFit,
    fit_conjugate_linear,
    fit_laplace_glm,
    marginal_cdf,
    marginal_quantile,
)

log = logging.getLogger(__name__)

CHUNK_SIZE = 256
MAX_FAILED_FRACTION = 0.01
LOW_ESS_FRACTION = 0.01
DEFAULT_QUANTILES = (0.025, 0.5, 0.975)


# --------------------------------------------------------------------------- #
# Sampling distribution of the latent covariate
# --------------------------------------------------------------------------- #


def conditional_success_probability(matrix: MisclassMatrix, w_observed, p_x: float) -> float:
    """``Pr(x = 1 | w, Z)`` for one observation.

    ``w_observed=None`` means the covariate is missing, in which case the
    exposure probability is returned unchanged.
    """
    if not 0.0 <= p_x <= 1.0:
        raise OutOfRange(f"p_x = {p_x} is not a probability")
    if w_observed is None:
        return p_x
    k = int(w_observed)
    num = matrix.prob(k, 1) * p_x
    den = matrix.prob(k, 0) * (1.0 - p_x) + num
    if den == 0.0:
        raise ZeroDenominator(f"observed w={k} has zero probability under the model")
    return num / den


def latent_probabilities(dataset: Dataset, mc_model: MisclassModel,
                         exposure_model: ExposureModel) -> np.ndarray:
    """Per-observation Bernoulli success probabilities of the latent covariate.

    Missing entries get the exposure probability itself; rows with a
    validated true value get that value (0 or 1).
    """
    p_x = exposure_probabilities(exposure_model, dataset)
    mats = observation_matrices(mc_model, dataset)
    w = dataset.w.astype(np.intp)
    rows = np.arange(dataset.n)
    pi_k1 = mats[rows, 1, w]
    pi_k0 = mats[rows, 0, w]
    num = pi_k1 * p_x
    den = pi_k0 * (1.0 - p_x) + num
    bad = (den == 0.0) & ~dataset.w_missing
    if dataset.x_known is not None:
        bad &= dataset.x_known_missing
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ZeroDenominator(f"row {i}: observed w={int(w[i])} is impossible under the "
                              f"misclassification matrix and exposure probability", row=i)
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = num / den
    prob = np.where(dataset.w_missing, p_x, prob)
    if dataset.x_known is not None:
        prob = np.where(dataset.x_known_missing, prob, dataset.x_known.astype(float))
    return prob


def _root_key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)


def iteration_stream(seed: int, j: int, key=None) -> np.random.Generator:
    """Independent counter-based generator for iteration ``j``.

    The iteration index occupies the top word of the Philox counter, so
    streams for different ``j`` never overlap.
    """
    if key is None:
        key = _root_key(seed)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(j)]))


def sample_latent_covariate(dataset: Dataset, mc_model: MisclassModel,
                            exposure_model: ExposureModel, rng: np.random.Generator,
                            probs: np.ndarray | None = None) -> np.ndarray:
    """One draw of the latent covariate vector as int8 0/1."""
    if probs is None:
        probs = latent_probabilities(dataset, mc_model, exposure_model)
    return (rng.random(probs.shape[0]) < probs).astype(np.int8)


def draw_latent(dataset, mc_model, exposure_model, seed: int, j: int) -> np.ndarray:
    """Reproduce the latent vector of iteration ``j`` of a seeded run."""
    return sample_latent_covariate(dataset, mc_model, exposure_model, iteration_stream(seed, j))


# --------------------------------------------------------------------------- #
# Weights
# --------------------------------------------------------------------------- #


def normalize_weights(log_weights):
    """Self-normalised weights and effective sample size.

    Non-finite log weights receive weight zero.

    Returns
    -------
    weights : ndarray
    ess : float
        ``1 / sum(w**2)``.
    """
    lw = np.asarray(log_weights, dtype=float)
    ok = np.isfinite(lw)
    if not np.any(ok):
        raise AllWeightsDegenerate("no finite log weight")
    out = np.zeros_like(lw)
    # max-shift only: differences are preserved, so exact shifts give identical weights
    e = np.exp(lw[ok] - np.max(lw[ok]))
    out[ok] = e / np.sum(e)
    return out, float(1.0 / np.sum(out ** 2))


def centered_weighted_sum(weights, values):
    """``sum_j w_j v_j`` computed around the first value.

    Equal values reproduce that value exactly, whatever the weights.
    """
    values = np.asarray(values, dtype=float)
    ref = values[0]
    return ref + np.tensordot(weights, values - ref, axes=(0, 0))


# --------------------------------------------------------------------------- #
# Conditional fits
# --------------------------------------------------------------------------- #


class _ConditionalModel:
    """Fits the regression of interest for a given latent covariate vector.

    For Bernoulli families whose non-latent design columns take few distinct
    values, rows are collapsed into frequency-weighted groups, so the fit
    depends on the draw only through a small count table.
    """

    def __init__(self, dataset: Dataset, spec: GlmSpec):
        self.dataset = dataset
        self.spec = spec
        self.y = dataset.y
        self.prior_var = spec.prior_variances()
        self.Z = dataset.matrix(spec.covariates)
        self.binary = spec.family in BINARY_FAMILIES
        self.groups = None
        if self.binary:
            dataset.check_family(spec.family)
            key = np.column_stack([self.Z, self.y])
            uniq, inverse = np.unique(key, axis=0, return_inverse=True)
            if uniq.shape[0] * 2 <= dataset.n // 2:
                self.groups = inverse.reshape(-1)
                self.n_groups = uniq.shape[0]
                self.group_Z = uniq[:, :-1]
                self.group_y = uniq[:, -1]

    def cache_key(self, x: np.ndarray) -> bytes:
        if self.groups is not None:
            counts = np.bincount(self.groups * 2 + x, minlength=2 * self.n_groups)
            return counts.tobytes()
        return np.packbits(x).tobytes()

    def fit(self, x: np.ndarray) -> ConditionalFit:
        spec = self.spec
        if not self.binary:
            X = design_matrix(self.dataset, spec, x)
            return fit_conjugate_linear(X, self.y, self.prior_var, spec.noise)
        if self.groups is not None:
            counts = np.bincount(self.groups * 2 + x, minlength=2 * self.n_groups)
            keep = counts > 0
            gx = np.tile([0.0, 1.0], self.n_groups)
            gZ = np.repeat(self.group_Z, 2, axis=0)
            gy = np.repeat(self.group_y, 2)
            X = np.column_stack([np.ones(keep.sum()), gx[keep], gZ[keep]])
            return fit_laplace_glm(X, gy[keep], spec.family, self.prior_var, spec.pi00, spec.pi11,
                                   weights=counts[keep])
        X = design_matrix(self.dataset, spec, x)
        return fit_laplace_glm(X, self.y, spec.family, self.prior_var, spec.pi00, spec.pi11)


def fit_conditional(dataset: Dataset, spec: GlmSpec, x=None) -> ConditionalFit:
    """Fit the regression of interest using covariate vector ``x``.

    ``x`` defaults to the observed ``w`` (the naive fit).
    """
    if x is None:
        x = dataset.w
    return _ConditionalModel(dataset, spec).fit(np.asarray(x, dtype=np.int8))


# --------------------------------------------------------------------------- #
# Importance sampling driver
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class WeightedPosterior:
    """Importance-sampling posterior aggregate.

    Per-draw arrays (``log_ml``, ``loc``, ``scale``, ``means``) hold the
    retained draws only, in iteration order; ``iteration_index`` maps them
    back to iteration numbers.
    """

    coef_names: tuple
    iterations: int
    seed: int
    weights: np.ndarray
    ess: float
    means: np.ndarray
    quantile_levels: tuple
    weighted_quantiles: np.ndarray          # (len(quantile_levels), p), weighted-sum rule
    iteration_index: np.ndarray
    log_ml: np.ndarray
    draw_means: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    df: float
    n_failed: int = 0
    n_unique: int = 0
    warnings: tuple = field(default_factory=tuple)

    def quantile(self, coefficient_index: int, alpha: float) -> float:
        """Weighted sum of conditional quantiles."""
        q = marginal_quantile(self.loc[:, coefficient_index], self.scale[:, coefficient_index],
                              self.df, alpha)
        return float(centered_weighted_sum(self.weights, q))

    def mixture_quantile(self, coefficient_index: int, alpha: float) -> float:
        return aggregate_mixture_quantile(self, coefficient_index, alpha)

    def mixture_sd(self) -> np.ndarray:
        """Standard deviation of the weight mixture of conditional marginals."""
        if np.isinf(self.df):
            var_j = self.scale ** 2
        else:
            var_j = self.scale ** 2 * self.df / (self.df - 2.0)
        second = self.weights @ (var_j + self.draw_means ** 2)
        return np.sqrt(np.maximum(second - self.means ** 2, 0.0))

    def summary(self) -> dict:
        out = {}
        for j, name in enumerate(self.coef_names):
            row = {"mean": float(self.means[j]), "sd": float(self.mixture_sd()[j])}
            for k, a in enumerate(self.quantile_levels):
                row[f"q{a:g}"] = float(self.weighted_quantiles[k, j])
                row[f"mixture_q{a:g}"] = self.mixture_quantile(j, a)
            out[name] = row
        return out


def _mixture_cdf(post, j, q):
    return float(post.weights @ marginal_cdf(q, post.loc[:, j], post.scale[:, j], post.df))


def aggregate_mixture_quantile(posterior: WeightedPosterior, coefficient_index: int,
                               alpha: float, tol: float = 1e-10) -> float:
    """Exact quantile of the weight mixture of conditional posteriors (bisection)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    j = coefficient_index
    qs = marginal_quantile(posterior.loc[:, j], posterior.scale[:, j], posterior.df, alpha)
    lo, hi = float(np.min(qs)), float(np.max(qs))
    if lo == hi:
        return lo
    # every component CDF is <= alpha at lo and >= alpha at hi
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if _mixture_cdf(posterior, j, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _run_chunk(model: _ConditionalModel, probs, key, start, stop, cache):
    p = model.spec.n_coef
    size = stop - start
    log_ml = np.full(size, -np.inf)
    loc = np.zeros((size, p))
    scale = np.ones((size, p))
    means = np.zeros((size, p))
    ok = np.zeros(size, dtype=bool)
    df = np.inf
    for i, j in enumerate(range(start, stop)):
        rng = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, j]))
        x = (rng.random(probs.shape[0]) < probs).astype(np.int8)
        ck = model.cache_key(x)
        fit = cache.get(ck)
        if fit is None:
            try:
                fit = model.fit(x)
            except (NotConverged, MisclassError, np.linalg.LinAlgError) as exc:
                log.debug("iteration %d: conditional fit failed: %s", j, exc)
                fit = exc
            cache[ck] = fit
        if isinstance(fit, Exception):
            continue
        ok[i] = fit.converged and np.isfinite(fit.log_marginal_likelihood)
        log_ml[i] = fit.log_marginal_likelihood
        loc[i], scale[i], means[i] = fit.loc, fit.scale, fit.means
        df = fit.df
    return log_ml, loc, scale, means, ok, df


def run_importance_sampling(dataset: Dataset, glm_spec: GlmSpec, mc_model: MisclassModel,
                            exposure_model: ExposureModel, iterations: int = 10_000, seed: int = 0,
                            quantile_levels=DEFAULT_QUANTILES, threads: int = 1,
                            chunk_size: int = CHUNK_SIZE) -> WeightedPosterior:
    """Importance sampling of the latent covariate with evidence weights.

    Parameters
    ----------
    dataset, glm_spec, mc_model, exposure_model
        Data and the three sub-models; the exposure and misclassification
        parameters are treated as known.
    iterations : int
        Number of latent draws M.
    seed : int
        Root seed; iteration ``j`` uses its own Philox stream.
    threads : int
        Worker threads.  Chunk boundaries are fixed by ``chunk_size`` so the
        result is bitwise identical for any thread count.

    Returns
    -------
    WeightedPosterior
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if glm_spec.mc_covariate is None:
        raise ValueError("model specification has no error-prone covariate")
    probs = latent_probabilities(dataset, mc_model, exposure_model)
    model = _ConditionalModel(dataset, glm_spec)
    key = _root_key(seed)
    bounds = [(s, min(s + chunk_size, iterations)) for s in range(0, iterations, chunk_size)]
    cache: dict = {}

    def work(b):
        return _run_chunk(model, probs, key, b[0], b[1], cache)

    if threads <= 1:
        parts = [work(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))

    log_ml = np.concatenate([pt[0] for pt in parts])
    loc = np.concatenate([pt[1] for pt in parts])
    scale = np.concatenate([pt[2] for pt in parts])
    means = np.concatenate([pt[3] for pt in parts])
    ok = np.concatenate([pt[4] for pt in parts])
    dfs = [pt[5] for pt in parts if np.any(pt[4])]
    df = dfs[0] if dfs else np.inf

    n_failed = int(iterations - ok.sum())
    if n_failed > MAX_FAILED_FRACTION * iterations:
        raise TooManyFailedFits(f"{n_failed} of {iterations} conditional fits failed")
    idx = np.flatnonzero(ok)
    weights, ess = normalize_weights(log_ml[idx])
    loc, scale, means, log_ml = loc[idx], scale[idx], means[idx], log_ml[idx]

    notes = []
    if n_failed:
        notes.append(f"{n_failed} failed conditional fits dropped")
    if ess < LOW_ESS_FRACTION * iterations:
        msg = f"low effective sample size: {ess:.1f} of {iterations}"
        warnings.warn(msg, LowESSWarning, stacklevel=2)
        notes.append(msg)

    levels = tuple(float(a) for a in quantile_levels)
    wq = np.array([centered_weighted_sum(weights, marginal_quantile(loc, scale, df, a))
                   for a in levels]).reshape(len(levels), -1)
    return WeightedPosterior(
        coef_names=tuple(glm_spec.coef_names), iterations=int(iterations), seed=int(seed),
        weights=weights, ess=ess, means=centered_weighted_sum(weights, means),
        quantile_levels=levels, weighted_quantiles=wq, iteration_index=idx, log_ml=log_ml,
        draw_means=means, loc=loc, scale=scale, df=df, n_failed=n_failed,
        n_unique=len(cache), warnings=tuple(notes))


def write_trace_csv(posterior: WeightedPosterior, path) -> None:
    """One row per retained draw: iteration, log evidence, weight, means."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "log_marginal_likelihood", "normalized_weight",
                     *posterior.coef_names])
        for k, j in enumerate(posterior.iteration_index):
            wr.writerow([int(j), repr(float(posterior.log_ml[k])), repr(float(posterior.weights[k])),
                         *(repr(float(v)) for v in posterior.draw_means[k])])
