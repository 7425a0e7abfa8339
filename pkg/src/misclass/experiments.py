"""Named experiments: simulations and the two application datasets.

Each runner returns a :class:`~misclass.io.ReportBundle` holding naive,
adjusted and (when the truth is known) true-covariate estimates.
"""

from __future__ import annotations

import time
import warnings
from typing import Callable

import numpy as np

from .core import (
    IDENTITY,
    Dataset,
    DifferentialMC,
    ExposureModel,
    GlmSpec,
    UniformMC,
    estimate_mc_from_validation,
    validate_mc_matrix,
)
from .covariate import fit_conditional, run_importance_sampling, write_trace_csv
from .errors import ConfigError
from .glm import ConditionalFit, fit_conjugate_linear
from .io import LATENT_GAUSSIAN, ModelConfig, ReportBundle, load_csv
from .latent_gaussian import LatentGaussianData, LatentGaussianModel, fit_latent_gaussian
from .response import SensSpecGrid, fit_binary, fit_response_mc, marginalize_sens_spec, probability_summary
from .simulate import simulate_covariate_mc, simulate_dichotomized, simulate_response_mc

DEFAULT_ITERATIONS = {"sim-5.1": 20_000, "sim-5.3": 20_000, "birthweight": 20_000, "hsv": 20_000,
                      "attenuation": 10_000}
LONG_ITERATIONS = {"sim-5.1": 200_000, "sim-5.3": 100_000, "birthweight": 100_000,
                    "hsv": 100_000, "attenuation": 10_000}

# cervical cancer / HSV-2 table: (y, x, w, frequency); x is None in the main study
HSV_TABLE = (
    (1, 0, 0, 13), (1, 0, 1, 3), (1, 1, 0, 5), (1, 1, 1, 18),
    (0, 0, 0, 33), (0, 0, 1, 11), (0, 1, 0, 16), (0, 1, 1, 16),
    (1, None, 0, 318), (1, None, 1, 375), (0, None, 0, 701), (0, None, 1, 535),
)

BIRTHWEIGHT_MATRIX = ((0.95, 0.05), (0.2, 0.8))
BIRTHWEIGHT_EXPOSURE = {1: (float(np.log(0.4 / 0.6)), 0.0), 2: (-0.4, 0.02)}
BIRTHWEIGHT_COLUMNS = {"response": "bwt", "mc_covariate": "smoke", "covariate": "lwt"}


def substream_seeds(seed: int, count: int) -> list[int]:
    """Independent integer seeds for replicates, derived from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


# --------------------------------------------------------------------------- #
# report helpers
# --------------------------------------------------------------------------- #


def add_conditional(bundle: ReportBundle, variant: str, fit: ConditionalFit, names, replicate=0,
                    rename=None):
    rename = rename or {}
    for j, name in enumerate(names):
        d = fit.marginal(j)
        bundle.add(variant, rename.get(name, name), fit.means[j], d.ppf(0.025), d.ppf(0.975),
                   replicate=replicate, sd=float(fit.sds[j]))


def add_weighted(bundle: ReportBundle, variant: str, post, replicate=0):
    levels = list(post.quantile_levels)
    lo_k, hi_k = levels.index(0.025), levels.index(0.975)
    sds = post.mixture_sd()
    for j, name in enumerate(post.coef_names):
        bundle.add(variant, name, post.means[j], post.weighted_quantiles[lo_k, j],
                   post.weighted_quantiles[hi_k, j], replicate=replicate, sd=float(sds[j]),
                   mixture_lo95=post.mixture_quantile(j, 0.025),
                   mixture_hi95=post.mixture_quantile(j, 0.975),
                   ess=float(post.ess), iterations=post.iterations, n_failed=post.n_failed,
                   warnings=list(post.warnings))


def _quantile_levels(levels):
    levels = tuple(sorted(set(float(a) for a in levels) | {0.025, 0.975}))
    return levels


def _true_fit(dataset: Dataset, spec: GlmSpec):
    if "x" not in dataset.truth:
        return None
    return fit_conditional(dataset, spec, dataset.truth["x"])


def _covariate_report(name, dataset, spec, mc_model, exposure, iterations, seed, threads,
                      bundle=None, replicate=0, levels=(0.025, 0.5, 0.975), trace=None,
                      naive_dataset=None):
    bundle = bundle or ReportBundle(name)
    naive_ds = naive_dataset
    if naive_ds is None:
        naive_ds = dataset.subset(~dataset.w_missing) if np.any(dataset.w_missing) else dataset
    add_conditional(bundle, "naive", fit_conditional(naive_ds, spec), spec.coef_names, replicate)
    post = run_importance_sampling(dataset, spec, mc_model, exposure, iterations=iterations,
                                   seed=seed, quantile_levels=_quantile_levels(levels),
                                   threads=threads)
    add_weighted(bundle, "adjusted", post, replicate)
    true = _true_fit(dataset, spec)
    if true is not None:
        add_conditional(bundle, "true", true, spec.coef_names, replicate)
    if trace is not None:
        write_trace_csv(post, trace)
    return bundle, post


# --------------------------------------------------------------------------- #
# simulations
# --------------------------------------------------------------------------- #


SIM_SPEC = GlmSpec(family="gaussian", covariates=("z",))
SIM_EXPOSURE = ExposureModel(-0.5, (0.25,), ("z",))
SIM_MATRIX = ((0.9, 0.1), (0.2, 0.8))


def sim_5_1(iterations=None, seed=0, threads=1, replicates=10, n=100, **_):
    """Linear model with a misclassified binary covariate, replicated."""
    iterations = iterations or DEFAULT_ITERATIONS["sim-5.1"]
    bundle = ReportBundle("sim-5.1", {"seed": seed, "iterations": iterations,
                                      "replicates": replicates, "n": n})
    mc = UniformMC(validate_mc_matrix(SIM_MATRIX))
    for r, s in enumerate(substream_seeds(seed, replicates)):
        ds = simulate_covariate_mc(n=n, matrix=SIM_MATRIX, seed=s)
        _covariate_report("sim-5.1", ds, SIM_SPEC, mc, SIM_EXPOSURE, iterations, s, threads,
                          bundle, r)
    return bundle


def sim_5_3(iterations=None, seed=0, threads=1, replicates=10, n=100, missing_rate=0.2, **_):
    """Missing (not misclassified) binary covariate; complete-case comparison."""
    iterations = iterations or DEFAULT_ITERATIONS["sim-5.3"]
    bundle = ReportBundle("sim-5.3", {"seed": seed, "iterations": iterations,
                                      "replicates": replicates, "n": n,
                                      "missing_rate": missing_rate})
    mc = UniformMC(IDENTITY)
    for r, s in enumerate(substream_seeds(seed, replicates)):
        ds = simulate_covariate_mc(n=n, matrix=IDENTITY.entries, seed=s, missing_rate=missing_rate)
        _covariate_report("sim-5.3", ds, SIM_SPEC, mc, SIM_EXPOSURE, iterations, s, threads,
                          bundle, r)
    return bundle


def attenuation(iterations=None, seed=0, threads=1, n=10_000, accuracy=0.9, **_):
    """Large-sample attenuation check with symmetric misclassification."""
    iterations = iterations or DEFAULT_ITERATIONS["attenuation"]
    matrix = ((accuracy, 1 - accuracy), (1 - accuracy, accuracy))
    ds = simulate_covariate_mc(n=n, alpha=(0.0, 0.0), matrix=matrix, seed=seed)
    exposure = ExposureModel(0.0, (0.0,), ("z",))
    bundle = ReportBundle("attenuation", {"seed": seed, "iterations": iterations, "n": n,
                                          "accuracy": accuracy})
    _covariate_report("attenuation", ds, SIM_SPEC, UniformMC(validate_mc_matrix(matrix)), exposure,
                      iterations, seed, threads, bundle)
    return bundle


def sim_5_2(seed=0, n=200, threads=1, **_):
    """Dichotomised continuous covariate with classical measurement error."""
    sample = simulate_dichotomized(n=n, seed=seed)
    bundle = ReportBundle("sim-5.2", {"seed": seed, "n": n})
    spec = GlmSpec(family="gaussian", mc_covariate="w")
    for variant, cov in (("naive_continuous", sample.w_c), ("naive_binary", sample.w_d),
                         ("true", sample.x_c)):
        X = np.column_stack([np.ones(n), cov])
        fit = fit_conjugate_linear(X, sample.y, spec.prior_variances(), spec.noise)
        add_conditional(bundle, variant, fit, ("beta_0", "beta_xc"))
    fit = fit_latent_gaussian(sample.latent_data(), LatentGaussianModel(), threads=threads)
    for name in fit.coef_names:
        lo, hi = fit.interval(name)
        j = fit.coef_names.index(name)
        bundle.add("adjusted", name, fit.means[j], lo, hi, sd=float(fit.sds[j]))
    bundle.extras["sample_matrix"] = sample.sample_matrix()
    bundle.extras["latent_diagnostics"] = fit.diagnostics
    return bundle


def sim_5_4(seed=0, n=1000, p_y=0.10, pi00=0.90, pi11=0.95, spec_interval=(0.85, 0.95),
            sens_interval=(0.925, 0.975), resolution=11, threads=1, **_):
    """Misclassified binary response; fixed and uncertain sensitivity/specificity."""
    ds = simulate_response_mc(n=n, p_y=p_y, pi00=pi00, pi11=pi11, seed=seed)
    spec = GlmSpec(family="bernoulli-sslogit", mc_covariate=None, pi00=pi00, pi11=pi11)
    bundle = ReportBundle("sim-5.4", {"seed": seed, "n": n, "p_y": p_y, "pi00": pi00, "pi11": pi11})

    def add(variant, summary, **extra):
        bundle.add(variant, "p", summary["mean"], summary["q0.025"], summary["q0.975"],
                   sd=summary["sd"], **extra)

    add("naive", probability_summary(fit_binary(ds, spec, "bernoulli-logit")))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fixed = fit_response_mc(ds, spec)
    add("adjusted_fixed", probability_summary(fixed), warnings=[str(w.message) for w in caught])
    grid = SensSpecGrid.from_intervals(spec_interval, sens_interval, resolution)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        merged = marginalize_sens_spec(ds, spec, grid, threads=threads)
    add("adjusted_grid", merged.summary(), warnings=[str(w.message) for w in caught],
        dropped_weight=merged.dropped_weight)
    bundle.extras["grid_density_integral"] = merged.integral()
    return bundle


# --------------------------------------------------------------------------- #
# applications
# --------------------------------------------------------------------------- #


def hsv_dataset() -> Dataset:
    """Table rows expanded to one record per patient; validation x kept as known."""
    y, w, known = [], [], []
    for yy, xx, ww, freq in HSV_TABLE:
        y += [yy] * freq
        w += [ww] * freq
        known += [xx] * freq
    return Dataset.from_columns(y, w, {}, x_known=known)


def hsv_validation_counts():
    return [(y, x, w, f) for y, x, w, f in HSV_TABLE if x is not None]


def hsv_models():
    """Differential and pooled (nondifferential) error and exposure models."""
    est = estimate_mc_from_validation(hsv_validation_counts())
    differential = (DifferentialMC(est.matrices), ExposureModel(stratified_probs=est.exposure_probs))
    pooled = [(0, x, w, f) for _, x, w, f in hsv_validation_counts()]
    pest = estimate_mc_from_validation(pooled)
    p = pest.exposure_probs[0]
    nondifferential = (UniformMC(pest.matrices[0]), ExposureModel(float(np.log(p / (1 - p)))))
    return est, differential, nondifferential


def hsv(iterations=None, seed=0, threads=1, **_):
    """Case-control logistic regression with differential misclassification."""
    iterations = iterations or DEFAULT_ITERATIONS["hsv"]
    ds = hsv_dataset()
    spec = GlmSpec(family="bernoulli-logit", mc_covariate="w")
    est, differential, nondifferential = hsv_models()
    bundle = ReportBundle("hsv", {"seed": seed, "iterations": iterations, "n": ds.n})
    add_conditional(bundle, "naive", fit_conditional(ds, spec), spec.coef_names)
    for variant, (mc, ex) in (("adjusted_differential", differential),
                              ("adjusted_nondifferential", nondifferential)):
        post = run_importance_sampling(ds, spec, mc, ex, iterations=iterations, seed=seed,
                                       threads=threads)
        add_weighted(bundle, variant, post)
    bundle.extras["estimated_matrices"] = {str(k): m.tolist() for k, m in est.matrices.items()}
    bundle.extras["estimated_exposure"] = {str(k): v for k, v in est.exposure_probs.items()}
    return bundle


def birthweight(data=None, case=1, iterations=None, seed=0, threads=1, columns=None, **_):
    """Birth weight regressed on (possibly misreported) smoking and weight."""
    if data is None:
        raise ConfigError("the birthweight experiment needs --data pointing to a CSV with "
                          "columns bwt (grams), smoke (0/1) and lwt (mother's weight)")
    if case not in BIRTHWEIGHT_EXPOSURE:
        raise ConfigError(f"birthweight case must be 1 or 2, got {case!r}")
    iterations = iterations or DEFAULT_ITERATIONS["birthweight"]
    cols = dict(BIRTHWEIGHT_COLUMNS, **(columns or {}))
    a0, az = BIRTHWEIGHT_EXPOSURE[case]
    cfg = ModelConfig("gaussian", cols["response"], (cols["covariate"],), cols["mc_covariate"],
                      None, None, ExposureModel(a0, (az,), (cols["covariate"],)), iterations, seed)
    ds = load_csv(data, cfg)
    w = [None if miss else int(v) for v, miss in zip(ds.w, ds.w_missing)]
    ds = Dataset.from_columns(ds.y, w, {"z": ds.column(cols["covariate"])})
    spec = GlmSpec(family="gaussian", covariates=("z",))
    exposure = ExposureModel(a0, (az,), ("z",))
    mc = UniformMC(validate_mc_matrix(BIRTHWEIGHT_MATRIX))
    bundle = ReportBundle(f"birthweight-case{case}", {"seed": seed, "iterations": iterations,
                                                      "case": case, "n": ds.n})
    _covariate_report(bundle.experiment, ds, spec, mc, exposure, iterations, seed, threads, bundle)
    return bundle


EXPERIMENTS: dict[str, Callable[..., ReportBundle]] = {
    "sim-5.1": sim_5_1,
    "sim-5.2": sim_5_2,
    "sim-5.3": sim_5_3,
    "sim-5.4": sim_5_4,
    "attenuation": attenuation,
    "birthweight": birthweight,
    "hsv": hsv,
}


def run_experiment(name: str, **kwargs) -> ReportBundle:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    t0 = time.perf_counter()
    bundle = EXPERIMENTS[name](**kwargs)
    bundle.wall_time = time.perf_counter() - t0
    return bundle


# --------------------------------------------------------------------------- #
# config-driven fit
# --------------------------------------------------------------------------- #


def run_fit(config: ModelConfig, dataset: Dataset, threads: int = 1, trace=None) -> ReportBundle:
    """Naive, adjusted and (if available) true-covariate fits for one dataset."""
    if config.seed is None:
        raise ConfigError("a seed is required (sampler.seed or --seed)")
    t0 = time.perf_counter()
    bundle = ReportBundle("fit", {"seed": config.seed, "iterations": config.iterations,
                                  "family": config.family, "n": dataset.n})
    if config.family == LATENT_GAUSSIAN:
        if config.covariates:
            Z = dataset.matrix(config.covariates)
        else:
            Z = None
        data = LatentGaussianData.build(dataset.y, dataset.w, Z, None, config.covariates)
        model = LatentGaussianModel(**config.latent)
        fit = fit_latent_gaussian(data, model, threads=threads)
        for j, name in enumerate(fit.coef_names):
            lo, hi = fit.interval(name)
            bundle.add("adjusted", name, fit.means[j], lo, hi, sd=float(fit.sds[j]))
        bundle.extras["latent_diagnostics"] = fit.diagnostics
    elif config.family == "bernoulli-sslogit":
        spec = config.glm_spec
        add_conditional(bundle, "naive", fit_binary(dataset, spec, "bernoulli-logit"), spec.coef_names)
        add_conditional(bundle, "adjusted", fit_response_mc(dataset, spec), spec.coef_names)
    else:
        if config.iterations is None:
            raise ConfigError("sampler.iterations (or --iterations) is required")
        spec = config.glm_spec
        _covariate_report("fit", dataset, spec, config.mc_model, config.exposure,
                          config.iterations, config.seed, threads, bundle,
                          levels=config.experiment.quantile_levels, trace=trace)
    bundle.wall_time = time.perf_counter() - t0
    return bundle
