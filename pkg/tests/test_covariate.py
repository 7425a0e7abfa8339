import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logit

from misclass.core import (
    IDENTITY,
    Dataset,
    ExposureModel,
    GlmSpec,
    UniformMC,
    exposure_probabilities,
    validate_mc_matrix,
)
from misclass.covariate import (
    WeightedPosterior,
    aggregate_mixture_quantile,
    conditional_success_probability,
    fit_conditional,
    iteration_stream,
    latent_probabilities,
    normalize_weights,
    run_importance_sampling,
    sample_latent_covariate,
)
from misclass.errors import AllWeightsDegenerate, LowESSWarning, ZeroDenominator
from misclass.experiments import SIM_EXPOSURE, SIM_MATRIX, SIM_SPEC
from misclass.glm import marginal_quantile, posterior_quantile
from misclass.simulate import simulate_covariate_mc

M51 = validate_mc_matrix(SIM_MATRIX)
HALF = validate_mc_matrix([[0.5, 0.5], [0.5, 0.5]])
finite = st.floats(-700, 700)


def single_obs(w, p_x):
    ds = Dataset.from_columns([0.0], [w])
    return ds, ExposureModel(float(logit(p_x)))


class TestConditionalProbability:
    def test_observed_one(self):
        assert conditional_success_probability(M51, 1, 0.4) == pytest.approx(0.32 / 0.38, abs=1e-12)
        assert conditional_success_probability(M51, 1, 0.4) == pytest.approx(0.84211, abs=1e-5)

    def test_observed_zero(self):
        assert conditional_success_probability(M51, 0, 0.4) == pytest.approx(0.12903, abs=1e-5)

    def test_uninformative_and_missing(self):
        assert conditional_success_probability(HALF, 1, 0.37) == pytest.approx(0.37, abs=1e-15)
        assert conditional_success_probability(M51, None, 0.37) == 0.37

    def test_impossible_observation(self):
        with pytest.raises(ZeroDenominator):
            conditional_success_probability(IDENTITY, 1, 0.0)

    def test_row_index_reported(self):
        ds = Dataset.from_columns([0.0, 1.0], [0, 1])
        with pytest.raises(ZeroDenominator) as info:
            latent_probabilities(ds, UniformMC(IDENTITY), ExposureModel(-800.0))
        assert info.value.row == 1


class TestSampling:
    def test_identity_returns_w(self):
        ds = simulate_covariate_mc(n=50, seed=1)
        x = sample_latent_covariate(ds, UniformMC(IDENTITY), SIM_EXPOSURE, np.random.default_rng(0))
        np.testing.assert_array_equal(x, ds.w)

    def test_missing_with_certain_exposure(self):
        ds = Dataset.from_columns([0.0, 1.0, 2.0], [0, None, 1])
        for j in range(20):
            x = sample_latent_covariate(ds, UniformMC(M51), ExposureModel(50.0), iteration_stream(3, j))
            assert x[1] == 1

    def test_monte_carlo_frequency(self):
        ds, ex = single_obs(1, 0.4)
        probs = latent_probabilities(ds, UniformMC(M51), ex)
        rng = np.random.default_rng(11)
        draws = np.array([sample_latent_covariate(ds, None, None, rng, probs)[0] for _ in range(100_000)])
        p = 0.32 / 0.38
        assert abs(draws.mean() - p) < 3 * np.sqrt(p * (1 - p) / draws.size)

    def test_half_matrix_reduces_to_exposure(self):
        ds = simulate_covariate_mc(n=5, seed=4)
        probs = latent_probabilities(ds, UniformMC(HALF), SIM_EXPOSURE)
        p_x = 1 / (1 + np.exp(0.5 - 0.25 * ds.column("z")))
        rng = np.random.default_rng(2)
        draws = (rng.random((100_000, ds.n)) < probs).mean(axis=0)
        se = np.sqrt(p_x * (1 - p_x) / 100_000)
        assert np.all(np.abs(draws - p_x) < 3 * se)

    def test_streams_independent_of_order(self):
        a = iteration_stream(9, 5).random(4)
        iteration_stream(9, 4).random(4)
        np.testing.assert_array_equal(iteration_stream(9, 5).random(4), a)
        assert not np.array_equal(iteration_stream(9, 6).random(4), a)


class TestNormalizeWeights:
    def test_equal(self):
        w, ess = normalize_weights(np.full(8, -3.2))
        np.testing.assert_allclose(w, 1 / 8)
        assert ess == pytest.approx(8.0)

    def test_example(self):
        w, ess = normalize_weights([0.0, np.log(3.0)])
        np.testing.assert_allclose(w, [0.25, 0.75])
        assert ess == pytest.approx(1.6)

    def test_no_overflow(self):
        w, _ = normalize_weights([1000.0, 1000.0 + np.log(3.0)])
        np.testing.assert_allclose(w, [0.25, 0.75])

    def test_degenerate(self):
        with pytest.raises(AllWeightsDegenerate):
            normalize_weights([-np.inf, np.nan])

    @given(st.lists(st.integers(-4000, 4000), min_size=1, max_size=30), st.integers(-10 ** 6, 10 ** 6))
    def test_shift_invariance(self, k, c):
        # eighths and integers shift without rounding
        lw = np.asarray(k, dtype=float) / 8.0
        w1, e1 = normalize_weights(lw)
        w2, e2 = normalize_weights(lw + c)
        np.testing.assert_array_equal(w1, w2)
        assert e1 == e2

    @given(st.lists(finite, min_size=1, max_size=40))
    def test_ess_bounds(self, lw):
        w, ess = normalize_weights(lw)
        assert ess <= len(lw) * (1 + 1e-12)
        if len(set(lw)) > 1 and np.max(w) > 1.0 / len(lw) + 1e-9:
            assert ess < len(lw)


def posterior_from(loc, scale, weights):
    loc = np.asarray(loc, dtype=float).reshape(-1, 1)
    scale = np.asarray(scale, dtype=float).reshape(-1, 1)
    w = np.asarray(weights, dtype=float)
    return WeightedPosterior(("b",), len(w), 0, w, 1.0, w @ loc, (0.5,), np.zeros((1, 1)),
                             np.arange(len(w)), np.zeros(len(w)), loc, loc, scale, np.inf)


class TestMixtureQuantile:
    def test_single_component(self):
        fit = fit_conditional(simulate_covariate_mc(n=30, seed=2), SIM_SPEC)
        post = WeightedPosterior(("b",), 1, 0, np.ones(1), 1.0, fit.means[:1], (0.5,), np.zeros((1, 1)),
                                 np.zeros(1, int), np.zeros(1), fit.means[None, :1], fit.loc[None, :1],
                                 fit.scale[None, :1], fit.df)
        for a in (0.025, 0.5, 0.975):
            assert aggregate_mixture_quantile(post, 0, a) == pytest.approx(posterior_quantile(fit, 0, a), abs=1e-9)

    def test_symmetric_pair(self):
        post = posterior_from([-1.0, 1.0], [1.0, 1.0], [0.5, 0.5])
        assert aggregate_mixture_quantile(post, 0, 0.5) == pytest.approx(0.0, abs=1e-9)


class TestImportanceSampling:
    def test_identity_matches_conditional_fit(self):
        ds = simulate_covariate_mc(n=40, matrix=((1, 0), (0, 1)), seed=6)
        post = run_importance_sampling(ds, SIM_SPEC, UniformMC(IDENTITY), SIM_EXPOSURE, iterations=300, seed=1)
        fit = fit_conditional(ds, SIM_SPEC)
        np.testing.assert_array_equal(post.means, fit.means)
        for k, a in enumerate(post.quantile_levels):
            np.testing.assert_array_equal(post.weighted_quantiles[k],
                                          marginal_quantile(fit.loc, fit.scale, fit.df, a))
        assert post.n_unique == 1
        assert post.ess == pytest.approx(300.0)

    def test_thread_determinism(self):
        ds = simulate_covariate_mc(n=30, seed=8)
        runs = [run_importance_sampling(ds, SIM_SPEC, UniformMC(M51), SIM_EXPOSURE, iterations=1500,
                                        seed=21, threads=t) for t in (1, 4, 8)]
        for r in runs[1:]:
            np.testing.assert_array_equal(r.weights, runs[0].weights)
            np.testing.assert_array_equal(r.means, runs[0].means)
            np.testing.assert_array_equal(r.weighted_quantiles, runs[0].weighted_quantiles)

    def test_low_ess_warning(self):
        ds = simulate_covariate_mc(n=400, seed=3)
        with pytest.warns(LowESSWarning):
            run_importance_sampling(ds, SIM_SPEC, UniformMC(M51), SIM_EXPOSURE, iterations=300, seed=0)

    def test_missing_entries_use_exposure(self):
        ds = simulate_covariate_mc(n=60, matrix=((1, 0), (0, 1)), missing_rate=0.2, seed=5)
        probs = latent_probabilities(ds, UniformMC(IDENTITY), SIM_EXPOSURE)
        p_x = exposure_probabilities(SIM_EXPOSURE, ds)
        miss = ds.w_missing
        assert miss.sum() == 12
        np.testing.assert_array_equal(probs[miss], p_x[miss])
        np.testing.assert_array_equal(probs[~miss], ds.w[~miss])


def test_spec_coefficient_names():
    spec = GlmSpec(covariates=("z",))
    post = run_importance_sampling(simulate_covariate_mc(n=12, seed=0), spec, UniformMC(M51), SIM_EXPOSURE,
                                   iterations=50, seed=0)
    assert post.coef_names == ("beta_0", "beta_x", "beta_z")
