import numpy as np
import pytest

from misclass.core import IDENTITY, Dataset, ExposureModel, GlmSpec, UniformMC, validate_mc_matrix
from misclass.covariate import fit_conditional, run_importance_sampling
from misclass.errors import NotSupported, SpecMismatch, TooLarge
from misclass.experiments import SIM_EXPOSURE, SIM_MATRIX, SIM_SPEC
from misclass.oracle import _fsum_weighted, enumerate_exact_posterior, exact_vs_is_distance
from misclass.simulate import simulate_covariate_mc

MC51 = UniformMC(validate_mc_matrix(SIM_MATRIX))


@pytest.fixture(scope="module")
def fixture_data():
    return simulate_covariate_mc(n=10, seed=2024)


@pytest.fixture(scope="module")
def exact(fixture_data):
    return enumerate_exact_posterior(fixture_data, SIM_SPEC, MC51, SIM_EXPOSURE)


class TestEnumeration:
    def test_weights_normalised(self, exact):
        assert exact.configs.shape == (1024, 10)
        assert np.isclose(exact.weights.sum(), 1.0, atol=1e-12)

    def test_reflexive(self, exact):
        for gaps in exact_vs_is_distance(exact, exact).values():
            assert all(v == 0.0 for v in gaps.values())

    def test_identity_concentrates(self):
        ds = simulate_covariate_mc(n=8, matrix=((1, 0), (0, 1)), seed=3)
        res = enumerate_exact_posterior(ds, SIM_SPEC, UniformMC(IDENTITY), SIM_EXPOSURE)
        assert res.configs.shape[0] == 1
        np.testing.assert_array_equal(res.configs[0], ds.w)
        fit = fit_conditional(ds, SIM_SPEC)
        np.testing.assert_array_equal(res.means, fit.means)
        post = run_importance_sampling(ds, SIM_SPEC, UniformMC(IDENTITY), SIM_EXPOSURE, iterations=64, seed=0)
        for gaps in exact_vs_is_distance(res, post).values():
            assert all(v == 0.0 for v in gaps.values())

    def test_symmetric_single_observation(self):
        ds = Dataset.from_columns([0.3], [1])
        spec = GlmSpec(prior_beta_variance=(1.0, 1e-300))
        half = UniformMC(validate_mc_matrix([[0.5, 0.5], [0.5, 0.5]]))
        res = enumerate_exact_posterior(ds, spec, half, ExposureModel(0.0))
        assert res.weights[0] == res.weights[1]
        np.testing.assert_allclose(res.weights, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_permutation_of_enumeration_order(self, exact):
        rng = np.random.default_rng(0)
        for _ in range(5):
            perm = rng.permutation(exact.weights.size)
            again = _fsum_weighted(exact.weights[perm], exact.loc[perm])
            np.testing.assert_array_equal(again, exact.means)

    def test_permutation_of_observations(self, fixture_data, exact):
        perm = np.random.default_rng(1).permutation(fixture_data.n)
        res = enumerate_exact_posterior(fixture_data.subset(perm), SIM_SPEC, MC51, SIM_EXPOSURE)
        np.testing.assert_allclose(res.means, exact.means, atol=1e-12)

    def test_too_large(self):
        with pytest.raises(TooLarge):
            enumerate_exact_posterior(simulate_covariate_mc(n=15), SIM_SPEC, MC51, SIM_EXPOSURE)

    def test_gaussian_only(self):
        ds = Dataset.from_columns([0.0, 1.0], [0, 1], {"z": [0.0, 0.0]})
        with pytest.raises(NotSupported):
            enumerate_exact_posterior(ds, GlmSpec(family="bernoulli-logit", covariates=("z",)), MC51, SIM_EXPOSURE)

    def test_spec_mismatch(self, exact, fixture_data):
        post = run_importance_sampling(fixture_data, GlmSpec(), MC51, ExposureModel(), iterations=10, seed=0)
        with pytest.raises(SpecMismatch):
            exact_vs_is_distance(exact, post)


@pytest.mark.filterwarnings("ignore::misclass.errors.LowESSWarning")
def test_monte_carlo_rate(fixture_data, exact):
    """RMS error of the IS mean roughly halves when M quadruples."""
    def rms(M):
        errs = [run_importance_sampling(fixture_data, SIM_SPEC, MC51, SIM_EXPOSURE, iterations=M,
                                        seed=1000 + r).means[1] - exact.means[1] for r in range(20)]
        return np.sqrt(np.mean(np.square(errs)))

    ratio = rms(2_000) / rms(8_000)
    assert 1.0 <= ratio <= 3.0, ratio
