import numpy as np
import pytest

from misclass.latent_gaussian import (
    LatentGaussianData,
    LatentGaussianModel,
    fit_latent_gaussian,
    joint_neg_log_posterior,
    laplace_at,
    probit_misclass_probability,
)
from misclass.simulate import simulate_dichotomized

SMALL = LatentGaussianModel(grid_size=3, beta_grid_size=7)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.fixture(scope="module")
def small_data():
    rng = np.random.default_rng(7)
    n = 15
    y = 1 + rng.standard_normal(n)
    w = (rng.random(n) < 0.5).astype(float)
    Z = rng.standard_normal((n, 1))
    Zt = rng.standard_normal((n, 1))
    return LatentGaussianData.build(y, w, Z, Zt, ("z",), ("t",))


class TestProbitLink:
    def test_values(self):
        assert probit_misclass_probability(0.0) == 0.5
        assert probit_misclass_probability(1.0, 1.0) == pytest.approx(0.841345, abs=1e-6)
        assert probit_misclass_probability(-1.0, 1.0) == pytest.approx(0.158655, abs=1e-6)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            probit_misclass_probability(0.0, 0.0)


class TestJointDerivatives:
    @pytest.mark.parametrize("k", range(20))
    def test_finite_differences(self, small_data, k):
        rng = np.random.default_rng(100 + k)
        model = LatentGaussianModel(sigma_u=float(rng.uniform(0.3, 2.0)))
        tau_e, tau_x = np.exp(rng.uniform(-1, 1, 2))
        theta = rng.normal(0, 1, small_data.n + small_data.n_beta + small_data.n_alpha)
        f, g, H = joint_neg_log_posterior(theta, small_data, model, tau_e, tau_x)
        h = 1e-6
        g_fd = np.empty_like(theta)
        H_fd = np.empty((theta.size, theta.size))
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fp, gp, _ = joint_neg_log_posterior(theta + e, small_data, model, tau_e, tau_x)
            fm, gm, _ = joint_neg_log_posterior(theta - e, small_data, model, tau_e, tau_x)
            g_fd[i] = (fp - fm) / (2 * h)
            H_fd[i] = (gp - gm) / (2 * h)
        assert rel_err(g, g_fd) < 1e-5
        assert rel_err(H.dense(), H_fd) < 1e-5


class TestLaplacePoint:
    def test_mode_is_stationary(self, small_data):
        pt = laplace_at(small_data, LatentGaussianModel(), 1.0, 1.0)
        _, g, _ = joint_neg_log_posterior(pt.mode, small_data, LatentGaussianModel(), 1.0, 1.0)
        assert np.max(np.abs(g)) < 1e-6

    def test_fixed_slope_has_zero_variance(self, small_data):
        pt = laplace_at(small_data, LatentGaussianModel(), 1.0, 1.0, beta_xc=0.7)
        assert pt.mode[small_data.n + 1] == 0.7
        assert pt.coef_cov[1, 1] == 0.0
        assert np.all(pt.coef_cov[1] == 0.0)


@pytest.fixture(scope="module")
def sample():
    return simulate_dichotomized(n=40, seed=3)


@pytest.fixture(scope="module")
def fit(sample):
    return fit_latent_gaussian(sample.latent_data(), SMALL)


class TestGridFit:
    def test_weights_sum_to_one(self, fit):
        assert abs(fit.weights.sum() - 1.0) < 1e-12
        assert len(fit.points) == 3 * 3 * 7

    def test_fixed_precisions_collapse_grid(self, sample):
        fit = fit_latent_gaussian(sample.latent_data(), LatentGaussianModel(tau_e=1.0, tau_x=1.0, beta_grid_size=5))
        assert len(fit.points) == 5
        assert fit.diagnostics["grid_log_tau_e"] == [0.0]

    def test_interval_contains_mean(self, fit):
        for name in fit.coef_names:
            lo, hi = fit.interval(name)
            assert lo < fit.means[fit.coef_names.index(name)] < hi

    def test_cdf_quantile_inverse(self, fit):
        for name in ("beta_0", "beta_xc"):
            q = fit.quantile(name, 0.3)
            assert fit.cdf(name, q) == pytest.approx(0.3, abs=1e-9)

    def test_threads_identical(self, sample, fit):
        other = fit_latent_gaussian(sample.latent_data(), SMALL, threads=4)
        np.testing.assert_array_equal(other.weights, fit.weights)
        np.testing.assert_array_equal(other.means, fit.means)

    @pytest.mark.parametrize("k", range(3))
    def test_permutation_invariance(self, sample, fit, k):
        d = sample.latent_data()
        p = np.random.default_rng(k).permutation(d.n)
        other = fit_latent_gaussian(LatentGaussianData.build(d.y[p], d.w_d[p]), SMALL)
        np.testing.assert_allclose(other.means, fit.means, rtol=0, atol=1e-10)
        np.testing.assert_allclose(other.sds, fit.sds, rtol=0, atol=1e-10)
        # tail quantiles amplify rounding in the cdf by 1/density
        for name in fit.coef_names:
            np.testing.assert_allclose(other.interval(name), fit.interval(name), rtol=0, atol=1e-9)

    def test_requires_enough_rows(self):
        with pytest.raises(ValueError):
            fit_latent_gaussian(LatentGaussianData.build([1.0, 2.0, 3.0], [0, 1, 0]))


@pytest.mark.xfail(strict=True, reason="(y, w_d) identify four of the five parameters; the posterior "
                                       "mean of beta_xc follows the flat ridge towards large tau_e")
def test_adjusted_mean_closer_than_naive():
    s = simulate_dichotomized(n=200, seed=2024)
    fit = fit_latent_gaussian(s.latent_data(), threads=4)
    X = np.column_stack([np.ones(s.y.size), s.w_c])
    naive = np.linalg.lstsq(X, s.y, rcond=None)[0][1]
    assert abs(fit.means[1] - 1.0) < abs(naive - 1.0)


def test_adjusted_interval_covers_truth():
    s = simulate_dichotomized(n=200, seed=11)
    lo, hi = fit_latent_gaussian(s.latent_data(), threads=4).interval("beta_xc")
    assert lo <= 1.0 <= hi


@pytest.mark.xfail(strict=True, reason="Laplace approximation breaks down for a near-step probit; "
                                       "latent posteriors near the threshold are truncated normals")
def test_small_measurement_error_limit():
    s = simulate_dichotomized(n=200, sd_u=1e-3, seed=2024)
    fit = fit_latent_gaussian(s.latent_data(), LatentGaussianModel(sigma_u=1e-3), threads=4)
    lo, hi = fit.interval("beta_xc")
    assert lo <= 1.0 <= hi
