import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import expit

from misclass.core import FixedNoise, NIGNoise
from misclass.errors import InvalidSensSpec, NonFiniteInput
from misclass.glm import (
    ConditionalFit,
    fit_conjugate_linear,
    fit_laplace_glm,
    log_posterior_terms,
    posterior_quantile,
    sequential_log_evidence,
)


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12)


def sslogit_objective(X, y, pi00, pi11):
    v = np.full(X.shape[1], 10.0)
    return lambda b: log_posterior_terms(b, X, y, "bernoulli-sslogit", v, pi00=pi00, pi11=pi11)


class TestConjugateLinear:
    def test_flat_prior_mean(self):
        fit = fit_conjugate_linear(np.ones((2, 1)), [1.0, 3.0], 1e6, FixedNoise(1.0))
        assert fit.means[0] == pytest.approx(2.0, abs=1e-3)

    def test_single_observation_evidence(self):
        fit = fit_conjugate_linear(np.ones((1, 1)), [0.0], 1.0, FixedNoise(1.0))
        assert fit.log_marginal_likelihood == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-12)
        assert fit.log_marginal_likelihood == pytest.approx(-1.26551, abs=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 30), p=st.integers(1, 4),
           fixed=st.booleans(), v=st.floats(0.1, 1e4))
    def test_evidence_two_ways(self, seed, n, p, fixed, v):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, p))
        y = X @ rng.standard_normal(p) + rng.standard_normal(n)
        noise = FixedNoise(1.3) if fixed else NIGNoise(2.0, 1.5)
        direct = fit_conjugate_linear(X, y, v, noise).log_marginal_likelihood
        assert direct == pytest.approx(sequential_log_evidence(X, y, v, noise), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), n=st.integers(3, 30))
    def test_duplicate_observation_bound(self, seed, n):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = X @ [1.0, 2.0] + rng.standard_normal(n)
        s2, v = 1.0, 100.0
        base = fit_conjugate_linear(X, y, v, FixedNoise(s2))
        i = int(np.argmin(np.abs(y - X @ base.means)))
        dup = fit_conjugate_linear(np.vstack([X, X[i]]), np.append(y, y[i]), v, FixedNoise(s2))
        r = y[i] - X[i] @ base.means
        bound = -0.5 * np.log(2 * np.pi * (s2 + X[i] @ base.cov @ X[i])) - 0.5 * r ** 2 / s2
        assert dup.log_marginal_likelihood - base.log_marginal_likelihood >= bound - 1e-10

    def test_nonfinite(self):
        with pytest.raises(NonFiniteInput):
            fit_conjugate_linear(np.ones((2, 1)), [1.0, np.nan], 1.0)


class TestLaplace:
    def test_symmetric_logit_mode(self):
        fit = fit_laplace_glm(np.ones((6, 1)), [0, 1, 0, 1, 1, 0], "bernoulli-logit", 1000.0)
        assert abs(fit.means[0]) < 1e-8

    def test_gaussian_matches_conjugate(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(40), rng.standard_normal((40, 2))])
        y = X @ [0.5, -1.0, 2.0] + rng.standard_normal(40)
        exact = fit_conjugate_linear(X, y, 50.0, FixedNoise(0.7))
        lap = fit_laplace_glm(X, y, "gaussian", 50.0, sigma2=0.7)
        np.testing.assert_allclose(lap.means, exact.means, atol=1e-8)
        np.testing.assert_allclose(lap.sds, exact.sds, atol=1e-8)
        assert lap.log_marginal_likelihood == pytest.approx(exact.log_marginal_likelihood, abs=1e-8)

    def test_sslogit_identity_equals_logit(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(200), rng.standard_normal(200)])
        y = (rng.random(200) < expit(X @ [-0.5, 1.0])).astype(float)
        a = fit_laplace_glm(X, y, "bernoulli-logit", 1000.0)
        b = fit_laplace_glm(X, y, "bernoulli-sslogit", 1000.0, pi00=1.0, pi11=1.0)
        np.testing.assert_allclose(b.means, a.means, atol=1e-10, rtol=0)
        np.testing.assert_allclose(b.sds, a.sds, atol=1e-10, rtol=0)

    def test_sslogit_not_identifiable(self):
        with pytest.raises(InvalidSensSpec):
            fit_laplace_glm(np.ones((2, 1)), [0, 1], "bernoulli-sslogit", 1.0, pi00=0.5, pi11=0.5)

    @pytest.mark.parametrize("seed", range(10))
    def test_sslogit_derivatives(self, seed):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
        y = (rng.random(50) < 0.4).astype(float)
        pi00, pi11 = rng.uniform(0.7, 0.99, 2)
        obj = sslogit_objective(X, y, pi00, pi11)
        b = rng.normal(0, 1, 3)
        _, g, H = obj(b)
        assert rel_err(g, fd_gradient(lambda t: obj(t)[0], b)) < 1e-5
        H_fd = np.array([fd_gradient(lambda t, k=k: obj(t)[1][k], b) for k in range(3)])
        assert rel_err(H, H_fd) < 1e-5

    @pytest.mark.parametrize("k,n", [(3, 10), (12, 20), (1, 8), (40, 50)])
    def test_evidence_vs_quadrature(self, k, n):
        y = np.r_[np.ones(k), np.zeros(n - k)]
        v = 4.0
        fit = fit_laplace_glm(np.ones((n, 1)), y, "bernoulli-logit", v)

        def integrand(b):
            return np.exp(k * b - n * np.logaddexp(0, b) - fit.log_marginal_likelihood) * \
                stats.norm.pdf(b, 0, np.sqrt(v))

        val, _ = integrate.quad(integrand, -30, 30, points=[fit.means[0]], limit=200)
        assert abs(np.log(val)) < 0.05


class TestQuantile:
    @staticmethod
    def one(loc, scale, df):
        return ConditionalFit(np.array([loc]), np.array([scale]), np.array([loc]),
                              np.array([scale]), df, 0.0)

    def test_examples(self):
        assert posterior_quantile(self.one(0.0, 1.0, np.inf), 0, 0.5) == 0.0
        assert posterior_quantile(self.one(1.0, 2.0, np.inf), 0, 0.975) == pytest.approx(4.91993, abs=1e-5)
        assert posterior_quantile(self.one(0.0, 1.0, 3.0), 0, 0.975) == pytest.approx(3.18245, abs=1e-5)

    @given(loc=st.floats(-100, 100), scale=st.floats(0.01, 10), df=st.sampled_from([np.inf, 3.0, 30.0]))
    def test_median_is_mean(self, loc, scale, df):
        assert posterior_quantile(self.one(loc, scale, df), 0, 0.5) == pytest.approx(loc, abs=1e-12)
