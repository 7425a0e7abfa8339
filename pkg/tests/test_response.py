import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.special import expit

import misclass.response as response
from misclass.core import GlmSpec
from misclass.errors import GridPointDroppedWarning, InvalidSensSpec, NotConverged, TooManyFailedFits
from misclass.response import (
    SensSpecGrid,
    beta_from_interval,
    fit_binary,
    fit_response_mc,
    marginal_success_probability,
    marginalize_sens_spec,
    probability_summary,
    sslogit_inverse,
    true_success_probability,
)
from misclass.simulate import simulate_response_mc

SPEC = GlmSpec(family="bernoulli-sslogit", mc_covariate=None, pi00=0.90, pi11=0.95)
interior = st.floats(0.001, 0.999)


@pytest.fixture(scope="module")
def data():
    return simulate_response_mc(n=1000, seed=5)


class TestLink:
    def test_examples(self):
        assert sslogit_inverse(0.0, 0.90, 0.95) == pytest.approx(0.525, abs=1e-15)
        assert sslogit_inverse(-800.0, 0.90, 0.95) == pytest.approx(0.10, abs=1e-15)
        eta = np.linspace(-30, 30, 61)
        np.testing.assert_array_equal(sslogit_inverse(eta, 1.0, 1.0), expit(eta))

    def test_not_identifiable(self):
        with pytest.raises(InvalidSensSpec):
            sslogit_inverse(0.0, 0.4, 0.6)

    @given(eta=st.floats(-30, 30), d=st.floats(1e-3, 5), pi00=st.floats(0.6, 0.999), pi11=st.floats(0.6, 0.999))
    def test_bounded_and_monotone(self, eta, d, pi00, pi11):
        p = sslogit_inverse(eta, pi00, pi11)
        assert 1 - pi00 < p < pi11
        assert sslogit_inverse(eta + d, pi00, pi11) > p


class TestSuccessProbability:
    def test_examples(self):
        assert marginal_success_probability(0.10, 0.90, 0.95) == pytest.approx(0.185, abs=1e-15)
        assert marginal_success_probability(0.0, 1.0, 0.7) == 0.0
        assert true_success_probability(0.185, 0.90, 0.95) == pytest.approx(0.10, abs=1e-15)

    @given(p=interior, pi00=st.floats(0.55, 1.0), pi11=st.floats(0.55, 1.0))
    def test_round_trip(self, p, pi00, pi11):
        back = true_success_probability(marginal_success_probability(p, pi00, pi11), pi00, pi11)
        assert abs(back - p) < 1e-14


class TestFits:
    def test_perfect_test_equals_logit(self, data):
        spec = GlmSpec(family="bernoulli-sslogit", mc_covariate=None, pi00=1.0, pi11=1.0)
        a = fit_binary(data, spec, "bernoulli-logit")
        b = fit_response_mc(data, spec)
        np.testing.assert_allclose(b.means, a.means, rtol=0, atol=1e-10)
        np.testing.assert_allclose(b.sds, a.sds, rtol=0, atol=1e-10)

    def test_adjusted_recovers_prevalence(self, data):
        s = probability_summary(fit_response_mc(data, SPEC))
        assert s["q0.025"] < 0.10 < s["q0.975"]
        assert s["q0.025"] < s["q0.5"] < s["q0.975"]


class TestGrid:
    def test_beta_moments(self):
        a, b = beta_from_interval(0.85, 0.95)
        d = stats.beta(a, b)
        assert d.mean() == pytest.approx(0.90, abs=1e-12)
        assert d.std() == pytest.approx(0.05 / stats.norm.ppf(0.975), abs=1e-12)

    def test_tensor_grid(self):
        g = SensSpecGrid.from_intervals((0.85, 0.95), (0.925, 0.975))
        assert len(g) == 121
        assert abs(g.weights.sum() - 1.0) < 1e-12
        assert np.all(np.diff(np.unique(g.points[:, 0])) > 0)

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            SensSpecGrid(np.array([[0.9, 0.9]]), np.array([0.5]))


@pytest.fixture(scope="module")
def merged(data):
    grid = SensSpecGrid.from_intervals((0.85, 0.95), (0.925, 0.975), resolution=5)
    return marginalize_sens_spec(data, SPEC, grid)


class TestMerge:
    def test_single_point_equals_fixed(self, data):
        one = marginalize_sens_spec(data, SPEC, SensSpecGrid.single(0.90, 0.95))
        fit = fit_response_mc(data, SPEC)
        ref = probability_summary(fit)
        np.testing.assert_array_equal(one.fits[0].means, fit.means)
        assert one.mean == pytest.approx(ref["mean"], abs=1e-12)
        assert one.sd == pytest.approx(ref["sd"], abs=1e-12)
        for a in (0.025, 0.5, 0.975):
            assert one.quantile(a) == pytest.approx(ref[f"q{a:g}"], abs=1e-9)

    def test_density_integrates_to_one(self, merged):
        assert abs(merged.integral() - 1.0) < 1e-6

    def test_total_variance(self, merged):
        within = merged.weights @ merged.component_variances()
        assert merged.sd ** 2 >= within - 1e-8
        between = merged.weights @ (merged.component_means() - merged.mean) ** 2
        assert merged.sd ** 2 == pytest.approx(within + between, abs=1e-8)

    def test_grid_widens_posterior(self, data, merged):
        assert merged.sd > probability_summary(fit_response_mc(data, SPEC))["sd"]

    def test_outputs(self, merged, tmp_path):
        merged.write_density_csv(tmp_path / "d.csv")
        merged.write_summary_json(tmp_path / "s.json")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert len(lines) == merged.values.size + 1
        assert json.loads((tmp_path / "s.json").read_text())["mean"] == pytest.approx(merged.mean)

    def test_coefficient_target(self, data):
        m = marginalize_sens_spec(data, SPEC, SensSpecGrid.single(0.90, 0.95), target="beta_0", n_eval=501)
        fit = fit_response_mc(data, SPEC)
        assert m.mean == pytest.approx(fit.means[0], abs=1e-12)


class TestFailedPoints:
    def failing(self, bad):
        real = response.fit_response_mc

        def fake(dataset, spec, pi00, pi11):
            if (pi00, pi11) in bad:
                raise NotConverged("forced")
            return real(dataset, spec, pi00, pi11)
        return fake

    def test_small_loss_dropped(self, data, monkeypatch):
        pts = np.array([[0.9, 0.95]] * 29 + [[0.88, 0.96]])
        grid = SensSpecGrid(pts, np.full(30, 1 / 30))
        monkeypatch.setattr(response, "fit_response_mc", self.failing({(0.88, 0.96)}))
        with pytest.warns(GridPointDroppedWarning):
            m = marginalize_sens_spec(data, SPEC, grid, n_eval=501)
        assert len(m.fits) == 29
        assert m.dropped_weight == pytest.approx(1 / 30)

    def test_large_loss_fails(self, data, monkeypatch):
        grid = SensSpecGrid(np.array([[0.9, 0.95], [0.88, 0.96]]), np.array([0.5, 0.5]))
        monkeypatch.setattr(response, "fit_response_mc", self.failing({(0.88, 0.96)}))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(TooManyFailedFits):
                marginalize_sens_spec(data, SPEC, grid, n_eval=501)


class TestSimulation:
    def test_observed_rate(self):
        ds = simulate_response_mc(n=20_000, seed=1)
        se = np.sqrt(0.185 * 0.815 / ds.n)
        assert abs(ds.y.mean() - 0.185) < 3 * se

    def test_degenerate(self):
        assert simulate_response_mc(n=500, p_y=0.0, pi00=1.0, seed=2).y.sum() == 0
        ds = simulate_response_mc(n=20_000, p_y=0.3, pi00=1.0, pi11=1.0, seed=3)
        assert abs(ds.y.mean() - 0.3) < 3 * np.sqrt(0.21 / ds.n)
