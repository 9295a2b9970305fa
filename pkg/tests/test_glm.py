import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special, stats

from misfit.conditions import Condition, Verdict, check_all
from misfit.errors import InvalidArgumentError, NumericalFailureError
from misfit.glm import (GlmAssumed, GlmData, GlmTruth, cumulant, glm_fit, least_squares, make_design,
                        separation_margin)
from misfit.quadrature import richardson_difference


def _truth(family="linear", n=400, seed=1, rho=0.5, orthogonal=False, lam=0.0, dispersion=None, intercept=True):
    X, W, v = make_design(n, np.random.default_rng(seed), rho=rho, orthogonal=orthogonal, intercept=intercept)
    beta = np.array([0.3, 1.0]) if intercept else np.array([1.0])
    phi = np.ones(n) if dispersion is None else dispersion(v)
    return GlmTruth(family, X, W, beta, np.array([lam]), phi, v)


class TestCumulants:
    @given(eta=st.floats(-8, 8))
    @pytest.mark.parametrize("family", ["linear", "logistic", "poisson"])
    def test_derivatives(self, family, eta):
        for order in (1, 2):
            fd = richardson_difference(lambda t: cumulant(family, t, order - 1), eta, 1e-3)
            assert float(cumulant(family, eta, order)) == pytest.approx(float(fd), rel=1e-7, abs=1e-10)

    def test_logistic_large_eta_finite(self):
        assert np.isfinite(cumulant("logistic", 800.0))

    def test_unknown(self):
        with pytest.raises(InvalidArgumentError):
            cumulant("gamma", 1.0)


class TestDerivatives:
    @pytest.mark.parametrize("family,dispersion,use_extra", [
        ("linear", "fixed", False), ("linear", "constant", False), ("linear", "loglinear", False),
        ("linear", "constant", True), ("logistic", "fixed", False), ("poisson", "fixed", True),
    ])
    def test_against_finite_differences(self, family, dispersion, use_extra):
        truth = _truth(family, n=50)
        data = truth.sample(50, np.random.default_rng(4))
        a = GlmAssumed(family, use_extra=use_extra, dispersion=dispersion, fixed_dispersion=1.3)
        theta = np.array([0.4, 0.2] + ([0.1] if use_extra else [])
                         + {"fixed": [], "constant": [1.7], "loglinear": [0.2, -0.3]}[dispersion])
        _, g, h = a.derivs(theta[0], theta[1:], data)
        for j in range(theta.size):
            def at(t, j=j):
                th = theta.copy()
                th[j] = t
                return th
            fd_g = richardson_difference(lambda t: a.derivs(at(t)[0], at(t)[1:], data, 0)[0], theta[j], 1e-4)
            fd_h = richardson_difference(lambda t: a.derivs(at(t)[0], at(t)[1:], data, 1)[1], theta[j], 1e-4)
            np.testing.assert_allclose(g[:, j], fd_g, rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(h[:, :, j], fd_h, rtol=1e-6, atol=1e-9)

    def test_linear_loglik_is_normal_density(self):
        truth = _truth(n=30)
        data = truth.sample(30, np.random.default_rng(2))
        a = GlmAssumed("linear", dispersion="constant")
        ll = a.derivs(0.8, [0.1, 2.0], data, 0)[0]
        eta = data.X @ np.array([0.1, 0.8])
        np.testing.assert_allclose(ll, stats.norm(eta, np.sqrt(2.0)).logpdf(data.y), rtol=1e-12)

    def test_parameter_order(self):
        a = GlmAssumed("linear", use_extra=True, dispersion="loglinear")
        assert a.param_names == ("x1", "x0", "w0", "log_dispersion_0", "log_dispersion_1")


class TestDispersionInvariance:
    @pytest.fixture
    def data(self):
        truth = _truth(dispersion=lambda v: np.exp(0.8 * v))
        return truth.sample(400, np.random.default_rng(7))

    @pytest.mark.parametrize("dispersion", ["fixed", "constant"])
    def test_coefficients_equal_least_squares(self, data, dispersion):
        a = GlmAssumed("linear", dispersion=dispersion, fixed_dispersion=3.7)
        fit = glm_fit(a, data)
        assert fit.converged
        np.testing.assert_allclose(fit.params[:2], least_squares(data, a), rtol=0, atol=1e-10)

    def test_loglinear_is_weighted_least_squares(self, data):
        a = GlmAssumed("linear", dispersion="loglinear")
        fit = glm_fit(a, data)
        Z = a.design(data)
        w = np.exp(-(fit.params[2] + fit.params[3] * data.V))
        wls = np.linalg.solve(Z.T @ (w[:, None] * Z), Z.T @ (w * data.y))
        np.testing.assert_allclose(fit.params[:2], wls, atol=1e-9)
        assert np.max(np.abs(wls - least_squares(data, a))) > 1e-3

    def test_conditions_hold_for_constant_dispersion(self):
        truth = _truth(dispersion=lambda v: np.exp(0.8 * v), intercept=False)
        a = GlmAssumed("linear", dispersion="constant", n_x=1)
        reports = check_all(truth, a, 1.0, [(0.5,), (2.0,)])
        assert all(r.verdict is Verdict.HOLDS for r in reports.values())


class TestOmittedCovariates:
    def test_linear_orthogonal_omission_consistent(self):
        truth = _truth(orthogonal=True, lam=1.5)
        reports = check_all(truth, GlmAssumed("linear"), 1.0, [(0.3,)])
        assert reports[Condition.CONSISTENCY_SCORE].verdict is Verdict.HOLDS

    def test_logistic_omission_fails(self):
        truth = _truth("logistic", rho=0.0, lam=1.5, intercept=False)
        reports = check_all(truth, GlmAssumed("logistic", n_x=1), 1.0)
        assert reports[Condition.CONSISTENCY_SCORE].verdict is Verdict.FAILS
        assert reports[Condition.COXWONG_IDENTITY].verdict is Verdict.FAILS

    def test_poisson_truth_inside_model(self):
        truth = _truth("poisson", lam=0.0)
        reports = check_all(truth, GlmAssumed("poisson", use_extra=True), 1.0, [(0.3, 0.0)])
        assert reports[Condition.CONSISTENCY_SCORE].verdict is Verdict.HOLDS
        assert reports[Condition.COXWONG_IDENTITY].verdict is Verdict.HOLDS


class TestTruth:
    @pytest.mark.parametrize("family", ["linear", "logistic", "poisson"])
    def test_quadrature_units_reproduce_means(self, family):
        truth = _truth(family, n=40)
        units, w = truth.quadrature_units()
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        mean = cumulant(family, truth.eta, 1).mean()
        assert w @ units.y == pytest.approx(mean, rel=1e-10)

    def test_fixed_design_size(self):
        with pytest.raises(InvalidArgumentError):
            _truth(n=40).sample(41, np.random.default_rng(0))

    def test_dispersion_only_linear(self):
        X, W, v = make_design(10, np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            GlmTruth("poisson", X, W, np.zeros(2), np.zeros(1), np.full(10, 2.0))


class TestDesign:
    def test_orthogonal(self):
        X, W, _ = make_design(200, np.random.default_rng(3), orthogonal=True)
        np.testing.assert_allclose(X.T @ W, 0.0, atol=1e-10)

    @given(seed=st.integers(0, 2**31))
    def test_deterministic(self, seed):
        a = make_design(20, np.random.default_rng(seed))
        b = make_design(20, np.random.default_rng(seed))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("kwargs", [dict(n=1), dict(n=10, rho=1.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            make_design(rng=np.random.default_rng(0), **kwargs)


class TestFitErrors:
    def test_separation_detected(self):
        X, W, _ = make_design(100, np.random.default_rng(1))
        y = (X[:, 1] > 0).astype(float)
        with pytest.raises(NumericalFailureError) as err:
            glm_fit(GlmAssumed("logistic"), GlmData(y, X, W))
        assert err.value.diagnostics["separation_margin"] > 0

    def test_overlap_has_zero_margin(self):
        X = np.column_stack([np.ones(4), [0.0, 1.0, 0.0, 1.0]])
        assert separation_margin([0, 0, 1, 1], X) == pytest.approx(0.0, abs=1e-9)

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(10), np.ones(10)])
        with pytest.raises(InvalidArgumentError):
            glm_fit(GlmAssumed("linear"), GlmData(np.arange(10.0), X))

    @pytest.mark.parametrize("family,y", [("logistic", 0.5), ("poisson", -1.0), ("linear", np.nan)])
    def test_bad_outcomes(self, family, y):
        X, W, _ = make_design(10, np.random.default_rng(1))
        ys = np.zeros(10)
        ys[0] = y
        with pytest.raises(InvalidArgumentError):
            glm_fit(GlmAssumed(family), GlmData(ys, X, W))

    @pytest.mark.parametrize("kwargs", [dict(family="probit"), dict(dispersion="quadratic"),
                                        dict(family="logistic", dispersion="constant"),
                                        dict(fixed_dispersion=0.0), dict(interest_column=5)])
    def test_invalid_assumed(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            GlmAssumed(**kwargs)

    def test_logistic_fit_matches_reference_newton(self):
        truth = _truth("logistic", n=300)
        data = truth.sample(300, np.random.default_rng(9))
        fit = glm_fit(GlmAssumed("logistic"), data)
        beta = np.zeros(2)
        for _ in range(30):
            p = special.expit(data.X @ beta)
            beta = beta + np.linalg.solve(data.X.T @ ((p * (1 - p))[:, None] * data.X), data.X.T @ (data.y - p))
        np.testing.assert_allclose(fit.params, beta[::-1], atol=1e-8)
