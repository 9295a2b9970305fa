import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from misfit.errors import InvalidArgumentError, NumericalFailureError
from misfit.families import DiscreteAtoms, Gamma, LogNormal, Normal, point_mass
from misfit.inference import (InfoPair, SolverOptions, expected_moments, fit_mle, g_vector, info_matrices,
                              neyman_score, probability_limit, ratio_baseline_fit, sandwich_cov)
from misfit.mixture import AssumedModel, ExpPairs, NormalPairs, PairData, TrueModel


def _spd(seed, p):
    a = np.random.default_rng(seed).normal(size=(p, p))
    return a @ a.T + p * np.eye(p)


class TestNormalPairsIdentity:
    TRUTH = TrueModel(NormalPairs(), 0.7, DiscreteAtoms((0.5, 1.0, 2.5), (0.3, 0.4, 0.3)))

    @pytest.mark.parametrize("family", [Normal(0.0, 1.0), point_mass(1.0), Gamma(1.0, 1.0), LogNormal(0.0, 1.0)],
                             ids=lambda f: f.kind)
    def test_estimate_is_half_mean_difference(self, family, rng):
        d = self.TRUTH.sample(300, rng)
        fit = fit_mle(AssumedModel(NormalPairs(), family), d)
        assert fit.converged
        assert fit.psi_hat == pytest.approx(np.mean(d.y1 - d.y0) / 2, abs=1e-10)

    @given(y=arrays(float, (12, 2), elements=st.floats(-5, 5)))
    def test_identity_any_data(self, y):
        d = PairData.build(y[:, 0], y[:, 1])
        fit = fit_mle(AssumedModel(NormalPairs(), Normal(0.0, 1.0)), d)
        assert fit.psi_hat == pytest.approx((y[:, 0].sum() - y[:, 1].sum()) / 24, abs=1e-10)


class TestFit:
    def test_exp_gamma_stationary_and_sandwich(self, rng):
        d = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0)).sample(800, rng)
        model = AssumedModel(ExpPairs(), Gamma(1.0, 1.0))
        fit = fit_mle(model, d)
        assert fit.converged and fit.gradient_norm <= 1e-8
        _, g, h = model.derivs(fit.psi_hat, fit.lambda_hat, d)
        np.testing.assert_allclose(g.sum(0), 0.0, atol=1e-6)
        a = -h.sum(0)
        a_inv = np.linalg.inv(a)
        np.testing.assert_allclose(fit.sandwich_cov, a_inv @ (g.T @ g) @ a_inv, rtol=1e-6)
        assert fit.param_names == ("psi", "shape", "rate")

    def test_quadrature_backed_fit_agrees_with_closed_form(self, rng):
        d = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0)).sample(200, rng)
        exact = fit_mle(AssumedModel(ExpPairs(), Gamma(1.0, 1.0)), d)
        quad = fit_mle(AssumedModel(ExpPairs(), Gamma(1.0, 1.0), force_quadrature=True), d)
        np.testing.assert_allclose(quad.params, exact.params, rtol=1e-6)

    def test_atoms_family_fit(self, rng):
        d = TrueModel(ExpPairs(), 1.5, DiscreteAtoms((0.5, 3.0), (0.5, 0.5))).sample(500, rng)
        fit = fit_mle(AssumedModel(ExpPairs(), DiscreteAtoms((0.8, 2.0), (0.5, 0.5))), d)
        assert fit.converged
        assert abs(fit.psi_hat - 1.5) < 4 * fit.sandwich_se

    def test_empty_data(self):
        with pytest.raises(InvalidArgumentError):
            fit_mle(AssumedModel(ExpPairs(), Gamma(1.0, 1.0)), PairData.build([], []))

    def test_iteration_cap_reports_not_converged(self, rng):
        d = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0)).sample(100, rng)
        fit = fit_mle(AssumedModel(ExpPairs(), Gamma(1.0, 1.0)), d, opts=SolverOptions(max_iter=1))
        assert not fit.converged


class TestSandwich:
    @given(seed=st.integers(0, 10_000), p=st.integers(1, 4), n=st.integers(1, 10_000))
    def test_reduces_to_inverse_information(self, seed, p, n):
        i = _spd(seed, p)
        cov = sandwich_cov(InfoPair(i, i), n)
        np.testing.assert_allclose(cov, np.linalg.inv(i) / n, rtol=1e-10, atol=1e-14)

    @given(seed=st.integers(0, 10_000), p=st.integers(1, 4))
    def test_symmetric_psd(self, seed, p):
        cov = sandwich_cov(InfoPair(_spd(seed, p), _spd(seed + 1, p)), 10)
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_singular(self):
        i = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(NumericalFailureError) as info:
            sandwich_cov(InfoPair(i, i), 10)
        assert "smallest_eigenvalue" in info.value.diagnostics

    def test_bad_n(self):
        with pytest.raises(InvalidArgumentError):
            sandwich_cov(InfoPair(np.eye(2), np.eye(2)), 0)

    @given(seed=st.integers(0, 10_000))
    def test_schur_complement(self, seed):
        info = InfoPair(_spd(seed, 3), np.eye(3))
        assert info.i_psipsi_dot_lam == pytest.approx(1.0 / info.i_up_psipsi, rel=1e-10)


class TestNeymanScore:
    @given(seed=st.integers(0, 10_000))
    def test_orthogonal_to_nuisance_scores(self, seed):
        # with i the covariance of the scores, the adjusted score is uncorrelated with them
        i = _spd(seed, 3)
        z = np.random.default_rng(seed).multivariate_normal(np.zeros(3), i, size=5)
        s = neyman_score(InfoPair(i, i), z[:, 0], z[:, 1:])
        w = np.linalg.solve(i[1:, 1:], i[1:, 0])
        np.testing.assert_allclose(s, z[:, 0] - z[:, 1:] @ w)
        cov = np.array([1.0, *(-w)]) @ i[:, 1:]
        np.testing.assert_allclose(cov, 0.0, atol=1e-10)

    def test_singular_nuisance_block(self):
        i = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
        with pytest.raises(NumericalFailureError):
            neyman_score(InfoPair(i, i), 1.0, np.ones(2))


class TestLimits:
    def test_symmetric_limit_is_true_value(self):
        truth = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0))
        lim = probability_limit(truth, AssumedModel(ExpPairs(), Gamma(1.0, 1.0)), [1.2, 1.0, 1.0])
        assert lim[0] == pytest.approx(1.5, abs=1e-8)

    def test_fixed_rate_nonsymmetric_limit_is_biased(self):
        truth = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0))
        assumed = AssumedModel(ExpPairs(False), Gamma(1.0, 1.0), fixed=("rate",))
        lim = probability_limit(truth, assumed, [2.0, 1.0])
        assert abs(lim[0] - 2.25) > 0.05

    def test_expected_score_vanishes_at_limit_with_matching_information(self):
        truth = TrueModel(ExpPairs(), 1.5, Gamma(2.0, 3.0))
        assumed = AssumedModel(ExpPairs(), Gamma(1.0, 1.0))
        # truth inside the assumed family: the score has mean zero and i = q
        g_psi, g_lam = g_vector(truth, assumed, 1.5, [2.0, 3.0])
        assert abs(g_psi) < 1e-10 and np.max(np.abs(g_lam)) < 1e-10
        info = info_matrices(truth, assumed, 1.5, [2.0, 3.0])
        np.testing.assert_allclose(info.i, info.q, atol=1e-9)
        np.testing.assert_allclose(info.i, info.i_check, atol=1e-9)
        assert info.q_i_product() == pytest.approx(1.0, abs=1e-8)

    def test_moments_shapes(self):
        truth = TrueModel(ExpPairs(), 1.5, point_mass(1.0))
        g, i, q, ge, ie, qe = expected_moments(truth, AssumedModel(ExpPairs(), Gamma(1.0, 1.0)), 1.5, [1.0, 1.0])
        assert g.shape == (3,) and i.shape == q.shape == ie.shape == (3, 3)


class TestRatioBaseline:
    @given(z=st.floats(0.01, 100.0))
    def test_single_pair_closed_form(self, z):
        fit = ratio_baseline_fit(PairData.build([z], [1.0]))
        assert fit.psi_hat == pytest.approx(z**-0.5, rel=1e-8)

    def test_consistent(self, rng):
        d = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0)).sample(4000, rng)
        fit = ratio_baseline_fit(d)
        assert fit.converged and abs(fit.psi_hat - 1.5) < 4 * fit.sandwich_se

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidArgumentError):
            ratio_baseline_fit(PairData.build([1.0, 0.0], [1.0, 1.0]))
