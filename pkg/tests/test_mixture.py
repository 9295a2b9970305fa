import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from misfit.errors import InvalidArgumentError, NumericalFailureError
from misfit.families import DiscreteAtoms, Gamma, GammaMeanShape, LogNormal, Normal, point_mass
from misfit.mixture import (AssumedModel, ClosedForm, ExpPairs, MonteCarlo, NormalPairs, PairData, PoissonPairs,
                            TrueModel, expect_under_true, exponential_gamma_information, pair_loglik,
                            pair_loglik_grad)

EXP_DATA = PairData.build([0.5, 2.0, 0.1], [1.0, 0.3, 3.0], [1, 2, 1], [3, 1, 1])
POIS_DATA = PairData.build([0, 5, 2, 11], [3, 1, 2, 0], [1, 2, 1, 3], [3, 1, 1, 1])
NORM_DATA = PairData.build([0.5, 2.0, -0.4], [-1.0, 0.3, 0.2], [1, 2, 1], [3, 1, 1])


def _fd_hessian(model, psi, lam, d, h=1e-5):
    theta = np.concatenate([[psi], lam])
    cols = []
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = h * max(1.0, abs(theta[j]))
        up = model.derivs((theta + e)[0], (theta + e)[1:], d, 1)[1]
        dn = model.derivs((theta - e)[0], (theta - e)[1:], d, 1)[1]
        cols.append((up - dn) / (2 * e[j]))
    return np.stack(cols, -1)


def _fd_gradient(model, psi, lam, d, h=1e-5):
    theta = np.concatenate([[psi], lam])
    cols = []
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = h * max(1.0, abs(theta[j]))
        up = model.derivs((theta + e)[0], (theta + e)[1:], d, 0)[0]
        dn = model.derivs((theta - e)[0], (theta - e)[1:], d, 0)[0]
        cols.append((up - dn) / (2 * e[j]))
    return np.stack(cols, -1)


CASES = [
    pytest.param(AssumedModel(ExpPairs(), Gamma(1.5, 2.0)), 1.7, [1.5, 2.0], EXP_DATA, id="exp-gamma"),
    pytest.param(AssumedModel(ExpPairs(False), Gamma(1.5, 2.0)), 1.7, [1.5, 2.0], EXP_DATA, id="exp-gamma-nonsym"),
    pytest.param(AssumedModel(PoissonPairs(), GammaMeanShape(1.2, 2.0)), 0.3, [1.2, 2.0], POIS_DATA,
                 id="poisson-gamma"),
    pytest.param(AssumedModel(NormalPairs(), Normal(0.3, 1.5)), 0.4, [0.3, 1.5], NORM_DATA, id="normal-normal"),
]


class TestMarginals:
    @pytest.mark.parametrize("model,psi,lam,data", CASES)
    def test_closed_form_vs_quadrature(self, model, psi, lam, data):
        assert model.closed_form is not ClosedForm.NONE
        quad = AssumedModel(model.cond, model.family, force_quadrature=True)
        lam = np.array(lam)
        exact, quadr = model.derivs(psi, lam, data), quad.derivs(psi, lam, data)
        for a, b in zip(exact, quadr):
            np.testing.assert_allclose(b, a, rtol=1e-8, atol=1e-10)

    @pytest.mark.parametrize("model,psi,lam,data", CASES + [
        pytest.param(AssumedModel(ExpPairs(), LogNormal(0.2, 0.8)), 1.3, [0.2, 0.8], EXP_DATA, id="exp-lognormal"),
        pytest.param(AssumedModel(ExpPairs(), DiscreteAtoms((0.5, 2.0), (0.4, 0.6))), 1.3, [0.5, 2.0], EXP_DATA,
                     id="exp-atoms"),
        pytest.param(AssumedModel(NormalPairs(), Gamma(2.0, 1.0)), 0.4, [2.0, 1.0], NORM_DATA, id="normal-gamma"),
    ])
    def test_analytic_vs_finite_difference(self, model, psi, lam, data):
        lam = np.array(lam, dtype=float)
        _, g, h = model.derivs(psi, lam, data)
        np.testing.assert_allclose(g, _fd_gradient(model, psi, lam, data), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(h, _fd_hessian(model, psi, lam, data), rtol=1e-6, atol=1e-8)

    def test_exp_gamma_against_direct_integral(self):
        model = AssumedModel(ExpPairs(), Gamma(1.5, 2.0))
        y1, y0, psi = 0.7, 1.9, 1.3

        def integrand(g):
            return (g * psi * np.exp(-g * psi * y1) * g / psi * np.exp(-g * y0 / psi)
                    * stats.gamma(1.5, scale=0.5).pdf(g))

        direct, _ = integrate.quad(integrand, 0, np.inf, epsabs=1e-14, epsrel=1e-12)
        assert float(pair_loglik(model, psi, [1.5, 2.0], y1, y0)) == pytest.approx(np.log(direct), rel=1e-10)

    def test_poisson_gamma_against_series(self):
        model = AssumedModel(PoissonPairs(), GammaMeanShape(0.8, 2.5))
        th, s1, s0, r1, r0 = 0.4, 3.0, 5.0, 2.0, 1.0
        g, w = Gamma(2.5, 0.8 * 2.5).expectation_rule(200)
        direct = w @ (stats.poisson(r1 * g * np.exp(th)).pmf(s1) * stats.poisson(r0 * g * np.exp(-th)).pmf(s0))
        got = float(pair_loglik(model, th, [0.8, 2.5], s1, s0, r1, r0))
        assert got == pytest.approx(np.log(direct), rel=1e-10)

    def test_normal_normal_is_bivariate_normal(self):
        model = AssumedModel(NormalPairs(), Normal(0.3, 1.5))
        psi, y1, y0, r1, r0 = 0.4, 0.9, -0.2, 2.0, 1.0
        cov = np.array([[1.5 + 1 / r1, 1.5], [1.5, 1.5 + 1 / r0]])
        ref = stats.multivariate_normal([0.3 + psi, 0.3 - psi], cov).logpdf([y1, y0])
        assert float(pair_loglik(model, psi, [0.3, 1.5], y1, y0, r1, r0)) == pytest.approx(ref, rel=1e-12)

    def test_point_mass_assumed_is_conditional(self):
        model = AssumedModel(ExpPairs(), point_mass(1.7))
        got = model.loglik(1.2, [1.7], EXP_DATA)
        ref = ExpPairs().loglik(1.2, 1.7, EXP_DATA)
        np.testing.assert_allclose(got, ref, rtol=1e-13)

    def test_chunked_quadrature_matches_unchunked(self, rng):
        from misfit import mixture

        truth = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0))
        d = truth.sample(mixture._CHUNK + 7, rng)
        model = AssumedModel(ExpPairs(), LogNormal(0.1, 0.9))
        whole = model.derivs(1.4, [0.1, 0.9], d)
        head = model.derivs(1.4, [0.1, 0.9], d.take(slice(0, 10)))
        for a, b in zip(whole, head):
            np.testing.assert_allclose(a[:10], b, rtol=1e-12)

    def test_heavy_tail_fallback_matches_direct_integral(self):
        # small gamma shape with negative normal outcomes leaves an exponential
        # tail on the log scale that the Hermite rule cannot settle
        psi, shape, rate = 0.48, 0.34, 0.39
        d = PairData.build([-2.66, -3.23, 0.4], [-3.16, -2.43, 1.1])
        model = AssumedModel(NormalPairs(), Gamma(shape, rate), force_quadrature=True)
        got = model.derivs(psi, [shape, rate], d, 0)[0]
        for k in range(3):
            y1, y0 = d.y1[k], d.y0[k]

            def integrand(z):
                g = np.exp(z)
                return g * stats.norm.pdf(y1 - g - psi) * stats.norm.pdf(y0 - g + psi) * stats.gamma.pdf(
                    g, shape, scale=1 / rate)

            ref, _ = integrate.quad(integrand, -300, 10, epsabs=0, epsrel=1e-13, limit=1000)
            assert abs(got[k] - np.log(ref)) < 1e-8

    def test_heavy_tail_fallback_derivatives(self):
        d = PairData.build([-2.66, -3.23], [-3.16, -2.43])
        model = AssumedModel(NormalPairs(), Gamma(0.34, 0.39), force_quadrature=True)
        lam = np.array([0.34, 0.39])
        _, g, _ = model.derivs(0.48, lam, d)
        np.testing.assert_allclose(g, _fd_gradient(model, 0.48, lam, d), rtol=1e-6, atol=1e-8)

    def test_gradient_helper(self):
        model = AssumedModel(ExpPairs(), Gamma(1.0, 1.0))
        g = pair_loglik_grad(model, 1.1, [1.0, 1.0], 0.4, 0.9)
        assert g.shape == (3,)

    def test_fixed_parameters_drop_columns(self):
        full = AssumedModel(ExpPairs(False), Gamma(1.5, 2.0))
        fixed = AssumedModel(ExpPairs(False), Gamma(1.5, 2.0), fixed=("rate",))
        assert fixed.param_names == ("theta", "shape")
        _, g, h = fixed.derivs(1.7, [1.5], EXP_DATA)
        _, gf, hf = full.derivs(1.7, [1.5, 2.0], EXP_DATA)
        np.testing.assert_allclose(g, gf[:, :2])
        np.testing.assert_allclose(h, hf[:, :2, :2])

    @pytest.mark.parametrize("kwargs,field", [
        (dict(cond=ExpPairs(), family=Normal(0.0, 1.0)), "assumed_mixing"),
        (dict(cond=ExpPairs(), family=Gamma(1.0, 1.0), fixed=("scale",)), "fixed"),
    ])
    def test_invalid_assumed(self, kwargs, field):
        with pytest.raises(InvalidArgumentError) as info:
            AssumedModel(**kwargs)
        assert info.value.field == field


class TestExpectations:
    ATOMS = DiscreteAtoms((0.5, 1.0, 2.5), (0.3, 0.4, 0.3))

    def test_atoms_exact_sums(self):
        # E y1, E y0 and E log y1 are finite sums over the atoms
        psi, r1, r0 = 1.5, 2.0, 1.0
        truth = TrueModel(ExpPairs(), psi, self.ATOMS, ((r1, r0),))
        val, _ = expect_under_true(lambda u: np.column_stack([u.y1, u.y0, np.log(u.y1)]), truth)
        g, w = np.array(self.ATOMS.points), np.array(self.ATOMS.weights)
        exact = [w @ (1 / (r1 * g * psi)), w @ (psi / (r0 * g)), w @ (-np.euler_gamma - np.log(r1 * g * psi))]
        np.testing.assert_allclose(val, exact, rtol=1e-9)

    def test_atoms_exact_sums_poisson(self):
        th = 0.5
        truth = TrueModel(PoissonPairs(), th, self.ATOMS, ((1.0, 2.0), (3.0, 1.0)))
        val, _ = expect_under_true(lambda u: np.column_stack([u.y1, u.y0, u.y1 * u.y0]), truth)
        g, w = np.array(self.ATOMS.points), np.array(self.ATOMS.weights)
        m1 = [w @ (r1 * g * np.exp(th)) for r1 in (1.0, 3.0)]
        m0 = [w @ (r0 * g * np.exp(-th)) for r0 in (2.0, 1.0)]
        cross = [w @ (r1 * r0 * g * g) for r1, r0 in ((1.0, 2.0), (3.0, 1.0))]
        np.testing.assert_allclose(val, [np.mean(m1), np.mean(m0), np.mean(cross)], rtol=1e-9)

    def test_normal_atoms(self):
        truth = TrueModel(NormalPairs(), 0.7, DiscreteAtoms((-1.0, 2.0), (0.25, 0.75)))
        val, _ = expect_under_true(lambda u: np.column_stack([u.y1, u.y0 ** 2]), truth)
        m = 0.25 * -1.0 + 0.75 * 2.0
        second = 0.25 * ((-1.7) ** 2 + 1) + 0.75 * (1.3**2 + 1)
        np.testing.assert_allclose(val, [m + 0.7, second], rtol=1e-12)

    @pytest.mark.parametrize("truth", [
        TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0)),
        TrueModel(ExpPairs(), 1.5, Gamma(2.0, 3.0), ((1.0, 2.0), (3.0, 1.0))),
        TrueModel(PoissonPairs(), 0.5, LogNormal(0.0, 0.5), ((1.0, 2.0),)),
        TrueModel(NormalPairs(), 0.5, Normal(0.0, 2.0)),
    ], ids=["exp-lognormal", "exp-gamma-counts", "poisson-lognormal", "normal-normal"])
    def test_quadrature_vs_monte_carlo(self, truth):
        if isinstance(truth.cond, PoissonPairs):
            assumed = AssumedModel(truth.cond, GammaMeanShape(1.0, 1.0))
        elif truth.cond.gamma_support == "positive":
            assumed = AssumedModel(truth.cond, Gamma(1.0, 1.0))
        else:
            assumed = AssumedModel(truth.cond, Normal(0.0, 1.0))
        lam = np.array([2.0, 0.5]) if truth.cond.gamma_support == "positive" else np.array([0.2, 1.5])
        f = lambda u: assumed.derivs(truth.psi_star, lam, u, 1)[1]
        q, qe = expect_under_true(f, truth)
        m, me = expect_under_true(f, truth, MonteCarlo(200000, 11))
        assert np.all(np.abs(q - m) <= 3 * np.sqrt(qe**2 + me**2))

    def test_quadrature_reports_tiny_error(self):
        truth = TrueModel(ExpPairs(), 1.5, LogNormal(0.0, 1.0))
        val, err = expect_under_true(lambda u: np.ones(len(u)), truth)
        assert val == pytest.approx(1.0, abs=1e-14) and err < 1e-12

    def test_non_finite_is_numerical_failure(self):
        truth = TrueModel(ExpPairs(), 1.5, point_mass(1.0))
        with pytest.raises(NumericalFailureError):
            expect_under_true(lambda u: np.full(len(u), np.nan), truth)

    def test_unknown_method(self):
        truth = TrueModel(ExpPairs(), 1.5, point_mass(1.0))
        with pytest.raises(InvalidArgumentError):
            expect_under_true(lambda u: u.y1, truth, "simpson")

    @given(seed=st.integers(0, 2**32 - 1))
    def test_sampling_reproducible(self, seed):
        truth = TrueModel(PoissonPairs(), 0.5, LogNormal(0.0, 0.5), ((1.0, 2.0), (3.0, 1.0)))
        a = truth.sample(20, np.random.default_rng(seed))
        b = truth.sample(20, np.random.default_rng(seed))
        np.testing.assert_array_equal(a.y1, b.y1)
        np.testing.assert_array_equal(a.r1, np.tile([1.0, 3.0], 10))


class TestOwnInformation:
    @pytest.mark.parametrize("symmetric,psi,shape,rate", [(True, 1.5, 1.0, 1.0), (False, 2.25, 2.0, 0.5),
                                                         (True, 0.7, 5.0, 3.0)])
    def test_closed_form_matches_quadrature(self, symmetric, psi, shape, rate):
        from misfit.inference import expected_moments

        model = AssumedModel(ExpPairs(symmetric), Gamma(shape, rate))
        law = model.own_law(psi, [shape, rate])
        _, i, *_ = expected_moments(law, model, psi, [shape, rate])
        np.testing.assert_allclose(i, exponential_gamma_information(symmetric, psi, shape, rate),
                                   rtol=1e-8, atol=1e-10)

    def test_symmetric_interest_orthogonal(self):
        i = exponential_gamma_information(True, 1.3, 2.0, 0.7)
        assert i[0, 1] == 0.0 and i[0, 2] == 0.0


class TestPairData:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            PairData.build([1.0, 2.0], [1.0])
        with pytest.raises(InvalidArgumentError):
            PairData.build([1.0], [1.0], r1=0.5)

    @pytest.mark.parametrize("cond,y1,y0", [(ExpPairs(), [-1.0], [1.0]), (PoissonPairs(), [1.5], [1.0]),
                                            (NormalPairs(), [np.inf], [0.0])])
    def test_model_data_checks(self, cond, y1, y0):
        with pytest.raises(InvalidArgumentError):
            cond.check_data(PairData.build(y1, y0))

    def test_take(self):
        d = EXP_DATA.take([2, 0])
        np.testing.assert_array_equal(d.y1, [0.1, 0.5])
        assert len(d) == 2
