import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from misfit.errors import InvalidArgumentError
from misfit.families import Exponential, Gamma, Normal, VonMises
from misfit.groups import (LOCATION, RATE, ROTATION2D, SCALE, BaseDensity, Direction, ParametrizationMode,
                           SymmetricPairModel, antisymmetry_conditions, apply, circle_points,
                           exponential_rate_model, exponential_scale_model, halton_points, invert,
                           jacobian_magnitude, normal_location_model, pushforward, score_antisymmetry_residual,
                           symmetry_residual, vonmises_rotation_model)

positive = st.floats(0.05, 20.0)
angles = st.floats(0.0, 2 * np.pi, exclude_max=True)


class TestActions:
    def test_rate_example(self):
        assert float(apply(RATE, 2.0, 3.0)) == 1.5

    @pytest.mark.parametrize("action,psi,x,expected", [
        (LOCATION, 1.5, 2.0, 3.5),
        (SCALE, 2.0, 3.0, 6.0),
        (RATE, 4.0, 2.0, 0.5),
    ])
    def test_apply(self, action, psi, x, expected):
        assert float(apply(action, psi, x)) == pytest.approx(expected, rel=1e-15)

    def test_rotation_quarter_turn(self):
        y = apply(ROTATION2D, np.pi / 2, np.array([1.0, 0.0]))
        np.testing.assert_allclose(y, [0.0, 1.0], atol=1e-15)

    @given(psi=positive, x=positive)
    @pytest.mark.parametrize("action", [LOCATION, SCALE, RATE])
    def test_inverse_round_trip(self, action, psi, x):
        assert float(invert(action, psi, apply(action, psi, x))) == pytest.approx(x, rel=1e-12)

    @given(psi=angles, t=angles)
    def test_rotation_round_trip(self, psi, t):
        x = circle_points(t)
        np.testing.assert_allclose(invert(ROTATION2D, psi, apply(ROTATION2D, psi, x)), x, atol=1e-12)

    @given(psi=positive, x=positive)
    def test_jacobians(self, psi, x):
        assert float(jacobian_magnitude(SCALE, psi, x)) == pytest.approx(psi)
        assert float(jacobian_magnitude(RATE, psi, x)) == pytest.approx(1 / psi)
        assert float(jacobian_magnitude(SCALE, psi, x, Direction.INVERSE)) == pytest.approx(1 / psi)
        assert float(jacobian_magnitude(LOCATION, psi, x)) == 1.0

    @pytest.mark.parametrize("action,psi,x,field", [
        (SCALE, 0.0, 1.0, "psi"),
        (RATE, -1.0, 1.0, "psi"),
        (ROTATION2D, 7.0, np.array([1.0, 0.0]), "psi"),
        (ROTATION2D, 1.0, np.array([2.0, 0.0]), "x"),
        (LOCATION, 1.0, np.nan, "x"),
    ])
    def test_domain_errors(self, action, psi, x, field):
        with pytest.raises(InvalidArgumentError) as info:
            apply(action, psi, x)
        assert info.value.field == field


class TestPushforward:
    @pytest.mark.parametrize("family,action,psi,expected", [
        (Exponential(2.0), SCALE, 4.0, Exponential(0.5)),
        (Exponential(2.0), RATE, 4.0, Exponential(8.0)),
        (Gamma(3.0, 1.0), SCALE, 2.0, Gamma(3.0, 0.5)),
        (Normal(1.0, 2.0), LOCATION, 0.5, Normal(1.5, 2.0)),
        (VonMises(0.2, 1.0), ROTATION2D, 0.3, VonMises(0.5, 1.0)),
    ])
    def test_closed_forms(self, family, action, psi, expected):
        np.testing.assert_allclose(pushforward(family, action, psi).params, expected.params, rtol=1e-15)

    def test_change_of_variables(self):
        # density of g U equals f_U(g^-1 y) |d g^-1 y / dy|
        f = Gamma(2.5, 1.3)
        y = np.linspace(0.1, 5.0, 9)
        pushed = pushforward(f, SCALE, 1.7).log_density(y)
        direct = f.log_density(invert(SCALE, 1.7, y)) + np.log(jacobian_magnitude(SCALE, 1.7, y, Direction.INVERSE))
        np.testing.assert_allclose(pushed, direct, rtol=1e-13)

    def test_unsupported(self):
        with pytest.raises(InvalidArgumentError):
            pushforward(Normal(0.0, 1.0), RATE, 2.0)


PROBES = halton_points(100, [0.2, 0.1, 0.1], [5.0, 4.0, 4.0])


class TestAntisymmetry:
    @pytest.mark.parametrize("model", [
        normal_location_model(), exponential_scale_model(), exponential_rate_model(), vonmises_rotation_model(),
    ], ids=["location", "scale", "rate", "rotation"])
    def test_symmetric_models_vanish(self, model):
        worst = 0.0
        for psi, p1, p0 in PROBES:
            if model.action is ROTATION2D:
                u1, u0 = circle_points([p1, p0])
                psi = psi % (2 * np.pi)
            elif model.action is LOCATION:
                u1, u0 = p1 - 2.0, p0 - 2.0
            else:
                u1, u0 = p1, p0
            a, c = antisymmetry_conditions(model, psi, u1, u0)
            worst = max(worst, np.max(np.abs(a)), abs(c))
        assert worst <= 1e-8

    def test_nonsymmetric_rate_fails(self):
        model = exponential_rate_model(ParametrizationMode.NONSYMMETRIC)
        a, _ = antisymmetry_conditions(model, 1.5, 0.7, 1.2)
        assert abs(a) > 1e-3

    def test_perturbed_rotation_fails(self):
        model = vonmises_rotation_model(arm0_power=2.0)
        u1, u0 = circle_points([0.4, 2.0])
        a, _ = antisymmetry_conditions(model, 1.0, u1, u0)
        assert np.max(np.abs(a)) > 1e-3

    @given(psi=st.floats(0.2, 5.0), u1=st.floats(0.05, 6.0), u0=st.floats(0.05, 6.0), gam=st.floats(0.2, 5.0))
    def test_score_antisymmetric_rate(self, psi, u1, u0, gam):
        model = exponential_rate_model()
        assert abs(score_antisymmetry_residual(model, psi, gam, u1, u0)) <= 1e-9 * (1 + u1 + u0) * gam / psi

    def test_analytic_score_matches_fd(self):
        model = exponential_rate_model()
        a = score_antisymmetry_residual(model, 1.3, 0.8, 0.4, 2.2, "analytic")
        b = score_antisymmetry_residual(model, 1.3, 0.8, 0.4, 2.2, "fd")
        assert abs(a - b) < 1e-8

    @given(psi=st.floats(0.2, 4.0), gam=st.floats(0.2, 4.0), y1=st.floats(0.05, 5.0), y0=st.floats(0.05, 5.0))
    def test_symmetry_residual_rate(self, psi, gam, y1, y0):
        assert float(symmetry_residual(exponential_rate_model(), psi, gam, y1, y0)) <= 1e-12 * (1 + gam**2 * psi**2)

    def test_bad_step(self):
        with pytest.raises(InvalidArgumentError):
            antisymmetry_conditions(exponential_rate_model(), 1.0, 1.0, 1.0, fd_step=0.0)


class TestProbes:
    def test_halton_deterministic_and_in_box(self):
        a = halton_points(50, [0, -1], [1, 1])
        np.testing.assert_array_equal(a, halton_points(50, [0, -1], [1, 1]))
        assert np.all((a >= [0, -1]) & (a <= [1, 1]))

    def test_base_density_slot(self):
        base = BaseDensity("normal", "mean", (("var", 2.0),))
        assert base(1.5) == Normal(1.5, 2.0)

    def test_model_arm_laws(self):
        model = SymmetricPairModel(BaseDensity("exponential", "rate"), RATE)
        f1, f0 = model.arm_families(2.0, 3.0)
        assert f1.rate == pytest.approx(6.0) and f0.rate == pytest.approx(1.5)
