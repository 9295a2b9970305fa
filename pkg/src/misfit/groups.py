"""One-parameter transformation groups and symmetric pair parametrizations.

A group element ``g_psi`` acts on points: addition (location), multiplication
(scale), division (rate) or counter-clockwise rotation of unit 2-vectors.
A :class:`SymmetricPairModel` generates the treated and untreated arm
densities as push-forwards of a common base density, with the treated
standardized variable ``u1 = g^{-1} y1`` and the untreated one
``u0 = g^k y0`` where ``k = 1`` for the symmetric parametrization.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import InvalidArgumentError
from .families import DensityFamily, make_family
from .quadrature import central_difference, richardson_difference

TWO_PI = 2.0 * np.pi


class GroupKind(enum.Enum):
    LOCATION = "location"
    SCALE = "scale"
    RATE = "rate"
    ROTATION2D = "rotation2d"


class Direction(enum.Enum):
    FORWARD = "forward"
    INVERSE = "inverse"


class ParametrizationMode(enum.Enum):
    SYMMETRIC = "symmetric"
    NONSYMMETRIC = "nonsymmetric"


@dataclass(frozen=True)
class GroupAction:
    """A one-parameter group acting on points."""

    kind: GroupKind

    @property
    def is_rotation(self) -> bool:
        return self.kind is GroupKind.ROTATION2D


LOCATION = GroupAction(GroupKind.LOCATION)
SCALE = GroupAction(GroupKind.SCALE)
RATE = GroupAction(GroupKind.RATE)
ROTATION2D = GroupAction(GroupKind.ROTATION2D)


def _rotate(t: float, x: np.ndarray) -> np.ndarray:
    c, s = np.cos(t), np.sin(t)
    out = np.stack([c * x[..., 0] - s * x[..., 1], s * x[..., 0] + c * x[..., 1]], axis=-1)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _act(kind: GroupKind, psi: float, x, power: float = 1.0):
    """``g_psi**power x`` without domain checks (power may be negative)."""
    if kind is GroupKind.LOCATION:
        return x + power * psi
    if kind is GroupKind.SCALE:
        return x * psi**power
    if kind is GroupKind.RATE:
        return x / psi**power
    return _rotate(power * psi, x)


def _log_jac(kind: GroupKind, psi: float, power: float = 1.0) -> float:
    """log |d(g_psi**power x)/dx|, which never depends on x for these groups."""
    if kind is GroupKind.SCALE:
        return power * np.log(psi)
    if kind is GroupKind.RATE:
        return -power * np.log(psi)
    return 0.0


def _check(action: GroupAction, psi, x):
    if not isinstance(action, GroupAction):
        raise InvalidArgumentError("action", f"expected GroupAction, got {type(action).__name__}")
    psi = float(psi)
    if not np.isfinite(psi):
        raise InvalidArgumentError("psi", "must be finite")
    kind = action.kind
    x = np.asarray(x, dtype=float)
    if kind in (GroupKind.SCALE, GroupKind.RATE):
        if psi <= 0:
            raise InvalidArgumentError("psi", f"{kind.value} action requires psi > 0, got {psi}")
        if kind is GroupKind.RATE and np.any(x <= 0):
            raise InvalidArgumentError("x", "rate action acts on positive points")
    elif kind is GroupKind.ROTATION2D:
        if not 0.0 <= psi < TWO_PI:
            raise InvalidArgumentError("psi", f"rotation angle must lie in [0, 2pi), got {psi}")
        if x.shape[-1:] != (2,):
            raise InvalidArgumentError("x", "rotation acts on 2-vectors")
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > 1e-9):
            raise InvalidArgumentError("x", "point is not on the unit circle")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("x", "must be finite")
    return psi, x


def apply(action: GroupAction, psi: float, x):
    """Return ``g_psi x``.

    Example:
        >>> float(apply(RATE, 2.0, 3.0))
        1.5
    """
    psi, x = _check(action, psi, x)
    return _act(action.kind, psi, x)


def invert(action: GroupAction, psi: float, x):
    """Return ``g_psi^{-1} x``."""
    psi, x = _check(action, psi, x)
    return _act(action.kind, psi, x, -1.0)


def jacobian_magnitude(action: GroupAction, psi: float, x, direction: Direction = Direction.FORWARD):
    """Absolute Jacobian of ``x -> g_psi x`` (or its inverse) at ``x``.

    For the rotation this is the determinant magnitude of the 2-D map, which
    is 1.
    """
    psi, x = _check(action, psi, x)
    power = 1.0 if direction is Direction.FORWARD else -1.0
    shape = x.shape[:-1] if action.is_rotation else x.shape
    return np.full(shape, np.exp(_log_jac(action.kind, psi, power)))


def pushforward(family: DensityFamily, action: GroupAction, psi: float, power: float = 1.0) -> DensityFamily:
    """Law of ``g_psi**power U`` when U has law ``family``.

    Supported pairs are the ones closed under the action: normal under
    location, exponential/gamma/lognormal under scale and rate, von Mises
    under rotation.
    """
    kind, name = action.kind, family.kind
    if power == 0:
        return family
    if kind is GroupKind.LOCATION and name == "normal":
        return family.with_params([family.params[0] + power * psi, family.params[1]])
    if kind in (GroupKind.SCALE, GroupKind.RATE):
        factor = psi**power if kind is GroupKind.SCALE else psi ** (-power)
        if name == "exponential":
            return family.with_params([family.rate / factor])
        if name == "gamma":
            return family.with_params([family.shape, family.rate / factor])
        if name == "lognormal":
            return family.with_params([family.log_mean + np.log(factor), family.log_sd])
    if kind is GroupKind.ROTATION2D and name == "vonmises":
        return family.with_params([family.mean_angle + power * psi, family.concentration])
    raise InvalidArgumentError("base_density", f"{name} is not closed under the {kind.value} action")


@dataclass(frozen=True)
class BaseDensity:
    """Maps the nuisance value gamma to the base law ``f_U(.; gamma)``.

    Args:
        kind: family kind understood by :func:`misfit.families.make_family`.
        slot: name of the parameter that gamma fills.
        fixed: remaining parameters as ``(name, value)`` pairs.
    """

    kind: str
    slot: str
    fixed: tuple = ()

    def __call__(self, gamma: float) -> DensityFamily:
        params = dict(self.fixed)
        params[self.slot] = gamma
        return make_family(self.kind, params)


def _velocity_inverse(kind: GroupKind, psi: float, u):
    """d/dpsi of ``g_psi^{-1} y`` at fixed y, written in terms of ``u = g_psi^{-1} y``.

    Rotation velocities are angular.
    """
    if kind is GroupKind.LOCATION:
        return -np.ones_like(u)
    if kind is GroupKind.SCALE:
        return -u / psi
    if kind is GroupKind.RATE:
        return u / psi
    return -np.ones(np.shape(u)[:-1])


def _velocity_power(kind: GroupKind, psi: float, k: float, u):
    """d/dpsi of ``g_psi^k y`` at fixed y, in terms of ``u = g_psi^k y``."""
    if kind is GroupKind.LOCATION:
        return k * np.ones_like(u)
    if kind is GroupKind.SCALE:
        return k * u / psi
    if kind is GroupKind.RATE:
        return -k * u / psi
    return k * np.ones(np.shape(u)[:-1])


def _dlogjac(kind: GroupKind, psi: float, power: float) -> float:
    if kind is GroupKind.SCALE:
        return power / psi
    if kind is GroupKind.RATE:
        return -power / psi
    return 0.0


@dataclass(frozen=True)
class SymmetricPairModel:
    """Treated/untreated pair densities generated from a base law and a group.

    The treated arm is ``Y1 = g_psi U1`` and the untreated arm
    ``Y0 = g_psi^{-k} U0`` with ``U1, U0`` independent draws from
    ``base(gamma)``. In symmetric mode ``k = arm0_power`` (default 1); in
    non-symmetric mode ``k = 0`` so the whole effect sits on the treated arm.
    Setting ``arm0_power`` to other values builds deliberately broken
    pairings for negative controls.
    """

    base: BaseDensity
    action: GroupAction
    mode: ParametrizationMode = ParametrizationMode.SYMMETRIC
    arm0_power: float = 1.0

    @property
    def k(self) -> float:
        return 0.0 if self.mode is ParametrizationMode.NONSYMMETRIC else float(self.arm0_power)

    def arm_families(self, psi: float, gamma: float):
        """Laws of (Y1, Y0) at (psi, gamma)."""
        fu = self.base(gamma)
        return pushforward(fu, self.action, psi, 1.0), pushforward(fu, self.action, psi, -self.k)

    def observations(self, psi: float, u1, u0):
        """Observations (y1, y0) whose standardized values are (u1, u0)."""
        kind = self.action.kind
        return _act(kind, psi, np.asarray(u1, float)), _act(kind, psi, np.asarray(u0, float), -self.k)

    def loglik(self, psi: float, gamma: float, y1, y0):
        """Conditional log-likelihood ``log f1(y1) + log f0(y0)``."""
        f1, f0 = self.arm_families(psi, gamma)
        return f1.log_density(y1) + f0.log_density(y0)


def _unit_domain(model: SymmetricPairModel, psi: float):
    if model.action.kind in (GroupKind.SCALE, GroupKind.RATE) and psi <= 0:
        raise InvalidArgumentError("psi", "must be > 0")
    if not np.isfinite(psi):
        raise InvalidArgumentError("psi", "must be finite")


def symmetry_residual(model: SymmetricPairModel, psi: float, gamma: float, y1, y0):
    """Gap between the pair density and its symmetric factorization.

    Compares ``f1(y1) f0(y0)`` computed from the model's arm laws with
    ``f_U(u1) f_U(u0) J1 J0`` where ``u1 = g^{-1} y1``, ``u0 = g y0`` and the
    J are the Jacobians of these two maps.
    """
    action = model.action
    psi, y1 = _check(action, psi, y1)
    _, y0 = _check(action, psi, y0)
    f1, f0 = model.arm_families(psi, gamma)
    joint = np.exp(f1.log_density(y1) + f0.log_density(y0))
    fu = model.base(gamma)
    u1 = _act(action.kind, psi, y1, -1.0)
    u0 = _act(action.kind, psi, y0, 1.0)
    logj = _log_jac(action.kind, psi, -1.0) + _log_jac(action.kind, psi, 1.0)
    sym = np.exp(fu.log_density(u1) + fu.log_density(u0) + logj)
    return np.abs(joint - sym)


def _a_c(model: SymmetricPairModel, psi: float, u1, u0, h: float, richardson: bool):
    kind, k = model.action.kind, model.k
    y1, y0 = model.observations(psi, u1, u0)
    diff = richardson_difference if richardson else central_difference
    du1 = diff(lambda p: _act(kind, p, y1, -1.0), psi, h)
    du0 = diff(lambda p: _act(kind, p, y0, k), psi, h)
    j1 = lambda p: np.exp(_log_jac(kind, p, -1.0))
    j0 = lambda p: np.exp(_log_jac(kind, p, k))
    c = diff(j1, psi, h) * j0(psi) + diff(j0, psi, h) * j1(psi)
    return du1 + du0, float(c)


def antisymmetry_conditions(model: SymmetricPairModel, psi: float, u1, u0, fd_step: float = 1e-6):
    """Sums ``a(u1,u0) + a(u0,u1)`` and ``c(u1,u0) + c(u0,u1)``.

    ``a`` is the sum of the psi-velocities of the two standardizing maps at
    fixed observations, ``c`` the psi-derivative of the Jacobian product.
    Both sums vanish exactly when the pair score is antisymmetric.
    Derivatives are central differences; if the largest residual lands in
    the ambiguous band (1e-8, 1e-5) they are recomputed with Richardson
    extrapolation.

    Returns:
        ``(a_resid, c_resid)``; ``a_resid`` is a 2-vector for rotations.
    """
    fd_step = float(fd_step)
    if not fd_step > 0:
        raise InvalidArgumentError("fd_step", f"must be > 0, got {fd_step}")
    _unit_domain(model, psi)
    u1 = np.asarray(u1, dtype=float)
    u0 = np.asarray(u0, dtype=float)

    def sums(richardson):
        a10, c10 = _a_c(model, psi, u1, u0, fd_step, richardson)
        a01, c01 = _a_c(model, psi, u0, u1, fd_step, richardson)
        return a10 + a01, c10 + c01

    a, c = sums(False)
    worst = max(np.max(np.abs(a)), abs(c))
    if 1e-8 < worst < 1e-5:
        a, c = sums(True)
    return (a if np.ndim(a) else float(a)), c


def individual_a_c(model: SymmetricPairModel, psi: float, u1, u0, fd_step: float = 1e-6):
    """The unsymmetrized ``(a(u1,u0), c(u1,u0))`` for inspection."""
    a, c = _a_c(model, psi, np.asarray(u1, float), np.asarray(u0, float), fd_step, True)
    return (a if np.ndim(a) else float(a)), c


def pair_score(model: SymmetricPairModel, psi: float, gamma: float, u1, u0, method: str = "analytic"):
    """psi-derivative of the conditional pair log-likelihood at the observations of (u1, u0)."""
    kind, k = model.action.kind, model.k
    u1 = np.asarray(u1, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    fu = model.base(gamma)
    if method == "analytic" and hasattr(fu, "point_gradient"):
        v1 = _velocity_inverse(kind, psi, u1)
        v0 = _velocity_power(kind, psi, k, u0)
        s = fu.point_gradient(u1) * v1 + fu.point_gradient(u0) * v0
        return s + _dlogjac(kind, psi, -1.0) + _dlogjac(kind, psi, k)
    y1, y0 = model.observations(psi, u1, u0)
    return richardson_difference(lambda p: model.loglik(p, gamma, y1, y0), psi, 1e-4)


def score_antisymmetry_residual(model: SymmetricPairModel, psi: float, gamma: float, u1, u0,
                                method: str = "analytic"):
    """``score(u1, u0) + score(u0, u1)``, zero when the score is antisymmetric.

    Args:
        method: "analytic" uses the base density's point gradient and the
            action velocities; "fd" differentiates the pair log-likelihood by
            Richardson-extrapolated central differences.
    """
    _unit_domain(model, psi)
    if method not in ("analytic", "fd"):
        raise InvalidArgumentError("method", f"unknown method {method!r}")
    return pair_score(model, psi, gamma, u1, u0, method) + pair_score(model, psi, gamma, u0, u1, method)


def halton_points(n: int, lower, upper) -> np.ndarray:
    """Deterministic low-discrepancy points in a box (Halton, unscrambled, origin skipped)."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if n < 1:
        raise InvalidArgumentError("n", "need at least one probe")
    raw = qmc.Halton(d=lower.size, scramble=False).random(n + 1)[1:]
    return lower + raw * (upper - lower)


def circle_points(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


# Ready-made models used throughout the package.
def exponential_rate_model(mode: ParametrizationMode = ParametrizationMode.SYMMETRIC) -> SymmetricPairModel:
    """Exponential pairs with rates (gamma psi, gamma/psi), or (gamma theta, gamma) when non-symmetric."""
    return SymmetricPairModel(BaseDensity("exponential", "rate"), RATE, mode)


def exponential_scale_model(mode: ParametrizationMode = ParametrizationMode.SYMMETRIC) -> SymmetricPairModel:
    return SymmetricPairModel(BaseDensity("exponential", "rate"), SCALE, mode)


def normal_location_model(variance: float = 1.0) -> SymmetricPairModel:
    """Normal pairs with means gamma + psi and gamma - psi."""
    return SymmetricPairModel(BaseDensity("normal", "mean", (("var", variance),)), LOCATION)


def vonmises_rotation_model(concentration: float = 2.0, arm0_power: float = 1.0) -> SymmetricPairModel:
    """Von Mises pairs rotated by +psi and -psi (or -arm0_power psi)."""
    return SymmetricPairModel(BaseDensity("vonmises", "mean_angle", (("concentration", concentration),)),
                              ROTATION2D, ParametrizationMode.SYMMETRIC, arm0_power)
