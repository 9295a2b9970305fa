"""Parametric density and mass families.

Every family is an immutable dataclass whose fields are its parameters, in the
order used for score vectors and Hessians. All evaluation methods are
vectorized over the observation argument: for an input of shape ``S`` the
log-density has shape ``S``, the score ``S + (p,)`` and the Hessian
``S + (p, p)`` where ``p`` is the number of parameters.

Example:
    >>> Exponential(rate=2.0).log_density(1.0)
    -1.3068528194400546
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import ClassVar

import numpy as np
from scipy import special, stats

from .errors import InvalidArgumentError
from .quadrature import gamma_rule, log_gamma_rule, standard_normal_rule

_LOG_2PI = np.log(2.0 * np.pi)


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise InvalidArgumentError(name, f"must be finite and > 0, got {value}")
    return value


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise InvalidArgumentError(name, f"must be finite, got {value}")
    return value


def _stack(parts, y):
    """Broadcast scalar/array parts against ``y`` and stack on a new last axis."""
    shape = np.shape(y)
    return np.stack([np.broadcast_to(np.asarray(p, dtype=float), shape) for p in parts], axis=-1)


def _stack2(rows, y):
    return np.stack([_stack(r, y) for r in rows], axis=-2)


class DensityFamily:
    """Common interface; concrete families are frozen dataclasses."""

    def outer_rule(self, coarse: bool = False):
        """Quadrature rule used when this family is the true mixing law.

        Returns nodes and probability weights; ``coarse`` selects the
        cheaper companion rule used for error estimates.
        """
        return self.expectation_rule(28 if coarse else 40)

    kind: ClassVar[str] = ""
    support: ClassVar[str] = "real"
    # Per-parameter flag: True when the parameter must be positive, which the
    # optimizers handle on the log scale.
    positive: ClassVar[tuple[bool, ...]] = ()

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in fields(self))

    @property
    def params(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.param_names], dtype=float)

    def with_params(self, values) -> "DensityFamily":
        """Return a copy with the parameter vector replaced."""
        values = np.asarray(values, dtype=float).ravel()
        names = self.param_names
        if values.size != len(names):
            raise InvalidArgumentError("params", f"expected {len(names)} values, got {values.size}")
        return replace(self, **dict(zip(names, values.tolist())))

    def density(self, y):
        return np.exp(self.log_density(y))

    def fisher_information(self, n: int = 64) -> np.ndarray:
        """Expected negative Hessian under the family's own law."""
        nodes, weights = self.expectation_rule(n)
        _, hess = self.score_and_hessian(nodes)
        return -np.tensordot(weights, hess, axes=(0, 0))


@dataclass(frozen=True)
class Exponential(DensityFamily):
    """Exponential law with density ``rate * exp(-rate * y)`` on y > 0."""

    rate: float
    kind: ClassVar[str] = "exponential"
    support: ClassVar[str] = "positive"
    positive: ClassVar[tuple[bool, ...]] = (True,)

    def __post_init__(self):
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y > 0, np.log(self.rate) - self.rate * y, -np.inf)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        return _stack([1.0 / self.rate - y], y), _stack2([[-1.0 / self.rate**2]], y)

    def point_gradient(self, y):
        return np.full(np.shape(y), -self.rate)

    def point_hessian(self, y):
        return np.zeros(np.shape(y))

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def mean(self):
        return 1.0 / self.rate

    def variance(self):
        return 1.0 / self.rate**2

    def expectation_rule(self, n: int = 32):
        return gamma_rule(n, 1.0, self.rate)

    def outer_rule(self, coarse: bool = False):
        e, w = log_gamma_rule(1.0, coarse)
        return e / self.rate, w


@dataclass(frozen=True)
class Normal(DensityFamily):
    """Normal law parametrized by mean and variance."""

    mean_: float
    var: float
    kind: ClassVar[str] = "normal"
    support: ClassVar[str] = "real"
    positive: ClassVar[tuple[bool, ...]] = (False, True)

    def __post_init__(self):
        object.__setattr__(self, "mean_", _finite("mean", self.mean_))
        object.__setattr__(self, "var", _positive("var", self.var))

    @property
    def param_names(self):
        return ("mean", "var")

    @property
    def params(self):
        return np.array([self.mean_, self.var])

    def with_params(self, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size != 2:
            raise InvalidArgumentError("params", f"expected 2 values, got {values.size}")
        return Normal(values[0], values[1])

    def log_density(self, y):
        e = np.asarray(y, dtype=float) - self.mean_
        return -0.5 * (_LOG_2PI + np.log(self.var)) - 0.5 * e * e / self.var

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        e, v = y - self.mean_, self.var
        grad = _stack([e / v, -0.5 / v + 0.5 * e * e / v**2], y)
        hess = _stack2([[-1.0 / v, -e / v**2], [-e / v**2, 0.5 / v**2 - e * e / v**3]], y)
        return grad, hess

    def point_gradient(self, y):
        return -(np.asarray(y, dtype=float) - self.mean_) / self.var

    def point_hessian(self, y):
        return np.full(np.shape(y), -1.0 / self.var)

    def sample(self, rng, size=None):
        return rng.normal(self.mean_, np.sqrt(self.var), size)

    def mean(self):
        return self.mean_

    def variance(self):
        return self.var

    def expectation_rule(self, n: int = 32):
        x, w = standard_normal_rule(n)
        return self.mean_ + np.sqrt(self.var) * x, w


@dataclass(frozen=True)
class Gamma(DensityFamily):
    """Gamma law with density ``rate**shape y**(shape-1) exp(-rate y) / Gamma(shape)``."""

    shape: float
    rate: float
    kind: ClassVar[str] = "gamma"
    support: ClassVar[str] = "positive"
    positive: ClassVar[tuple[bool, ...]] = (True, True)

    def __post_init__(self):
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        k, r = self.shape, self.rate
        with np.errstate(divide="ignore", invalid="ignore"):
            out = k * np.log(r) + (k - 1.0) * np.log(y) - r * y - special.gammaln(k)
        return np.where(y > 0, out, -np.inf)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        k, r = self.shape, self.rate
        grad = _stack([np.log(r) + np.log(y) - special.digamma(k), k / r - y], y)
        hess = _stack2([[-special.polygamma(1, k), 1.0 / r], [1.0 / r, -k / r**2]], y)
        return grad, hess

    def point_gradient(self, y):
        y = np.asarray(y, dtype=float)
        return (self.shape - 1.0) / y - self.rate

    def point_hessian(self, y):
        y = np.asarray(y, dtype=float)
        return -(self.shape - 1.0) / (y * y)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def mean(self):
        return self.shape / self.rate

    def variance(self):
        return self.shape / self.rate**2

    def expectation_rule(self, n: int = 32):
        return gamma_rule(n, self.shape, self.rate)

    def outer_rule(self, coarse: bool = False):
        e, w = log_gamma_rule(self.shape, coarse)
        return e / self.rate, w


@dataclass(frozen=True)
class GammaMeanShape(DensityFamily):
    """Gamma law indexed by inverse mean and shape.

    The rate is ``inv_mean * shape`` so the mean is ``1 / inv_mean`` whatever
    the shape. This indexing makes the shape orthogonal to the mean in
    Poisson-gamma stratum models.
    """

    inv_mean: float
    shape: float
    kind: ClassVar[str] = "gamma_mean_shape"
    support: ClassVar[str] = "positive"
    positive: ClassVar[tuple[bool, ...]] = (True, True)

    def __post_init__(self):
        object.__setattr__(self, "inv_mean", _positive("inv_mean", self.inv_mean))
        object.__setattr__(self, "shape", _positive("shape", self.shape))

    @property
    def rate(self):
        return self.inv_mean * self.shape

    def log_density(self, y):
        return Gamma(self.shape, self.rate).log_density(y)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        nu, w = self.inv_mean, self.shape
        grad = _stack([w / nu - w * y, np.log(nu * w) + 1.0 + np.log(y) - nu * y - special.digamma(w)], y)
        hess = _stack2([[-w / nu**2, 1.0 / nu - y], [1.0 / nu - y, 1.0 / w - special.polygamma(1, w)]], y)
        return grad, hess

    def point_gradient(self, y):
        return Gamma(self.shape, self.rate).point_gradient(y)

    def point_hessian(self, y):
        return Gamma(self.shape, self.rate).point_hessian(y)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def mean(self):
        return 1.0 / self.inv_mean

    def variance(self):
        return self.shape / self.rate**2

    def expectation_rule(self, n: int = 32):
        return gamma_rule(n, self.shape, self.rate)

    def outer_rule(self, coarse: bool = False):
        e, w = log_gamma_rule(self.shape, coarse)
        return e / self.rate, w


@dataclass(frozen=True)
class LogNormal(DensityFamily):
    """Law of ``exp(Z)`` with Z ~ N(log_mean, log_sd**2)."""

    log_mean: float
    log_sd: float
    kind: ClassVar[str] = "lognormal"
    support: ClassVar[str] = "positive"
    positive: ClassVar[tuple[bool, ...]] = (False, True)

    def __post_init__(self):
        object.__setattr__(self, "log_mean", _finite("log_mean", self.log_mean))
        object.__setattr__(self, "log_sd", _positive("log_sd", self.log_sd))

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ly = np.log(y)
            z = (ly - self.log_mean) / self.log_sd
            out = -ly - np.log(self.log_sd) - 0.5 * _LOG_2PI - 0.5 * z * z
        return np.where(y > 0, out, -np.inf)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        s = self.log_sd
        z = (np.log(y) - self.log_mean) / s
        grad = _stack([z / s, (z * z - 1.0) / s], y)
        hess = _stack2([[-1.0 / s**2, -2.0 * z / s**2], [-2.0 * z / s**2, (1.0 - 3.0 * z * z) / s**2]], y)
        return grad, hess

    def point_gradient(self, y):
        y = np.asarray(y, dtype=float)
        z = (np.log(y) - self.log_mean) / self.log_sd
        return -(1.0 + z / self.log_sd) / y

    def point_hessian(self, y):
        y = np.asarray(y, dtype=float)
        z = (np.log(y) - self.log_mean) / self.log_sd
        return (1.0 + z / self.log_sd - 1.0 / self.log_sd**2) / (y * y)

    def sample(self, rng, size=None):
        return rng.lognormal(self.log_mean, self.log_sd, size)

    def mean(self):
        return float(np.exp(self.log_mean + 0.5 * self.log_sd**2))

    def variance(self):
        s2 = self.log_sd**2
        return float((np.exp(s2) - 1.0) * np.exp(2.0 * self.log_mean + s2))

    def expectation_rule(self, n: int = 32):
        x, w = standard_normal_rule(n)
        return np.exp(self.log_mean + self.log_sd * x), w


def _count_support(dist, tail: float = 1e-13):
    hi = int(dist.isf(tail)) + 1
    k = np.arange(hi + 1, dtype=float)
    return k, dist.pmf(k)


@dataclass(frozen=True)
class Poisson(DensityFamily):
    """Poisson law with the given mean."""

    mean_: float
    kind: ClassVar[str] = "poisson"
    support: ClassVar[str] = "count"
    positive: ClassVar[tuple[bool, ...]] = (True,)

    def __post_init__(self):
        object.__setattr__(self, "mean_", _positive("mean", self.mean_))

    @property
    def param_names(self):
        return ("mean",)

    @property
    def params(self):
        return np.array([self.mean_])

    def with_params(self, values):
        return Poisson(float(np.asarray(values, dtype=float).ravel()[0]))

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        ok = (y >= 0) & (y == np.floor(y))
        ys = np.where(ok, y, 0.0)
        out = ys * np.log(self.mean_) - self.mean_ - special.gammaln(ys + 1.0)
        return np.where(ok, out, -np.inf)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        m = self.mean_
        return _stack([y / m - 1.0], y), _stack2([[-y / m**2]], y)

    def sample(self, rng, size=None):
        return rng.poisson(self.mean_, size)

    def mean(self):
        return self.mean_

    def variance(self):
        return self.mean_

    def expectation_rule(self, n: int = 0):
        return _count_support(stats.poisson(self.mean_))


@dataclass(frozen=True)
class NegativeBinomialMarginal(DensityFamily):
    """Negative binomial mass ``Gamma(y+size)/(Gamma(size) y!) prob**size (1-prob)**y``.

    This is the marginal law of a Poisson count whose mean is gamma
    distributed with shape ``size`` and rate ``prob / (1 - prob)``.
    """

    size: float
    prob: float
    kind: ClassVar[str] = "negative_binomial"
    support: ClassVar[str] = "count"
    positive: ClassVar[tuple[bool, ...]] = (True, True)

    def __post_init__(self):
        object.__setattr__(self, "size", _positive("size", self.size))
        p = float(self.prob)
        if not 0.0 < p < 1.0:
            raise InvalidArgumentError("prob", f"must lie in (0, 1), got {p}")
        object.__setattr__(self, "prob", p)

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        ok = (y >= 0) & (y == np.floor(y))
        ys = np.where(ok, y, 0.0)
        r, p = self.size, self.prob
        out = (special.gammaln(ys + r) - special.gammaln(r) - special.gammaln(ys + 1.0)
               + r * np.log(p) + ys * np.log1p(-p))
        return np.where(ok, out, -np.inf)

    def score_and_hessian(self, y):
        y = np.asarray(y, dtype=float)
        r, p = self.size, self.prob
        grad = _stack([special.digamma(y + r) - special.digamma(r) + np.log(p), r / p - y / (1.0 - p)], y)
        hess = _stack2([
            [special.polygamma(1, y + r) - special.polygamma(1, r), 1.0 / p],
            [1.0 / p, -r / p**2 - y / (1.0 - p) ** 2],
        ], y)
        return grad, hess

    def sample(self, rng, size=None):
        return rng.negative_binomial(self.size, self.prob, size)

    def mean(self):
        return self.size * (1.0 - self.prob) / self.prob

    def variance(self):
        return self.size * (1.0 - self.prob) / self.prob**2

    def expectation_rule(self, n: int = 0):
        return _count_support(stats.nbinom(self.size, self.prob))


@dataclass(frozen=True)
class DiscreteAtoms(DensityFamily):
    """Finitely supported law on at most 16 points.

    The parameter vector is the weight vector; the points are held fixed.
    Mass functions are compared to points with a relative tolerance of 1e-12.
    """

    points: tuple[float, ...]
    weights: tuple[float, ...]
    kind: ClassVar[str] = "discrete"
    support: ClassVar[str] = "atoms"
    max_atoms: ClassVar[int] = 16

    def __post_init__(self):
        pts = tuple(float(p) for p in np.atleast_1d(self.points))
        wts = tuple(float(w) for w in np.atleast_1d(self.weights))
        if not 1 <= len(pts) <= self.max_atoms:
            raise InvalidArgumentError("points", f"need 1 to {self.max_atoms} atoms, got {len(pts)}")
        if len(wts) != len(pts):
            raise InvalidArgumentError("weights", "must have one weight per point")
        if not all(np.isfinite(pts)):
            raise InvalidArgumentError("points", "must be finite")
        if any(w <= 0 for w in wts) or abs(sum(wts) - 1.0) > 1e-12:
            raise InvalidArgumentError("weights", "must be positive and sum to 1")
        if len(set(pts)) != len(pts):
            raise InvalidArgumentError("points", "must be distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def positive(self):
        return (True,) * len(self.weights)

    @property
    def param_names(self):
        return tuple(f"weight_{k + 1}" for k in range(len(self.weights)))

    @property
    def params(self):
        return np.array(self.weights)

    def with_params(self, values):
        return DiscreteAtoms(self.points, tuple(np.asarray(values, dtype=float).ravel()))

    def _match(self, y):
        y = np.asarray(y, dtype=float)
        pts = np.array(self.points)
        hit = np.abs(y[..., None] - pts) <= 1e-12 * np.maximum(1.0, np.abs(pts))
        return hit

    def log_density(self, y):
        hit = self._match(y)
        logw = np.log(np.array(self.weights))
        vals = np.where(hit, logw, -np.inf)
        return vals.max(axis=-1)

    def score_and_hessian(self, y):
        hit = self._match(y).astype(float)
        w = np.array(self.weights)
        grad = hit / w
        hess = -(hit / w**2)[..., None] * np.eye(len(w))
        return grad, hess

    def sample(self, rng, size=None):
        idx = rng.choice(len(self.points), size=size, p=np.array(self.weights))
        return np.array(self.points)[idx]

    def mean(self):
        return float(np.dot(self.points, self.weights))

    def variance(self):
        p, w = np.array(self.points), np.array(self.weights)
        return float(np.dot(w, (p - np.dot(w, p)) ** 2))

    def expectation_rule(self, n: int = 0):
        return np.array(self.points), np.array(self.weights)


def point_mass(value: float) -> DiscreteAtoms:
    """Degenerate law at ``value``."""
    return DiscreteAtoms((float(value),), (1.0,))


@dataclass(frozen=True)
class VonMises(DensityFamily):
    """Von Mises law on the unit circle, density with respect to arc length.

    Points are unit 2-vectors ``(cos t, sin t)``; the density is
    ``exp(concentration * cos(t - mean_angle)) / (2 pi I0(concentration))``.
    """

    mean_angle: float
    concentration: float
    kind: ClassVar[str] = "vonmises"
    support: ClassVar[str] = "circle"
    positive: ClassVar[tuple[bool, ...]] = (False, True)

    def __post_init__(self):
        object.__setattr__(self, "mean_angle", _finite("mean_angle", self.mean_angle))
        object.__setattr__(self, "concentration", _positive("concentration", self.concentration))

    @staticmethod
    def angle(y):
        y = np.asarray(y, dtype=float)
        return np.arctan2(y[..., 1], y[..., 0])

    def _lognorm(self):
        k = self.concentration
        return _LOG_2PI + np.log(special.ive(0, k)) + k

    def log_density(self, y):
        t = self.angle(y)
        return self.concentration * np.cos(t - self.mean_angle) - self._lognorm()

    def score_and_hessian(self, y):
        t = self.angle(y) - self.mean_angle
        k = self.concentration
        a = special.ive(1, k) / special.ive(0, k)
        da = 1.0 - a / k - a * a
        grad = _stack([k * np.sin(t), np.cos(t) - a], t)
        hess = _stack2([[-k * np.cos(t), np.sin(t)], [np.sin(t), -da]], t)
        return grad, hess

    def point_gradient(self, y):
        """Derivative of the log-density with respect to the angle."""
        return -self.concentration * np.sin(self.angle(y) - self.mean_angle)

    def sample(self, rng, size=None):
        t = rng.vonmises(self.mean_angle, self.concentration, size)
        return np.stack([np.cos(t), np.sin(t)], axis=-1)

    def expectation_rule(self, n: int = 64):
        t = 2.0 * np.pi * np.arange(n) / n
        y = np.stack([np.cos(t), np.sin(t)], axis=-1)
        w = np.exp(self.log_density(y)) * (2.0 * np.pi / n)
        return y, w / w.sum()


FAMILIES: dict[str, type] = {
    cls.kind: cls
    for cls in (Exponential, Normal, Gamma, GammaMeanShape, LogNormal, Poisson,
                NegativeBinomialMarginal, DiscreteAtoms, VonMises)
}


def make_family(kind: str, params: dict) -> DensityFamily:
    """Construct a family from its kind string and a name-to-value mapping.

    Raises:
        InvalidArgumentError: unknown kind or missing/extra parameters.
    """
    if kind == "point_mass":
        if set(params) != {"value"}:
            raise InvalidArgumentError("params", "point_mass takes exactly 'value'")
        return point_mass(params["value"])
    if kind not in FAMILIES:
        raise InvalidArgumentError("kind", f"unknown family {kind!r}")
    cls = FAMILIES[kind]
    if cls is DiscreteAtoms:
        if set(params) != {"points", "weights"}:
            raise InvalidArgumentError("params", "discrete takes 'points' and 'weights'")
        return DiscreteAtoms(tuple(params["points"]), tuple(params["weights"]))
    names = [f.name for f in fields(cls)]
    public = {"mean_": "mean"}
    expected = [public.get(n, n) for n in names]
    if set(params) != set(expected):
        raise InvalidArgumentError("params", f"{kind} takes {expected}, got {sorted(params)}")
    return cls(*[params[e] for e in expected])


def family_params(family: DensityFamily) -> dict:
    """Inverse of :func:`make_family`: the public parameter mapping."""
    if isinstance(family, DiscreteAtoms):
        return {"points": family.points, "weights": family.weights}
    return dict(zip(family.param_names, family.params.tolist()))
