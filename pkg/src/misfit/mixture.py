"""Marginal pair/stratum likelihoods for random-effects models.

A stratum contributes two observations ``y1`` (treated) and ``y0``
(untreated) that share a nuisance value gamma. Given gamma the arms follow a
conditional model (:class:`ExpPairs`, :class:`NormalPairs`,
:class:`PoissonPairs`); gamma itself is drawn from a mixing law. The assumed
model integrates gamma out against a parametric family indexed by lambda;
the true model integrates against an arbitrary law, possibly a finite set of
atoms.

Replication counts ``r1, r0`` enter as rate multipliers: an exponential arm
with count r is the minimum of r exponentials, a Poisson arm the total of r
counts and a normal arm the mean of r unit-variance observations.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import InvalidArgumentError, NumericalFailureError
from .families import DensityFamily, DiscreteAtoms, Gamma, GammaMeanShape, LogNormal, Normal
from .groups import ParametrizationMode, exponential_rate_model, normal_location_model
from .quadrature import hermite_log_rule, log_gamma_rule, standard_normal_rule

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PairData:
    """Observations of n strata with replication counts (all arrays of length n)."""

    y1: np.ndarray
    y0: np.ndarray
    r1: np.ndarray
    r0: np.ndarray

    @classmethod
    def build(cls, y1, y0, r1=1.0, r0=1.0) -> "PairData":
        y1 = np.atleast_1d(np.asarray(y1, dtype=float))
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        if y1.shape != y0.shape or y1.ndim != 1:
            raise InvalidArgumentError("data", "y1 and y0 must be 1-d arrays of equal length")
        r1 = np.broadcast_to(np.asarray(r1, dtype=float), y1.shape).copy()
        r0 = np.broadcast_to(np.asarray(r0, dtype=float), y1.shape).copy()
        if np.any(r1 < 1) or np.any(r0 < 1):
            raise InvalidArgumentError("stratum_counts", "replication counts must be >= 1")
        return cls(y1, y0, r1, r0)

    def __len__(self) -> int:
        return self.y1.shape[0]

    def take(self, idx) -> "PairData":
        return PairData(self.y1[idx], self.y0[idx], self.r1[idx], self.r0[idx])

    def column(self, name: str):
        return getattr(self, name)


class ConditionalModel:
    """Conditional law of (Y1, Y0) given gamma; concrete classes below.

    ``terms`` returns the conditional log-density ``c`` and its derivatives
    ``(c, c_p, c_pp, c_g, c_gg, c_pg)`` in the interest parameter p and gamma,
    broadcasting gamma against the data arrays.
    """

    interest_name = "psi"
    interest_positive = True
    gamma_support = "positive"

    def loglik(self, p, g, d: PairData):
        return self.terms(p, g, d, order=0)[0]


@dataclass(frozen=True)
class ExpPairs(ConditionalModel):
    """Exponential arms with rates ``(r1 gamma psi, r0 gamma / psi)``.

    With ``symmetric=False`` the rates are ``(r1 gamma theta, r0 gamma)``.
    """

    symmetric: bool = True
    gamma_support = "positive"
    interest_positive = True

    @property
    def interest_name(self):
        return "psi" if self.symmetric else "theta"

    @property
    def pair_model(self):
        mode = ParametrizationMode.SYMMETRIC if self.symmetric else ParametrizationMode.NONSYMMETRIC
        return exponential_rate_model(mode)

    def check_data(self, d: PairData):
        if np.any(d.y1 <= 0) or np.any(d.y0 <= 0):
            raise InvalidArgumentError("data", "exponential observations must be > 0")

    def terms(self, p, g, d: PairData, order: int = 2):
        y1, y0, r1, r0 = d.y1, d.y0, d.r1, d.r0
        if self.symmetric:
            x1, x0 = r1 * y1, r0 * y0
            a = x1 * p + x0 / p
            c = np.log(r1 * r0) + 2.0 * np.log(g) - g * a
            if order == 0:
                return (c,)
            a_p = x1 - x0 / p**2
            a_pp = 2.0 * x0 / p**3
            c_p, c_pp, c_pg = -g * a_p, -g * a_pp, -a_p
        else:
            a = r1 * y1 * p + r0 * y0
            c = np.log(r1 * r0 * p) + 2.0 * np.log(g) - g * a
            if order == 0:
                return (c,)
            c_p = 1.0 / p - g * r1 * y1
            c_pp = -1.0 / p**2 + 0.0 * g
            c_pg = -r1 * y1 + 0.0 * g
        c_g = 2.0 / g - a
        c_gg = -2.0 / g**2 + 0.0 * a
        return c, c_p, c_pp, c_g, c_gg, c_pg

    def sample(self, p, g, r1, r0, rng):
        if self.symmetric:
            rate1, rate0 = r1 * g * p, r0 * g / p
        else:
            rate1, rate0 = r1 * g * p, r0 * g
        return rng.exponential(1.0 / rate1), rng.exponential(1.0 / rate0)

    def inner_rule(self, p, g, r1, r0, coarse: bool = False):
        """Conditional quadrature: list over gamma nodes of (y1, y0, weights)."""
        e, w = log_gamma_rule(1.0, coarse)
        w2 = np.outer(w, w).ravel()
        e1 = np.repeat(e, e.size)
        e0 = np.tile(e, e.size)
        # corners where both arms sit deep in the left tail carry no mass
        keep = w2 > 1e-15 * w2.max()
        e1, e0, w2 = e1[keep], e0[keep], w2[keep] / w2[keep].sum()
        g = np.asarray(g, dtype=float)[:, None]
        rate1 = r1 * g * p
        rate0 = r0 * g / p if self.symmetric else r0 * g
        return e1 / rate1, e0 / rate0, np.broadcast_to(w2, (g.shape[0], w2.size))

    def init_interest(self, d: PairData) -> float:
        ratio = np.median((d.r1 * d.y1) / (d.r0 * d.y0))
        return float(1.0 / np.sqrt(ratio)) if self.symmetric else float(1.0 / ratio)

    def gamma_log_moments(self, p, d: PairData):
        """Moments of log gamma implied by the pair totals (for initial values)."""
        if self.symmetric:
            a = d.r1 * d.y1 * p + d.r0 * d.y0 / p
        else:
            a = d.r1 * d.y1 * p + d.r0 * d.y0
        la = -np.log(a) + special.digamma(2.0)
        return float(np.mean(la)), float(np.var(la) - special.polygamma(1, 2.0))


@dataclass(frozen=True)
class NormalPairs(ConditionalModel):
    """Normal arms with means ``gamma + psi`` and ``gamma - psi`` and variances ``1/r``."""

    gamma_support = "real"
    interest_positive = False
    interest_name = "psi"

    @property
    def pair_model(self):
        return normal_location_model(1.0)

    def check_data(self, d: PairData):
        if not (np.all(np.isfinite(d.y1)) and np.all(np.isfinite(d.y0))):
            raise InvalidArgumentError("data", "observations must be finite")

    def terms(self, p, g, d: PairData, order: int = 2):
        r1, r0 = d.r1, d.r0
        e1 = d.y1 - g - p
        e0 = d.y0 - g + p
        c = -_LOG_2PI + 0.5 * np.log(r1 * r0) - 0.5 * (r1 * e1 * e1 + r0 * e0 * e0)
        if order == 0:
            return (c,)
        zero = 0.0 * c
        c_p = r1 * e1 - r0 * e0
        c_g = r1 * e1 + r0 * e0
        c_pp = -(r1 + r0) + zero
        c_gg = -(r1 + r0) + zero
        c_pg = -r1 + r0 + zero
        return c, c_p, c_pp, c_g, c_gg, c_pg

    def sample(self, p, g, r1, r0, rng):
        return rng.normal(g + p, 1.0 / np.sqrt(r1)), rng.normal(g - p, 1.0 / np.sqrt(r0))

    def inner_rule(self, p, g, r1, r0, coarse: bool = False):
        z, w = standard_normal_rule(16 if coarse else 24)
        w2 = np.outer(w, w).ravel()
        z1 = np.repeat(z, z.size)
        z0 = np.tile(z, z.size)
        g = np.asarray(g, dtype=float)[:, None]
        return g + p + z1 / np.sqrt(r1), g - p + z0 / np.sqrt(r0), np.broadcast_to(w2, (g.shape[0], w2.size))

    def init_interest(self, d: PairData) -> float:
        return float(np.mean(d.y1 - d.y0) / 2.0)

    def gamma_moments(self, p, d: PairData):
        m = 0.5 * (d.y1 - p + d.y0 + p)
        noise = np.mean(0.25 * (1.0 / d.r1 + 1.0 / d.r0))
        return float(np.mean(m)), float(np.var(m) - noise)


@dataclass(frozen=True)
class PoissonPairs(ConditionalModel):
    """Poisson arms with means ``r1 gamma exp(theta)`` and ``r0 gamma exp(-theta)``."""

    gamma_support = "positive"
    interest_positive = False
    interest_name = "theta"
    pair_model = None

    def check_data(self, d: PairData):
        for name in ("y1", "y0"):
            y = getattr(d, name)
            if np.any(y < 0) or np.any(y != np.floor(y)):
                raise InvalidArgumentError("data", f"{name} must hold nonnegative integer counts")

    def terms(self, p, g, d: PairData, order: int = 2):
        s1, s0, r1, r0 = d.y1, d.y0, d.r1, d.r0
        e_p, e_m = np.exp(p), np.exp(-p)
        rt = r1 * e_p + r0 * e_m
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.log(g)
        c = (s1 * (np.log(r1) + p) + s0 * (np.log(r0) - p) + (s1 + s0) * lg - g * rt
             - special.gammaln(s1 + 1.0) - special.gammaln(s0 + 1.0))
        if order == 0:
            return (c,)
        rd = r1 * e_p - r0 * e_m
        zero = 0.0 * c
        c_p = s1 - s0 - g * rd
        c_pp = -g * rt
        c_g = (s1 + s0) / g - rt
        c_gg = -(s1 + s0) / g**2 + zero
        c_pg = -rd + zero
        return c, c_p, c_pp, c_g, c_gg, c_pg

    def sample(self, p, g, r1, r0, rng):
        return (rng.poisson(r1 * g * np.exp(p)).astype(float),
                rng.poisson(r0 * g * np.exp(-p)).astype(float))

    def mixture_rule(self, p, g, wg, r1, r0, coarse: bool = False):
        """Exact count series for one (r1, r0) pattern, mixed over gamma nodes.

        Given gamma the total ``S = s1 + s0`` is Poisson with mean
        ``gamma * (r1 e^p + r0 e^-p)`` and ``s1 | S`` is binomial with a
        success probability free of gamma, so the mixture is aggregated over
        S before the binomial split. Each series is truncated where its
        neglected mass falls below ``tail``.

        Returns:
            ``(s1, s0, weights)`` with weights summing to one.
        """
        from scipy import stats

        tail = 1e-9 if coarse else 1e-13
        rt = r1 * np.exp(p) + r0 * np.exp(-p)
        prob = r1 * np.exp(p) / rt
        means = np.asarray(g, dtype=float) * rt
        hi = int(np.max(stats.poisson.isf(tail, means))) + 2
        svals = np.arange(hi + 1, dtype=float)
        pmf = np.zeros(hi + 1)
        for m, w in zip(means, wg):
            lo_k, hi_k = int(stats.poisson.ppf(tail, m)), int(stats.poisson.isf(tail, m)) + 2
            k = svals[lo_k:hi_k + 1]
            pmf[lo_k:hi_k + 1] += w * stats.poisson.pmf(k, m)
        keep = pmf > tail * 1e-3 * pmf.max()
        svals, pmf = svals[keep], pmf[keep]
        lo = stats.binom.ppf(tail, svals, prob).astype(int)
        top = np.minimum(stats.binom.isf(tail, svals, prob).astype(int) + 1, svals.astype(int))
        width = top - lo + 1
        ss = np.repeat(svals, width)
        offs = np.arange(width.sum()) - np.repeat(np.cumsum(width) - width, width)
        s1 = np.repeat(lo, width) + offs
        w = np.repeat(pmf, width) * stats.binom.pmf(s1, ss, prob)
        return s1.astype(float), ss - s1, w / w.sum()

    def init_interest(self, d: PairData) -> float:
        rate1 = (d.y1.sum() + 0.5) / d.r1.sum()
        rate0 = (d.y0.sum() + 0.5) / d.r0.sum()
        return float(0.5 * np.log(rate1 / rate0))

    def gamma_moments(self, p, d: PairData):
        rt = d.r1 * np.exp(p) + d.r0 * np.exp(-p)
        gt = (d.y1 + d.y0) / rt
        return float(np.mean(gt)), float(np.var(gt) - np.mean(gt / rt))


class ClosedForm(enum.Enum):
    EXPONENTIAL_GAMMA = "exponential_gamma"
    POISSON_GAMMA = "poisson_gamma"
    NORMAL_NORMAL = "normal_normal"
    NONE = "none"


def _closed_form_for(cond, family) -> ClosedForm:
    if isinstance(cond, ExpPairs) and type(family) is Gamma:
        return ClosedForm.EXPONENTIAL_GAMMA
    if isinstance(cond, PoissonPairs) and type(family) is GammaMeanShape:
        return ClosedForm.POISSON_GAMMA
    if isinstance(cond, NormalPairs) and type(family) is Normal:
        return ClosedForm.NORMAL_NORMAL
    return ClosedForm.NONE


@dataclass(frozen=True)
class TrueModel:
    """Data-generating law: a conditional model at ``psi_star`` mixed over ``mixing``.

    ``design`` lists the (r1, r0) count patterns; strata cycle through them
    and expectations average over them with equal weight.
    """

    cond: ConditionalModel
    psi_star: float
    mixing: DensityFamily
    design: tuple = ((1.0, 1.0),)

    def __post_init__(self):
        if self.cond.interest_positive and not self.psi_star > 0:
            raise InvalidArgumentError("psi_star", "must be > 0 for this model")
        if self.cond.gamma_support == "positive" and self.mixing.support == "real":
            raise InvalidArgumentError("true_mixing", "mixing law must live on the positive half-line")
        if isinstance(self.mixing, DiscreteAtoms) and self.cond.gamma_support == "positive":
            if min(self.mixing.points) <= 0:
                raise InvalidArgumentError("true_mixing", "atoms must be positive")
        object.__setattr__(self, "design", tuple((float(a), float(b)) for a, b in self.design))

    @property
    def exact_outer(self) -> bool:
        return isinstance(self.mixing, DiscreteAtoms)

    def counts(self, n: int):
        pats = np.array(self.design)
        idx = np.arange(n) % len(pats)
        return pats[idx, 0], pats[idx, 1]

    def sample(self, n: int, rng) -> PairData:
        """Draw n strata: gammas first, then the two arms."""
        g = np.asarray(self.mixing.sample(rng, n), dtype=float)
        r1, r0 = self.counts(n)
        y1, y0 = self.cond.sample(self.psi_star, g, r1, r0, rng)
        return PairData(np.asarray(y1, float), np.asarray(y0, float), r1, r0)

    def quadrature_units(self, outer_coarse: bool = False, inner_coarse: bool = False):
        """Flattened quadrature units and weights approximating the law."""
        g, wg = self.mixing.outer_rule(outer_coarse)
        keep = wg > 1e-16 * wg.max()
        g, wg = g[keep], wg[keep] / wg[keep].sum()
        parts = []
        share = 1.0 / len(self.design)
        for r1, r0 in self.design:
            if hasattr(self.cond, "mixture_rule"):
                y1, y0, w = self.cond.mixture_rule(self.psi_star, g, wg, r1, r0, inner_coarse)
                parts.append((y1, y0, np.full(y1.size, r1), np.full(y1.size, r0), w * share))
            else:
                y1, y0, w = self.cond.inner_rule(self.psi_star, g, r1, r0, inner_coarse)
                ww = (w * wg[:, None] * share).ravel()
                parts.append((y1.ravel(), y0.ravel(), np.full(ww.size, r1), np.full(ww.size, r0), ww))
        cat = [np.concatenate([p[i] for p in parts]) for i in range(5)]
        return PairData(cat[0], cat[1], cat[2], cat[3]), cat[4]


@dataclass(frozen=True)
class MonteCarlo:
    """Monte Carlo expectation with ``n`` draws from a stream seeded by ``seed``."""

    n: int
    seed: int = 0

    def __post_init__(self):
        if int(self.n) <= 0:
            raise InvalidArgumentError("n", "Monte Carlo sample size must be positive")


def _wsum(weights, values):
    return np.tensordot(weights, values, axes=(0, 0))


def expect_under_true(f, true_model, method="quadrature"):
    """Expectation of ``f(units)`` under a true model.

    Args:
        f: vectorized function of a unit container (``PairData`` here, or the
            unit type of any other model exposing ``quadrature_units`` and
            ``sample``) returning an array whose first axis runs over units.
        true_model: the law to integrate against.
        method: "quadrature" (nested rule with a coarse-versus-fine error
            estimate) or a :class:`MonteCarlo` instance (standard error).

    Returns:
        ``(value, error_estimate)`` with the shape of one unit's output.
    """
    if isinstance(method, MonteCarlo):
        rng = np.random.default_rng(method.seed)
        units = true_model.sample(int(method.n), rng)
        vals = np.asarray(f(units), dtype=float)
        return vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0])
    if method != "quadrature":
        raise InvalidArgumentError("method", f"unknown expectation method {method!r}")
    fine, coarse = quadrature_variants(f, true_model)
    if not np.all(np.isfinite(fine)):
        raise NumericalFailureError("non-finite expectation", bad_components=int(np.sum(~np.isfinite(fine))))
    err = np.zeros_like(fine)
    for c in coarse:
        err = err + np.abs(fine - c)
    return fine, err + 1e-15 * np.abs(fine)


def quadrature_variants(f, true_model):
    """Expectation of ``f`` on the fine rule and on each coarsened rule.

    The coarsened rules refine all but one level (outer mixing rule or inner
    conditional rule); their discrepancies from the fine value serve as error
    estimates, also for nonlinear functionals of several expectations.

    Returns:
        ``(fine, [coarse, ...])``.
    """
    wsum = getattr(f, "weighted", None) or (lambda u, w: _wsum(w, np.asarray(f(u), dtype=float)))
    units, w = true_model.quadrature_units()
    fine = np.asarray(wsum(units, w), dtype=float)
    coarse = []
    exact_outer = getattr(true_model, "exact_outer", False)
    for oc, ic in ((True, False), (False, True)):
        if oc and exact_outer:
            continue
        u2, w2 = true_model.quadrature_units(outer_coarse=oc, inner_coarse=ic)
        coarse.append(np.asarray(wsum(u2, w2), dtype=float))
    return fine, coarse


# ---------------------------------------------------------------------------
# Assumed models


def _log_moment_init(family: DensityFamily, mean_log: float, var_log: float, fixed):
    """Initial mixing parameters matching moments of log gamma."""
    var_log = max(var_log, 0.02)
    if isinstance(family, Gamma):
        if "rate" in fixed:
            k = np.exp(mean_log) * family.rate
            return Gamma(max(k, 0.05), family.rate)
        # trigamma(k) = var_log, solved by a few Newton steps from 1/var + 1/2
        k = 1.0 / var_log + 0.5
        for _ in range(30):
            k -= (special.polygamma(1, k) - var_log) / special.polygamma(2, k)
            k = max(k, 1e-3)
        if "shape" in fixed:
            k = family.shape
        return Gamma(k, float(np.exp(special.digamma(k) - mean_log)))
    if isinstance(family, GammaMeanShape):
        k = max(1.0 / var_log, 0.05)
        return GammaMeanShape(float(np.exp(-mean_log - 0.5 * var_log)), k)
    if isinstance(family, LogNormal):
        return LogNormal(mean_log, float(np.sqrt(var_log)))
    return family


def _moment_init(family: DensityFamily, mean: float, var: float):
    var = max(var, 1e-2 * max(mean * mean, 1e-2))
    if isinstance(family, Normal):
        return Normal(mean, var)
    if isinstance(family, Gamma) and mean > 0:
        return Gamma(mean * mean / var, mean / var)
    if isinstance(family, GammaMeanShape) and mean > 0:
        return GammaMeanShape(1.0 / mean, mean * mean / var)
    if isinstance(family, LogNormal) and mean > 0:
        s2 = np.log1p(var / mean**2)
        return LogNormal(np.log(mean) - 0.5 * s2, float(np.sqrt(s2)))
    return family


@dataclass(frozen=True)
class AssumedModel:
    """Conditional model mixed over a parametric family.

    Args:
        cond: conditional model of the arms given gamma.
        family: mixing family; its current parameter values serve as defaults
            and as the values of any ``fixed`` parameters.
        fixed: names of family parameters held fixed (excluded from lambda).
        force_quadrature: ignore any closed form (used as an oracle).

    For a :class:`DiscreteAtoms` family lambda is the vector of atom
    locations with the weights held fixed; a single atom is a point mass.
    """

    cond: ConditionalModel
    family: DensityFamily
    fixed: tuple = ()
    force_quadrature: bool = False
    max_nodes: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        if self.is_atoms:
            if self.fixed:
                raise InvalidArgumentError("fixed", "atom families fix their weights already")
        else:
            for name in self.fixed:
                if name not in self.family.param_names:
                    raise InvalidArgumentError("fixed", f"{name!r} is not a parameter of {self.family.kind}")
        if self.cond.gamma_support == "positive" and self.family.support == "real":
            raise InvalidArgumentError("assumed_mixing", "family must live on the positive half-line")

    @property
    def is_atoms(self) -> bool:
        return isinstance(self.family, DiscreteAtoms)

    @property
    def closed_form(self) -> ClosedForm:
        if self.force_quadrature:
            return ClosedForm.NONE
        return _closed_form_for(self.cond, self.family)

    @property
    def free_index(self) -> np.ndarray:
        if self.is_atoms:
            return np.arange(len(self.family.points))
        return np.array([i for i, n in enumerate(self.family.param_names) if n not in self.fixed], dtype=int)

    @property
    def lambda_names(self) -> tuple:
        if self.is_atoms:
            return tuple(f"point_{k + 1}" for k in range(len(self.family.points)))
        return tuple(self.family.param_names[i] for i in self.free_index)

    @property
    def param_names(self) -> tuple:
        return (self.cond.interest_name,) + self.lambda_names

    @property
    def positive(self) -> tuple:
        if self.is_atoms:
            lam = (self.cond.gamma_support == "positive",) * len(self.family.points)
        else:
            lam = tuple(self.family.positive[i] for i in self.free_index)
        return (self.cond.interest_positive,) + lam

    @property
    def n_params(self) -> int:
        return 1 + len(self.lambda_names)

    def default_lambda(self) -> np.ndarray:
        if self.is_atoms:
            return np.array(self.family.points)
        return self.family.params[self.free_index]

    def family_at(self, lam) -> DensityFamily:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.size != len(self.lambda_names):
            raise InvalidArgumentError("lambda", f"expected {len(self.lambda_names)} values, got {lam.size}")
        if self.is_atoms:
            return DiscreteAtoms(tuple(lam), self.family.weights)
        full = self.family.params.copy()
        full[self.free_index] = lam
        return self.family.with_params(full)

    def check_point(self, psi, lam):
        if not np.isfinite(psi):
            raise InvalidArgumentError("psi", "must be finite")
        if self.cond.interest_positive and psi <= 0:
            raise InvalidArgumentError("psi", f"must be > 0, got {psi}")
        fam = self.family_at(lam)
        if self.is_atoms and self.cond.gamma_support == "positive" and min(fam.points) <= 0:
            raise InvalidArgumentError("lambda", "atoms must be positive")
        return fam

    # -- evaluation ---------------------------------------------------------

    def derivs(self, psi: float, lam, d: PairData, order: int = 2):
        """Per-stratum log-likelihood and derivatives over (psi, lambda).

        Returns:
            ``(ll,)`` for order 0, ``(ll, grad)`` for order 1 and
            ``(ll, grad, hess)`` for order 2 with shapes (n,), (n, p), (n, p, p).
        """
        fam = self.check_point(psi, lam)
        cf = self.closed_form
        if cf is ClosedForm.EXPONENTIAL_GAMMA:
            out = _exp_gamma(self.cond.symmetric, psi, fam.shape, fam.rate, d, order)
        elif cf is ClosedForm.POISSON_GAMMA:
            out = _poisson_gamma(psi, fam.inv_mean, fam.shape, d, order)
        elif cf is ClosedForm.NORMAL_NORMAL:
            out = _normal_normal(psi, fam.mean_, fam.var, d, order)
        elif self.is_atoms:
            return _atoms_marginal(self.cond, psi, fam, d, order)
        else:
            out = _quadrature_marginal(self.cond, psi, fam, d, order, self.max_nodes)
        if order == 0 or len(self.free_index) == fam.params.size:
            return out
        keep = np.concatenate([[0], 1 + self.free_index])
        res = [out[0], out[1][:, keep]]
        if order >= 2:
            res.append(out[2][:, keep][:, :, keep])
        return tuple(res)

    def loglik(self, psi, lam, d: PairData):
        return self.derivs(psi, lam, d, order=0)[0]

    def own_law(self, psi, lam, reference=None) -> TrueModel:
        """The assumed model's own law at (psi, lambda) as a :class:`TrueModel`.

        The count design is copied from ``reference`` when given.
        """
        design = reference.design if reference is not None else ((1.0, 1.0),)
        return TrueModel(self.cond, psi, self.family_at(lam), design)

    def validate_data(self, d: PairData):
        self.cond.check_data(d)

    def initial_values(self, d: PairData) -> np.ndarray:
        """Moment-based starting point (interest first, then lambda)."""
        p0 = self.cond.init_interest(d)
        if self.cond.interest_positive:
            p0 = float(np.clip(p0, 1e-3, 1e3))
        if self.is_atoms:
            if isinstance(self.cond, ExpPairs):
                m, v = self.cond.gamma_log_moments(p0, d)
                centre = np.exp(m)
            else:
                centre, v = self.cond.gamma_moments(p0, d)
            k = len(self.family.points)
            spread = np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)
            if self.cond.gamma_support == "positive":
                pts = centre * np.exp(spread * np.sqrt(max(v, 0.01)))
            else:
                pts = centre + spread * np.sqrt(max(v, 0.01))
            return np.concatenate([[p0], pts])
        base = self.family
        if isinstance(self.cond, ExpPairs):
            fam = _log_moment_init(base, *self.cond.gamma_log_moments(p0, d), self.fixed)
        else:
            fam = _moment_init(base, *self.cond.gamma_moments(p0, d))
        full = fam.params
        for name in self.fixed:
            i = base.param_names.index(name)
            full[i] = base.params[i]
        return np.concatenate([[p0], full[self.free_index]])


def _pack(order, ll, grads, hess_rows):
    if order == 0:
        return (ll,)
    grad = np.stack(grads, axis=-1)
    if order == 1:
        return ll, grad
    hess = np.stack([np.stack(row, axis=-1) for row in hess_rows], axis=-2)
    return ll, grad, hess


def _exp_gamma(symmetric, p, k, rho, d: PairData, order):
    """Closed-form exponential pairs mixed over Gamma(shape=k, rate=rho)."""
    r1, r0, y1, y0 = d.r1, d.r0, d.y1, d.y0
    if symmetric:
        a = r1 * y1 * p + r0 * y0 / p
        a_p = r1 * y1 - r0 * y0 / p**2
        a_pp = 2.0 * r0 * y0 / p**3
        extra, extra_p, extra_pp = 0.0, 0.0, 0.0
    else:
        a = r1 * y1 * p + r0 * y0
        a_p = r1 * y1
        a_pp = 0.0 * a
        extra, extra_p, extra_pp = np.log(p), 1.0 / p, -1.0 / p**2
    big = a + rho
    ll = (np.log(r1 * r0) + extra + special.gammaln(k + 2.0) - special.gammaln(k) + k * np.log(rho)
          - (k + 2.0) * np.log(big))
    if order == 0:
        return (ll,)
    l_p = extra_p - (k + 2.0) * a_p / big
    l_k = special.digamma(k + 2.0) - special.digamma(k) + np.log(rho) - np.log(big)
    l_r = k / rho - (k + 2.0) / big
    if order == 1:
        return _pack(1, ll, [l_p, l_k, l_r], None)
    l_pp = extra_pp - (k + 2.0) * (a_pp / big - a_p**2 / big**2)
    l_pk = -a_p / big
    l_pr = (k + 2.0) * a_p / big**2
    l_kk = special.polygamma(1, k + 2.0) - special.polygamma(1, k) + 0.0 * big
    l_kr = 1.0 / rho - 1.0 / big
    l_rr = -k / rho**2 + (k + 2.0) / big**2
    return _pack(2, ll, [l_p, l_k, l_r], [[l_pp, l_pk, l_pr], [l_pk, l_kk, l_kr], [l_pr, l_kr, l_rr]])


def _poisson_gamma(th, nu, om, d: PairData, order):
    """Closed-form Poisson stratum mixed over a gamma law with mean 1/nu and shape om."""
    s1, s0, r1, r0 = d.y1, d.y0, d.r1, d.r0
    s = s1 + s0
    rt = r1 * np.exp(th) + r0 * np.exp(-th)
    rd = r1 * np.exp(th) - r0 * np.exp(-th)
    big = rt + nu * om
    const = s1 * np.log(r1) + s0 * np.log(r0) - special.gammaln(s1 + 1.0) - special.gammaln(s0 + 1.0)
    ll = (special.gammaln(s + om) - special.gammaln(om) + th * (s1 - s0) + om * np.log(om) + om * np.log(nu)
          - (s + om) * np.log(big) + const)
    if order == 0:
        return (ll,)
    l_t = s1 - s0 - (s + om) * rd / big
    l_n = om / nu - (s + om) * om / big
    l_o = (special.digamma(s + om) - special.digamma(om) + np.log(om) + 1.0 + np.log(nu) - np.log(big)
           - (s + om) * nu / big)
    if order == 1:
        return _pack(1, ll, [l_t, l_n, l_o], None)
    l_tt = -(s + om) * (rt / big - rd**2 / big**2)
    l_tn = (s + om) * rd * om / big**2
    l_to = -rd / big + (s + om) * rd * nu / big**2
    l_nn = -om / nu**2 + (s + om) * om**2 / big**2
    l_no = 1.0 / nu - (s + 2.0 * om) / big + (s + om) * om * nu / big**2
    l_oo = (special.polygamma(1, s + om) - special.polygamma(1, om) + 1.0 / om - 2.0 * nu / big
            + (s + om) * nu**2 / big**2)
    return _pack(2, ll, [l_t, l_n, l_o], [[l_tt, l_tn, l_to], [l_tn, l_nn, l_no], [l_to, l_no, l_oo]])


def _normal_normal(p, mu, v, d: PairData, order):
    """Closed-form normal pairs mixed over N(mu, v): a bivariate normal likelihood."""
    a11 = 1.0 / d.r1 + v
    a00 = 1.0 / d.r0 + v
    det = a11 * a00 - v * v
    # inverse covariance entries
    i11, i00, i10 = a00 / det, a11 / det, -v / det
    e1 = d.y1 - mu - p
    e0 = d.y0 - mu + p
    q = i11 * e1 * e1 + 2.0 * i10 * e1 * e0 + i00 * e0 * e0
    ll = -_LOG_2PI - 0.5 * np.log(det) - 0.5 * q
    if order == 0:
        return (ll,)
    se1 = i11 * e1 + i10 * e0
    se0 = i10 * e1 + i00 * e0
    l_p = se1 - se0
    b = se1 + se0  # 1' S^-1 e
    l_m = b
    one = i11 + 2.0 * i10 + i00  # 1' S^-1 1
    l_v = -0.5 * one + 0.5 * b * b
    if order == 1:
        return _pack(1, ll, [l_p, l_m, l_v], None)
    dd = i11 - 2.0 * i10 + i00  # d' S^-1 d with d = (1, -1)
    d1 = i11 - i00  # d' S^-1 1
    l_pp = -dd + 0.0 * b
    l_pm = -d1 + 0.0 * b
    l_mm = -one + 0.0 * b
    l_pv = -d1 * b
    l_mv = -one * b
    l_vv = 0.5 * one * one - one * b * b
    return _pack(2, ll, [l_p, l_m, l_v], [[l_pp, l_pm, l_pv], [l_pm, l_mm, l_mv], [l_pv, l_mv, l_vv]])


def _reduce(logw_phi, gF, hF, order):
    """Combine node contributions: log-sum-exp and posterior-weighted derivatives."""
    ll = special.logsumexp(logw_phi, axis=1)
    if order == 0:
        return (ll,)
    post = np.exp(logw_phi - ll[:, None])
    grad = np.einsum("nk,nkp->np", post, gF)
    if order == 1:
        return ll, grad
    second = np.einsum("nk,nkpq->npq", post, hF + gF[..., :, None] * gF[..., None, :])
    return ll, grad, second - grad[:, :, None] * grad[:, None, :]


def _atoms_marginal(cond, p, fam: DiscreteAtoms, d: PairData, order):
    """Exact finite mixture with atom locations as parameters."""
    pts = np.array(fam.points)
    logw = np.log(np.array(fam.weights))
    g = pts[None, :]
    dd = PairData(d.y1[:, None], d.y0[:, None], d.r1[:, None], d.r0[:, None])
    c, c_p, c_pp, c_g, c_gg, c_pg = cond.terms(p, g, dd, order=2)
    c = np.broadcast_to(c, (len(d), pts.size))
    phi = logw + c
    K = pts.size
    n = len(d)
    eye = np.eye(K)
    gF = np.zeros((n, K, 1 + K))
    gF[:, :, 0] = np.broadcast_to(c_p, (n, K))
    gF[:, :, 1:] = np.broadcast_to(c_g, (n, K))[:, :, None] * eye
    hF = np.zeros((n, K, 1 + K, 1 + K))
    hF[:, :, 0, 0] = np.broadcast_to(c_pp, (n, K))
    cross = np.broadcast_to(c_pg, (n, K))[:, :, None] * eye
    hF[:, :, 0, 1:] = cross
    hF[:, :, 1:, 0] = cross
    hF[:, :, 1:, 1:] = np.broadcast_to(c_gg, (n, K))[:, :, None, None] * eye[:, :, None] * eye[:, None, :]
    return _reduce(phi, gF, hF, order)


def _log_integrand(cond, p, fam, z, dd, positive):
    g = np.exp(z) if positive else z
    c, c_p, c_pp, c_g, c_gg, c_pg = cond.terms(p, g, dd, order=2)
    lh = fam.log_density(g)
    hg = fam.point_gradient(g)
    hgg = fam.point_hessian(g)
    if positive:
        phi = c + lh + z
        t = c_g + hg
        d1 = t * g + 1.0
        d2 = (c_gg + hgg) * g * g + t * g
    else:
        phi = c + lh
        d1 = c_g + hg
        d2 = c_gg + hgg
    return g, phi, d1, d2, (c_p, c_pp)


def _find_modes(cond, p, fam, dd, positive):
    n = dd.y1.shape[0]
    if positive:
        z = np.full((n, 1), np.log(fam.mean()))
        clip = 2.0
    else:
        z = np.full((n, 1), float(fam.mean()))
        clip = 2.0 * np.sqrt(fam.variance())
    for _ in range(200):
        _, _, d1, d2, _ = _log_integrand(cond, p, fam, z, dd, positive)
        step = np.where(d2 < 0, -d1 / np.where(d2 < 0, d2, -1.0), np.sign(d1) * clip)
        step = np.clip(step, -clip, clip)
        z = z + step
        if np.max(np.abs(step)) < 1e-10 * max(1.0, clip):
            break
    _, _, _, d2, _ = _log_integrand(cond, p, fam, z, dd, positive)
    scale = 1.0 / np.sqrt(np.maximum(-d2, 1e-12))
    return z, scale


_CHUNK = 4096


def _weighted_reduce(cond, p, fam, z, log_dz, dd, positive, order):
    g, phi, _, _, (c_p, c_pp) = _log_integrand(cond, p, fam, z, dd, positive)
    lw = log_dz + phi
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    if order == 0:
        return _reduce(lw, None, None, 0)
    sF, hFam = fam.score_and_hessian(g)
    n, K = g.shape
    q = sF.shape[-1]
    gF = np.zeros((n, K, 1 + q))
    gF[:, :, 0] = c_p
    gF[:, :, 1:] = sF
    hF = np.zeros((n, K, 1 + q, 1 + q))
    hF[:, :, 0, 0] = c_pp
    hF[:, :, 1:, 1:] = hFam
    gF = np.where(np.isfinite(gF), gF, 0.0)
    hF = np.where(np.isfinite(hF), hF, 0.0)
    return _reduce(lw, gF, hF, order)


_TRAP_ROWS = 128
_TRAP_DROP = 40.0
_TRAP_MAX_NODES = 8192


def _trapezoid_marginal(cond, p, fam, dd, order, centre, scale, positive):
    """Trapezoid rule about the mode for integrands with heavy (exponential) tails.

    The range grows until the log integrand falls ``_TRAP_DROP`` below its
    peak at both ends; the step then halves until the log marginal settles.
    """
    n = dd.y1.shape[0]
    if n > _TRAP_ROWS:
        parts = [_trapezoid_marginal(cond, p, fam, _rows(dd, slice(k, k + _TRAP_ROWS)), order,
                                     centre[k:k + _TRAP_ROWS], scale[k:k + _TRAP_ROWS], positive)
                 for k in range(0, n, _TRAP_ROWS)]
        return tuple(np.concatenate([part[j] for part in parts]) for j in range(len(parts[0])))

    def log_f(z):
        return _log_integrand(cond, p, fam, z, dd, positive)[1]

    h = 0.5 * scale
    peak = log_f(centre)
    lo = np.ones_like(centre)
    hi = np.ones_like(centre)
    for _ in range(40):
        left = log_f(centre - lo * 8.0 * h)
        right = log_f(centre + hi * 8.0 * h)
        grow_l = np.isfinite(left) & (left > peak - _TRAP_DROP)
        grow_r = np.isfinite(right) & (right > peak - _TRAP_DROP)
        if not (grow_l.any() or grow_r.any()):
            break
        lo = np.where(grow_l, 2.0 * lo, lo)
        hi = np.where(grow_r, 2.0 * hi, hi)
    a, b = centre - lo * 8.0 * h, centre + hi * 8.0 * h
    prev = None
    k = 64
    while True:
        t = np.linspace(0.0, 1.0, k + 1)[None, :]
        z = a + (b - a) * t
        w = np.full(k + 1, 1.0)
        w[[0, -1]] = 0.5
        log_dz = np.log(w)[None, :] + np.log((b - a) / k)
        out = _weighted_reduce(cond, p, fam, z, log_dz, dd, positive, order)
        if prev is not None:
            resid = float(np.max(np.abs(out[0] - prev[0])))
            if resid < 1e-10:
                return out
            if k >= _TRAP_MAX_NODES:
                raise NumericalFailureError("marginal quadrature did not converge", last_residual=resid,
                                            nodes=k + 1)
        prev = out
        k *= 2


def _rows(dd: PairData, sl) -> PairData:
    return PairData(dd.y1[sl], dd.y0[sl], dd.r1[sl], dd.r0[sl])


def _quadrature_marginal(cond, p, fam, d: PairData, order, max_nodes=1024):
    """Laplace-centred Gauss-Hermite marginal with node doubling.

    Rows where the Hermite rule has not settled at ``max_nodes`` (heavy,
    exponential tails on the log scale) fall back to an adaptive trapezoid
    rule. Large inputs are processed in chunks to bound the node-by-stratum
    arrays.
    """
    if len(d) > _CHUNK:
        parts = [_quadrature_marginal(cond, p, fam, d.take(slice(k, k + _CHUNK)), order, max_nodes)
                 for k in range(0, len(d), _CHUNK)]
        return tuple(np.concatenate([part[j] for part in parts]) for j in range(len(parts[0])))
    positive = fam.support == "positive"
    dd = PairData(d.y1[:, None], d.y0[:, None], d.r1[:, None], d.r0[:, None])
    centre, scale = _find_modes(cond, p, fam, dd, positive)
    prev = None
    n_nodes = 64
    while True:
        x, logw = hermite_log_rule(n_nodes)
        z = centre + np.sqrt(2.0) * scale * x[None, :]
        out = _weighted_reduce(cond, p, fam, z, logw[None, :] + np.log(np.sqrt(2.0) * scale), dd, positive, order)
        if prev is not None:
            resid = np.abs(out[0] - prev[0])
            bad = ~(resid < 1e-9)
            if not bad.any():
                return out
            if n_nodes >= max_nodes:
                log.debug("Hermite rule unsettled on %d rows; trapezoid fallback", int(bad.sum()))
                fixed = _trapezoid_marginal(cond, p, fam, _rows(dd, bad), order, centre[bad], scale[bad], positive)
                merged = []
                for full, part in zip(out, fixed):
                    full = full.copy()
                    full[bad] = part
                    merged.append(full)
                return tuple(merged)
        prev = out
        n_nodes *= 2


# -- public convenience wrappers ---------------------------------------------


def pair_loglik(assumed: AssumedModel, psi, lam, y1, y0, r1=1.0, r0=1.0):
    """Marginal log-likelihood of one or more strata.

    Example:
        >>> m = AssumedModel(ExpPairs(), Gamma(1.0, 1.0))
        >>> round(float(pair_loglik(m, 1.0, [1.0, 1.0], 1.0, 1.0)), 6)
        -2.60269
    """
    d = PairData.build(y1, y0, r1, r0)
    out = assumed.loglik(psi, lam, d)
    return float(out[0]) if np.ndim(y1) == 0 else out


def pair_loglik_grad(assumed: AssumedModel, psi, lam, y1, y0, order: str = "gradient", r1=1.0, r0=1.0):
    """Gradient (or Hessian) over (psi, lambda) of the marginal log-likelihood."""
    if order not in ("gradient", "hessian"):
        raise InvalidArgumentError("order", f"expected 'gradient' or 'hessian', got {order!r}")
    d = PairData.build(y1, y0, r1, r0)
    out = assumed.derivs(psi, lam, d, order=2 if order == "hessian" else 1)
    res = out[2] if order == "hessian" else out[1]
    return res[0] if np.ndim(y1) == 0 else res


def exponential_gamma_information(symmetric: bool, interest: float, shape: float, rate: float) -> np.ndarray:
    """Expected information per stratum of the exponential-gamma pair model under its own law.

    Derived from the representation ``a/(a + rate) ~ Beta(2, shape)`` of the
    rate-weighted pair total and an independent uniform split of it between
    the arms. It does not depend on the replication counts.
    """
    k, r, p = shape, rate, interest
    kk = special.polygamma(1, k) - special.polygamma(1, k + 2.0)
    kr = -2.0 / ((k + 2.0) * r)
    rr = 2.0 * k / ((k + 3.0) * r * r)
    if symmetric:
        pp = 2.0 * (k + 2.0) / ((k + 3.0) * p * p)
        pk = pr = 0.0
    else:
        pp = (k + 1.0) / ((k + 3.0) * p * p)
        pk = 1.0 / ((k + 2.0) * p)
        pr = -k / ((k + 3.0) * p * r)
    return np.array([[pp, pk, pr], [pk, kk, kr], [pr, kr, rr]])
