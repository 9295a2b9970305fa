"""Numerical checkers for likelihood consistency conditions.

Each checker evaluates a residual that is exactly zero when its condition
holds, at every point of a grid of nuisance values, together with an error
estimate of the numerical expectation behind it. Verdicts are three-way:

* Holds: every residual is within the tolerance and every error estimate is
  below a third of it;
* Fails: some residual exceeds both the tolerance and ten times its own
  error estimate;
* Inconclusive: anything else, including points where evaluation failed.

A Holds verdict is relative to the grid: a finite grid can refute a
"for all lambda" statement but cannot prove it.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .inference import expected_moments, moment_variants
from .mixture import MonteCarlo, expect_under_true

log = logging.getLogger(__name__)

DEFAULT_GRID_VALUES = (0.5, 1.0, 2.0, 5.0)
DEFAULT_TOLERANCE = 1e-7


class Condition(enum.Enum):
    M_ORTHOGONALITY = "m_orthogonality"
    CONSISTENCY_SCORE = "consistency_score"
    COXWONG_IDENTITY = "coxwong_identity"
    MOMENT_MATCH = "moment_match"
    ANTISYMMETRY = "antisymmetry"


class Verdict(enum.Enum):
    HOLDS = "Holds"
    FAILS = "Fails"
    INCONCLUSIVE = "Inconclusive"


def decide(residuals, errors, tol: float, strict: bool = True) -> Verdict:
    """Three-way verdict from residuals, their error estimates and a tolerance.

    Args:
        residuals: array of residual components (NaN marks a failed point).
        errors: matching error estimates.
        tol: tolerance on absolute residuals.
        strict: require error estimates strictly below ``tol / 3``;
            Monte Carlo callers pass False because their tolerance is itself
            three standard errors.
    """
    r = np.abs(np.asarray(residuals, dtype=float)).ravel()
    e = np.abs(np.asarray(errors, dtype=float)).ravel()
    ok = np.isfinite(r) & np.isfinite(e)
    if np.any(ok & (r > tol) & (r > 10.0 * e)):
        return Verdict.FAILS
    if r.size == 0:
        return Verdict.HOLDS
    if not np.all(ok):
        return Verdict.INCONCLUSIVE
    small_err = np.all(e < tol / 3.0) if strict else np.all(e <= tol / 3.0)
    if np.all(r <= tol) and small_err:
        return Verdict.HOLDS
    return Verdict.INCONCLUSIVE


@dataclass(frozen=True)
class ConditionReport:
    """Residual grid and verdict for one condition.

    Attributes:
        condition: which condition was checked.
        grid: evaluation points (tuples of nuisance values).
        labels: names of the grid coordinates.
        residuals: per point, the residual components (NaN when evaluation
            failed).
        errors: matching error estimates.
        tolerance: absolute tolerance used.
        verdict: overall verdict.
        point_verdicts: verdict at each grid point.
        reduced: for scalar nuisance Cox-Wong checks, the reduced residual
            ``i_lamlam g_psi - i_psilam g_lam`` per point.
        notes: free-text remarks (e.g. local concavity findings).
    """

    condition: Condition
    grid: tuple
    labels: tuple
    residuals: tuple
    errors: tuple
    tolerance: float
    verdict: Verdict
    point_verdicts: tuple
    reduced: tuple | None = None
    notes: tuple = ()
    strict: bool = True

    @property
    def max_abs_residual(self) -> float:
        vals = [np.max(np.abs(r)) for r in self.residuals if np.size(r)]
        return float(max(vals)) if vals else 0.0

    def rows(self):
        """One row per grid point: (label string, residual, error, verdict).

        The reported residual is the component with the largest magnitude.
        """
        out = []
        for pt, r, e, v in zip(self.grid, self.residuals, self.errors, self.point_verdicts):
            r = np.atleast_1d(r)
            e = np.atleast_1d(e)
            label = ";".join(f"{n}={x:.17g}" for n, x in zip(self.labels, pt))
            if r.size == 0:
                out.append((label, 0.0, 0.0, v))
                continue
            k = int(np.nanargmax(np.abs(r))) if np.any(np.isfinite(r)) else 0
            out.append((label, float(r[k]), float(e[k]), v))
        return out


def default_lambda_grid(assumed, values=DEFAULT_GRID_VALUES):
    """Tensor-product grid over the assumed model's nuisance coordinates."""
    k = len(assumed.param_names) - 1
    if k == 0:
        return [()]
    return [tuple(p) for p in itertools.product(values, repeat=k)]


def _tolerance(tol, method, errors):
    if tol is not None:
        return float(tol), not isinstance(method, MonteCarlo)
    if isinstance(method, MonteCarlo):
        flat = np.concatenate([np.atleast_1d(e).ravel() for e in errors]) if errors else np.zeros(1)
        flat = flat[np.isfinite(flat)]
        return 3.0 * float(flat.max() if flat.size else 0.0), False
    return DEFAULT_TOLERANCE, True


def _report(condition, grid, labels, residuals, errors, tol, method, reduced=None, notes=()):
    tol, strict = _tolerance(tol, method, errors)
    pv = tuple(decide(r, e, tol, strict) for r, e in zip(residuals, errors))
    allr = np.concatenate([np.atleast_1d(r).ravel() for r in residuals]) if residuals else np.zeros(0)
    alle = np.concatenate([np.atleast_1d(e).ravel() for e in errors]) if errors else np.zeros(0)
    verdict = decide(allr, alle, tol, strict)
    return ConditionReport(condition, tuple(tuple(float(x) for x in p) for p in grid), tuple(labels),
                           tuple(residuals), tuple(errors), tol, verdict, pv,
                           None if reduced is None else tuple(reduced), tuple(notes), strict)


def _grid(assumed, lambda_grid):
    grid = default_lambda_grid(assumed) if lambda_grid is None else [tuple(np.atleast_1d(p)) for p in lambda_grid]
    if len(grid) == 0:
        raise InvalidArgumentError("lambda_grid", "grid must be nonempty")
    return grid


def _moments_on_grid(true_model, assumed, psi_star, grid, method):
    """Per grid point ``(g, i, q, g_err, i_err, q_err, variants)`` or None on failure.

    ``variants`` holds the fine and coarsened ``(g, i, q)`` for quadrature and
    is None for Monte Carlo.
    """
    out = []
    for lam in grid:
        lam = np.array(lam, dtype=float)
        try:
            if isinstance(method, MonteCarlo):
                out.append(expected_moments(true_model, assumed, psi_star, lam, method) + (None,))
                continue
            if method != "quadrature":
                raise InvalidArgumentError("method", f"unknown expectation method {method!r}")
            var = moment_variants(true_model, assumed, psi_star, lam)
            g, i, q = var[0]
            errs = [sum(np.abs(v[k] - var[0][k]) for v in var[1:]) + 1e-15 * np.abs(var[0][k]) for k in range(3)]
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(i))):
                raise NumericalFailureError("non-finite expectation")
            out.append((g, i, q, *errs, var))
        except (NumericalFailureError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.info("evaluation failed at lambda=%s: %s", lam, exc)
            out.append(None)
    return out


def _concavity_note(moments):
    bad = 0
    for m in moments:
        if m is not None and np.any(np.linalg.eigvalsh(m[1]) <= 0):
            bad += 1
    if bad:
        return (f"expected Hessian not negative definite at {bad} grid point(s)",)
    return ("expected Hessian negative definite at every visited point; global concavity not checked",)


def _morth(moments, p):
    res, err = [], []
    for m in moments:
        if m is None:
            res.append(np.full(p - 1, np.nan))
            err.append(np.full(p - 1, np.nan))
        else:
            # i = E[-H], so the cross partial expectation is -i[0, 1:]
            res.append(-m[1][0, 1:])
            err.append(m[4][0, 1:])
    return res, err


def _consistency(moments):
    res, err = [], []
    for m in moments:
        res.append(np.array([np.nan]) if m is None else np.array([m[0][0]]))
        err.append(np.array([np.nan]) if m is None else np.array([m[3][0]]))
    return res, err


def _coxwong(moments, p):
    res, err, red = [], [], []
    for m in moments:
        if m is None:
            res.append(np.array([np.nan]))
            err.append(np.array([np.nan]))
            red.append(np.nan)
            continue
        g, i, _, ge, ie, _, var = m
        eig = np.linalg.eigvalsh(i)
        if np.min(np.abs(eig)) <= 1e-13 * max(1.0, np.max(np.abs(eig))):
            res.append(np.array([np.nan]))
            err.append(np.array([np.nan]))
            red.append(np.nan)
            continue
        inv = np.linalg.inv(i)
        step = inv @ g
        r = step[0]
        if var is not None:
            e = sum(abs(np.linalg.solve(v[1], v[0])[0] - r) for v in var[1:]) + 1e-15 * abs(r)
        else:
            # first-order propagation of the Monte Carlo standard errors
            e = np.abs(inv[0]) @ np.abs(ge) + np.linalg.norm(inv[0]) * np.linalg.norm(ie) * np.linalg.norm(step)
        res.append(np.array([r]))
        err.append(np.array([e]))
        red.append(float(i[1, 1] * g[0] - i[0, 1] * g[1]) if p == 2 else np.nan)
    return res, err, (red if p == 2 else None)


def check_m_orthogonality(true_model, assumed, psi_star, lambda_grid=None, tol=None, method="quadrature"):
    """Expected cross partial ``E_m[d2 l / dpsi dlambda](psi*, lambda)`` on a grid."""
    grid = _grid(assumed, lambda_grid)
    moments = _moments_on_grid(true_model, assumed, psi_star, grid, method)
    res, err = _morth(moments, len(assumed.param_names))
    return _report(Condition.M_ORTHOGONALITY, grid, assumed.param_names[1:], res, err, tol, method,
                   notes=_concavity_note(moments))


def check_consistency(true_model, assumed, psi_star, lambda_grid=None, tol=None, method="quadrature"):
    """Expected interest score ``E_m[d l / dpsi](psi*, lambda)`` on a grid."""
    grid = _grid(assumed, lambda_grid)
    moments = _moments_on_grid(true_model, assumed, psi_star, grid, method)
    res, err = _consistency(moments)
    return _report(Condition.CONSISTENCY_SCORE, grid, assumed.param_names[1:], res, err, tol, method,
                   notes=_concavity_note(moments))


def check_coxwong(true_model, assumed, psi_star, lambda_grid=None, tol=None, method="quadrature"):
    """Interest component of ``i^{-1} g`` at (psi*, lambda) on a grid.

    This is ``i^psipsi g_psi + i^psilam g_lam``; for a scalar nuisance the
    report also carries the reduced form ``i_lamlam g_psi - i_psilam g_lam``.
    """
    grid = _grid(assumed, lambda_grid)
    moments = _moments_on_grid(true_model, assumed, psi_star, grid, method)
    res, err, red = _coxwong(moments, len(assumed.param_names))
    return _report(Condition.COXWONG_IDENTITY, grid, assumed.param_names[1:], res, err, tol, method,
                   reduced=red, notes=_concavity_note(moments))


def check_all(true_model, assumed, psi_star, lambda_grid=None, tol=None, method="quadrature"):
    """The three grid checks sharing one set of expectations.

    Returns:
        dict mapping :class:`Condition` to :class:`ConditionReport`; the
        m-orthogonality entry is omitted for models without nuisance
        parameters.
    """
    grid = _grid(assumed, lambda_grid)
    p = len(assumed.param_names)
    moments = _moments_on_grid(true_model, assumed, psi_star, grid, method)
    notes = _concavity_note(moments)
    labels = assumed.param_names[1:]
    out = {}
    if p > 1:
        out[Condition.M_ORTHOGONALITY] = _report(Condition.M_ORTHOGONALITY, grid, labels, *_morth(moments, p),
                                                 tol, method, notes=notes)
    out[Condition.CONSISTENCY_SCORE] = _report(Condition.CONSISTENCY_SCORE, grid, labels, *_consistency(moments),
                                               tol, method, notes=notes)
    res, err, red = _coxwong(moments, p)
    out[Condition.COXWONG_IDENTITY] = _report(Condition.COXWONG_IDENTITY, grid, labels, res, err, tol, method,
                                              reduced=red, notes=notes)
    return out


def check_moment_match(true_model, assumed, psi, lam, stats, tol=None, method="quadrature"):
    """Compare expectations of statistics under the truth and the assumed law at (psi, lambda).

    Args:
        stats: sequence of vectorized functions of the unit container.
    """
    if len(stats) == 0:
        raise InvalidArgumentError("stats", "need at least one statistic")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))

    def f(units):
        return np.stack([np.asarray(s(units), dtype=float) for s in stats], axis=-1)

    own = assumed.own_law(psi, lam, true_model)
    try:
        vt, et = expect_under_true(f, true_model, method)
        va, ea = expect_under_true(f, own, method)
        res, err = [vt - va], [et + ea]
    except NumericalFailureError:
        res, err = [np.full(len(stats), np.nan)], [np.full(len(stats), np.nan)]
    labels = (assumed.param_names[0],) + tuple(assumed.param_names[1:])
    point = (float(psi),) + tuple(float(x) for x in lam)
    return _report(Condition.MOMENT_MATCH, [point], labels, res, err, tol, method)


# ---------------------------------------------------------------------------
# Orthogonal reparametrization


@dataclass(frozen=True)
class OrthogonalPath:
    """Solution of the orthogonalizing differential equation.

    Attributes:
        psi: emitted interest values.
        lam: nuisance values along the path, one row per psi.
        cross_info: interest-by-new-nuisance information in the new
            parametrization at each row.
        initial_cross_info: interest-by-nuisance information of the original
            parametrization at the starting point.
    """

    psi: np.ndarray
    lam: np.ndarray
    cross_info: np.ndarray
    initial_cross_info: np.ndarray

    @property
    def max_cross_info(self) -> float:
        return float(np.max(np.abs(self.cross_info))) if self.cross_info.size else 0.0

    def rows(self):
        return [(float(p),) + tuple(float(x) for x in l) for p, l in zip(self.psi, self.lam)]


def _rhs(info_fn, psi, lam):
    i = np.asarray(info_fn(np.concatenate([[psi], lam])), dtype=float)
    ill = i[1:, 1:]
    eig = np.linalg.eigvalsh(0.5 * (ill + ill.T))
    if not np.all(np.isfinite(eig)) or np.min(np.abs(eig)) <= 1e-13 * max(1.0, np.max(np.abs(eig))):
        raise NumericalFailureError("nuisance information singular along the path", psi_reached=float(psi))
    return -np.linalg.solve(ill, i[1:, 0])


def _rk4(info_fn, psi, lam, h):
    k1 = _rhs(info_fn, psi, lam)
    k2 = _rhs(info_fn, psi + h / 2, lam + h / 2 * k1)
    k3 = _rhs(info_fn, psi + h / 2, lam + h / 2 * k2)
    k4 = _rhs(info_fn, psi + h, lam + h * k3)
    return lam + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _advance(info_fn, psi, lam, target, tol=1e-11, depth=0):
    """RK4 from psi to target, halving while full and half steps disagree."""
    h = target - psi
    if h == 0:
        return lam
    full = _rk4(info_fn, psi, lam, h)
    mid = _rk4(info_fn, psi, lam, h / 2)
    half = _rk4(info_fn, psi + h / 2, mid, h / 2)
    if np.max(np.abs(full - half)) <= tol * (1.0 + np.max(np.abs(half))) or depth >= 14:
        return half
    mid = _advance(info_fn, psi, lam, psi + h / 2, tol, depth + 1)
    return _advance(info_fn, psi + h / 2, mid, target, tol, depth + 1)


def _solve_path(info_fn, psi0, lam0, grid):
    rows, psi, lam = [], psi0, np.array(lam0, dtype=float)
    for target in grid:
        lam = _advance(info_fn, psi, lam, float(target))
        psi = float(target)
        rows.append(lam.copy())
    return np.array(rows)


def orthogonalize(info_fn, phi0, psi_grid, fd_step: float = 1e-5) -> OrthogonalPath:
    """Follow lambda(psi) along which the interest parameter is orthogonal.

    Integrates ``dlambda/dpsi = -(i_lamlam)^{-1} i_lampsi`` with classical
    fourth-order Runge-Kutta from ``phi0 = (psi0, lambda0)`` through the
    ordered ``psi_grid``. The new nuisance coordinate is the starting value
    of lambda that labels each path. At every emitted row the cross
    information in the new coordinates is recomputed by the chain rule with
    finite-difference Jacobians of the solution map.

    Raises:
        NumericalFailureError: singular nuisance information along the path.
    """
    phi0 = np.asarray(phi0, dtype=float)
    grid = np.asarray(psi_grid, dtype=float).ravel()
    if grid.size == 0:
        raise InvalidArgumentError("psi_grid", "grid must be nonempty")
    if phi0.size < 2:
        raise InvalidArgumentError("phi0", "need an interest value and at least one nuisance value")
    psi0, lam0 = float(phi0[0]), phi0[1:]
    i0 = np.asarray(info_fn(phi0), dtype=float)
    path = _solve_path(info_fn, psi0, lam0, grid)
    k = lam0.size
    # d lambda(psi_row) / d lambda0 by re-solving from perturbed starts
    dlam = np.zeros((grid.size, k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = fd_step * max(1.0, abs(lam0[j]))
        up = _solve_path(info_fn, psi0, lam0 + e, grid)
        dn = _solve_path(info_fn, psi0, lam0 - e, grid)
        dlam[:, :, j] = (up - dn) / (2 * e[j])
    cross = np.zeros((grid.size, k))
    for r, (psi, lam) in enumerate(zip(grid, path)):
        h = fd_step * max(1.0, abs(psi))
        fwd = _advance(info_fn, psi, lam, psi + h)
        bwd = _advance(info_fn, psi, lam, psi - h)
        dpsi = np.concatenate([[1.0], (fwd - bwd) / (2 * h)])
        dnew = np.vstack([np.zeros((1, k)), dlam[r]])
        i = np.asarray(info_fn(np.concatenate([[psi], lam])), dtype=float)
        cross[r] = dpsi @ i @ dnew
    return OrthogonalPath(grid.copy(), path, cross, i0[0, 1:].copy())
