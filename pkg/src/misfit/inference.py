"""Maximum likelihood fitting, information matrices and sandwich covariance.

The routines here work with any assumed model exposing

* ``derivs(psi, lam, data, order)`` returning per-unit log-likelihood,
  gradient and Hessian over ``(psi, lambda)`` on the natural scale,
* ``positive`` (per-parameter positivity flags), ``param_names``,
* ``initial_values(data)`` and ``validate_data(data)``,
* ``own_law(psi, lam, reference)`` returning a law usable by
  :func:`misfit.mixture.expect_under_true`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .mixture import ClosedForm, PairData, expect_under_true, quadrature_variants

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    """Newton solver settings.

    Attributes:
        max_iter: iteration cap.
        gtol: convergence threshold on the natural-scale gradient max-norm.
        eig_floor: floor on eigenvalue magnitudes of the negative Hessian.
        max_step: cap on the transformed-scale step length.
        multistart: force (True) or suppress (False) three jittered starts;
            ``None`` uses them only for quadrature-backed likelihoods.
        jitter: offset of the extra starts on the transformed scale.
    """

    max_iter: int = 100
    gtol: float = 1e-8
    eig_floor: float = 1e-8
    max_step: float = 5.0
    multistart: bool | None = None
    jitter: float = 0.1


@dataclass(frozen=True)
class FitResult:
    """Outcome of a likelihood fit; all quantities on the natural scale."""

    psi_hat: float
    lambda_hat: np.ndarray
    loglik: float
    observed_info: np.ndarray
    sandwich_cov: np.ndarray | None
    iterations: int
    converged: bool
    gradient_norm: float
    param_names: tuple = ()
    n: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.psi_hat], np.atleast_1d(self.lambda_hat)])

    @property
    def sandwich_se(self) -> float:
        if self.sandwich_cov is None:
            return float("nan")
        return float(np.sqrt(max(self.sandwich_cov[0, 0], 0.0)))


class _Objective:
    """Total log-likelihood on the transformed scale (log for positive parameters)."""

    def __init__(self, assumed, data):
        self.assumed = assumed
        self.data = data
        self.pos = np.array(assumed.positive, dtype=bool)

    def natural(self, eta):
        return np.where(self.pos, np.exp(np.where(self.pos, eta, 0.0)), eta)

    def transformed(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta[self.pos] <= 0):
            bad = self.assumed.param_names[int(np.argmax(self.pos & (theta <= 0)))]
            raise InvalidArgumentError(bad, "initial value must be > 0")
        return np.where(self.pos, np.log(np.where(self.pos, theta, 1.0)), theta)

    def value(self, eta):
        th = self.natural(eta)
        try:
            ll = self.assumed.derivs(th[0], th[1:], self.data, order=0)[0]
        except (InvalidArgumentError, NumericalFailureError, FloatingPointError):
            return -np.inf
        tot = float(np.sum(ll))
        return tot if np.isfinite(tot) else -np.inf

    def full(self, eta):
        th = self.natural(eta)
        ll, g, h = self.assumed.derivs(th[0], th[1:], self.data, order=2)
        tot, G, H = float(np.sum(ll)), g.sum(axis=0), h.sum(axis=0)
        jac = np.where(self.pos, th, 1.0)
        g_eta = G * jac
        h_eta = H * np.outer(jac, jac) + np.diag(np.where(self.pos, G * th, 0.0))
        return tot, G, H, g_eta, h_eta, g


def _newton(obj: _Objective, eta0, opts: SolverOptions):
    eta = np.array(eta0, dtype=float)
    f0 = obj.value(eta)
    if not np.isfinite(f0):
        raise InvalidArgumentError("init", "log-likelihood is not finite at the initial value")
    it = 0
    while True:
        f, G, H, g_eta, h_eta, per_unit = obj.full(eta)
        gnorm = float(np.max(np.abs(G)))
        if not np.isfinite(gnorm):
            raise NumericalFailureError("non-finite gradient", psi=float(obj.natural(eta)[0]))
        if gnorm <= opts.gtol or it >= opts.max_iter:
            return eta, f, G, H, per_unit, it, gnorm
        vals, vecs = np.linalg.eigh(-0.5 * (h_eta + h_eta.T))
        vals = np.maximum(np.abs(vals), opts.eig_floor)
        step = vecs @ ((vecs.T @ g_eta) / vals)
        length = float(np.max(np.abs(step)))
        if length > opts.max_step:
            step *= opts.max_step / length
        slope = float(g_eta @ step)
        slack = 1e-12 * (1.0 + abs(f))
        t = 1.0
        while True:
            cand = eta + t * step
            fc = obj.value(cand)
            if np.isfinite(fc) and fc >= f + 1e-4 * t * slope - slack:
                break
            t *= 0.5
            if t < 1e-12:
                raise NumericalFailureError("line search failed at a non-stationary point",
                                            gradient_norm=gnorm, psi=float(obj.natural(eta)[0]),
                                            iteration=it)
        eta = cand
        it += 1


def fit_mle(assumed, data, init=None, opts: SolverOptions | None = None) -> FitResult:
    """Maximize the assumed log-likelihood by damped Newton iterations.

    Positive parameters are optimized on the log scale. Convergence is
    declared when the natural-scale gradient max-norm falls to
    ``opts.gtol`` and the observed information is positive definite.

    Args:
        assumed: model exposing ``derivs`` and the attributes listed in the
            module docstring.
        data: observations in the model's unit container.
        init: starting vector ``(psi, lambda...)``; moment-based by default.
        opts: solver options.

    Returns:
        A :class:`FitResult` with the empirical sandwich covariance
        ``A^{-1} B A^{-1}`` built from per-unit scores.

    Raises:
        InvalidArgumentError: empty data or non-finite log-likelihood at init.
        NumericalFailureError: line search failure away from a stationary point.
    """
    opts = opts or SolverOptions()
    if len(data) == 0:
        raise InvalidArgumentError("data", "no observations")
    if hasattr(assumed, "validate_data"):
        assumed.validate_data(data)
    obj = _Objective(assumed, data)
    theta0 = np.asarray(assumed.initial_values(data) if init is None else init, dtype=float)
    eta0 = obj.transformed(theta0)
    multistart = opts.multistart
    if multistart is None:
        multistart = getattr(assumed, "closed_form", ClosedForm.NONE) is ClosedForm.NONE
    starts = [eta0]
    if multistart:
        pattern = np.where(np.arange(eta0.size) % 2 == 0, 1.0, -1.0) * opts.jitter
        starts += [eta0 + pattern, eta0 - pattern]
    best, first_error = None, None
    for k, start in enumerate(starts):
        try:
            res = _finish(assumed, obj, _newton(obj, start, opts), opts, len(data))
        except NumericalFailureError as exc:
            first_error = first_error or exc
            log.debug("start %d failed: %s", k, exc)
            continue
        except InvalidArgumentError:
            if k == 0:
                raise
            continue
        if best is None or (res.converged, res.loglik) > (best.converged, best.loglik):
            best = res
    if best is None:
        raise first_error
    return best


def _finish(assumed, obj, out, opts, n):
    eta, f, G, H, per_unit, it, gnorm = out
    th = obj.natural(eta)
    info = -0.5 * (H + H.T)
    pd = bool(np.all(np.linalg.eigvalsh(info) > 0))
    cov = None
    if pd:
        a_inv = np.linalg.inv(info)
        cov = a_inv @ (per_unit.T @ per_unit) @ a_inv
    return FitResult(float(th[0]), th[1:].copy(), f, info, cov, it, bool(gnorm <= opts.gtol and pd), gnorm,
                     tuple(assumed.param_names), n)


# ---------------------------------------------------------------------------
# Expected information


@dataclass(frozen=True)
class InfoPair:
    """Expected information under the truth (``i``), score outer product (``q``)
    and the same two quantities under the assumed model's own law
    (``i_check``, ``q_check``), each with an error estimate.

    Index 0 is the interest parameter; the remaining indices are lambda.
    """

    i: np.ndarray
    q: np.ndarray
    i_check: np.ndarray | None = None
    q_check: np.ndarray | None = None
    i_err: np.ndarray | None = None
    q_err: np.ndarray | None = None
    i_check_err: np.ndarray | None = None
    q_check_err: np.ndarray | None = None
    g: np.ndarray | None = None
    g_err: np.ndarray | None = None

    @property
    def i_psipsi(self) -> float:
        return float(self.i[0, 0])

    @property
    def i_psilam(self) -> np.ndarray:
        return self.i[0, 1:]

    @property
    def i_lamlam(self) -> np.ndarray:
        return self.i[1:, 1:]

    @property
    def i_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.i)

    @property
    def i_up_psipsi(self) -> float:
        """(psi, psi) entry of the inverse information."""
        return float(self.i_inverse[0, 0])

    @property
    def i_up_psilam(self) -> np.ndarray:
        """(psi, lambda) block of the inverse information."""
        return self.i_inverse[0, 1:]

    @property
    def i_psipsi_dot_lam(self) -> float:
        """Schur complement ``i_psipsi - i_psilam i_lamlam^{-1} i_lampsi``."""
        if self.i.shape[0] == 1:
            return self.i_psipsi
        return float(self.i_psipsi - self.i_psilam @ np.linalg.solve(self.i_lamlam, self.i_psilam))

    def q_i_product(self) -> float:
        """``q_psipsi * i^psipsi``, which equals 1 when naive inference is adequate."""
        return float(self.q[0, 0] * self.i_up_psipsi)


class _MomentIntegrand:
    """Score, negative Hessian and score outer product, stacked per unit.

    ``weighted`` forms the weighted sums directly, which avoids building the
    per-unit outer products on large quadrature grids.
    """

    def __init__(self, assumed, psi, lam):
        self.assumed, self.psi, self.lam = assumed, psi, lam
        self.p = len(assumed.param_names)

    def __call__(self, units):
        p = self.p
        _, g, h = self.assumed.derivs(self.psi, self.lam, units, order=2)
        outer = g[:, :, None] * g[:, None, :]
        return np.concatenate([g, -h.reshape(-1, p * p), outer.reshape(-1, p * p)], axis=1)

    def weighted(self, units, w):
        _, g, h = self.assumed.derivs(self.psi, self.lam, units, order=2)
        wg = g * w[:, None]
        return np.concatenate([wg.sum(axis=0), -np.tensordot(w, h, axes=(0, 0)).ravel(), (wg.T @ g).ravel()])


def _moment_fn(assumed, psi, lam):
    f = _MomentIntegrand(assumed, psi, lam)
    return f, f.p


def expected_moments(law, assumed, psi, lam, method="quadrature"):
    """Expected score, information and score outer product under ``law``.

    Returns:
        ``(g, i, q, g_err, i_err, q_err)``.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    f, p = _moment_fn(assumed, psi, lam)
    val, err = expect_under_true(f, law, method)
    g, i, q = val[:p], val[p:p + p * p].reshape(p, p), val[p + p * p:].reshape(p, p)
    ge, ie, qe = err[:p], err[p:p + p * p].reshape(p, p), err[p + p * p:].reshape(p, p)
    return g, 0.5 * (i + i.T), 0.5 * (q + q.T), ge, ie, qe


def moment_variants(law, assumed, psi, lam):
    """``(g, i, q)`` on the fine quadrature rule and on each coarsened rule.

    Returns:
        list of ``(g, i, q)`` tuples, fine first.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    f, p = _moment_fn(assumed, psi, lam)
    fine, coarse = quadrature_variants(f, law)
    out = []
    for val in [fine] + coarse:
        i = val[p:p + p * p].reshape(p, p)
        q = val[p + p * p:].reshape(p, p)
        out.append((val[:p], 0.5 * (i + i.T), 0.5 * (q + q.T)))
    return out


def info_matrices(true_model, assumed, psi, lam, method="quadrature", own_law: bool = True) -> InfoPair:
    """Information quantities at (psi, lambda) under the truth and the assumed law.

    Args:
        own_law: also compute ``i_check``/``q_check`` under the assumed
            model's own law at (psi, lambda).
    """
    g, i, q, ge, ie, qe = expected_moments(true_model, assumed, psi, lam, method)
    ic = qc = ice = qce = None
    if own_law:
        law = assumed.own_law(psi, lam, true_model)
        _, ic, qc, _, ice, qce = expected_moments(law, assumed, psi, lam, method)
    return InfoPair(i, q, ic, qc, ie, qe, ice, qce, g, ge)


def sandwich_cov(info: InfoPair, n: int) -> np.ndarray:
    """Asymptotic covariance ``i^{-1} q i^{-1} / n`` of the estimator.

    Raises:
        NumericalFailureError: ``i`` is singular; the smallest eigenvalue is
            reported.
    """
    if n < 1:
        raise InvalidArgumentError("n", "sample size must be >= 1")
    i = np.asarray(info.i, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (i + i.T))
    small = float(eig[np.argmin(np.abs(eig))])
    if abs(small) <= 1e-13 * max(1.0, float(np.max(np.abs(eig)))):
        raise NumericalFailureError("information matrix is singular", smallest_eigenvalue=small)
    log.debug("information condition number %.3g", float(np.max(np.abs(eig)) / abs(small)))
    i_inv = np.linalg.inv(i)
    return i_inv @ np.asarray(info.q, dtype=float) @ i_inv / n


def g_vector(true_model, assumed, psi_star, lam, method="quadrature"):
    """Expected assumed score under the truth at (psi*, lambda).

    Returns:
        ``(g_psi, g_lambda)``; see :func:`g_vector_with_error` for error
        estimates.
    """
    g, _ = g_vector_with_error(true_model, assumed, psi_star, lam, method)
    return float(g[0]), g[1:]


def g_vector_with_error(true_model, assumed, psi_star, lam, method="quadrature"):
    lam = np.atleast_1d(np.asarray(lam, dtype=float))

    def f(units):
        return assumed.derivs(psi_star, lam, units, order=1)[1]

    return expect_under_true(f, true_model, method)


def neyman_score(info: InfoPair, score_psi, score_lambda):
    """Score for psi with its regression on the lambda score removed.

    Returns ``score_psi - w' score_lambda`` with ``w = i_lamlam^{-1} i_lampsi``.
    Works row-wise when the scores are arrays over units.

    Raises:
        NumericalFailureError: ``i_lamlam`` is singular.
    """
    s_lam = np.asarray(score_lambda, dtype=float)
    if info.i.shape[0] == 1:
        return np.asarray(score_psi, dtype=float)
    ill = info.i_lamlam
    eig = np.linalg.eigvalsh(0.5 * (ill + ill.T))
    if np.min(np.abs(eig)) <= 1e-13 * max(1.0, float(np.max(np.abs(eig)))):
        raise NumericalFailureError("nuisance information block is singular",
                                    smallest_eigenvalue=float(eig[np.argmin(np.abs(eig))]))
    w = np.linalg.solve(ill, info.i_psilam)
    return np.asarray(score_psi, dtype=float) - s_lam @ w


def probability_limit(true_model, assumed, init, method="quadrature", tol: float = 1e-10, max_iter: int = 50):
    """Solve the limiting score equation ``E_m[grad l(psi, lambda)] = 0``.

    Newton iterations on expected scores and informations under the truth,
    on the log scale for positive parameters.

    Returns:
        The natural-scale parameter vector ``(psi_m, lambda_m)``.
    """
    pos = np.array(assumed.positive, dtype=bool)
    th = np.asarray(init, dtype=float)
    eta = np.where(pos, np.log(np.where(pos, th, 1.0)), th)
    for it in range(max_iter):
        th = np.where(pos, np.exp(np.where(pos, eta, 0.0)), eta)
        g, i, _, _, _, _ = expected_moments(true_model, assumed, th[0], th[1:], method)
        if np.max(np.abs(g)) < tol:
            return th
        jac = np.where(pos, th, 1.0)
        h_eta = -i * np.outer(jac, jac) + np.diag(np.where(pos, g * th, 0.0))
        step = np.linalg.solve(-h_eta, g * jac)
        step = step * min(1.0, 1.0 / max(np.max(np.abs(step)), 1e-300))
        eta = eta + step
    raise NumericalFailureError("limit equation did not converge", last_residual=float(np.max(np.abs(g))))


# ---------------------------------------------------------------------------
# Ratio baseline


def ratio_baseline_fit(data: PairData, tol: float = 1e-10, max_iter: int = 100) -> FitResult:
    """Fit psi from the ratios ``z = r1 y1 / (r0 y0)`` alone.

    Under exponential pairs with rates ``(gamma psi, gamma / psi)`` the ratio
    has survival function ``1/(1 + psi^2 z)`` whatever gamma is, hence density
    ``psi^2/(1 + psi^2 z)^2``. The log-likelihood is concave in ``log psi``
    and is maximized by Newton's method.

    Raises:
        InvalidArgumentError: a nonpositive observation.
    """
    y1, y0 = np.asarray(data.y1, float), np.asarray(data.y0, float)
    if np.any(y1 <= 0) or np.any(y0 <= 0):
        raise InvalidArgumentError("data", "ratio baseline needs strictly positive observations")
    z = (data.r1 * y1) / (data.r0 * y0)
    n = z.size
    eta = -0.5 * np.log(np.median(z))
    converged = False
    for it in range(max_iter + 1):
        psi2 = np.exp(2.0 * eta)
        w = psi2 * z / (1.0 + psi2 * z)
        grad_eta = 2.0 * n - 4.0 * w.sum()
        psi = float(np.exp(eta))
        if abs(grad_eta / psi) <= tol:
            converged = True
            break
        if it == max_iter:
            break
        eta += grad_eta / (8.0 * np.sum(w * (1.0 - w)))
    psi = float(np.exp(eta))
    psi2 = psi * psi
    w = psi2 * z / (1.0 + psi2 * z)
    ll = float(n * 2.0 * np.log(psi) - 2.0 * np.sum(np.log1p(psi2 * z)))
    unit_score = (2.0 - 4.0 * w) / psi
    # d2/dpsi2 of 2 log psi - 2 log(1 + psi^2 z)
    hess = float(np.sum(-2.0 / psi2 - 4.0 * z / (1.0 + psi2 * z) + 8.0 * psi2 * z * z / (1.0 + psi2 * z) ** 2))
    info = np.array([[-hess]])
    cov = np.array([[np.sum(unit_score**2) / hess**2]])
    return FitResult(psi, np.zeros(0), ll, info, cov, it, converged and -hess > 0,
                     float(abs(unit_score.sum())), ("psi",), n)
