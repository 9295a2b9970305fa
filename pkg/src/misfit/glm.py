"""Canonical-link generalized linear models with misspecified components.

Three situations are covered, all sharing one log-likelihood form
``sum_i {y_i eta_i - K(eta_i)} / phi_i + h(y_i; phi_i)``:

* dispersion misspecification, where ``phi_i`` is modelled as a constant or
  a log-linear function of covariates while the truth differs;
* omitted covariates, where the truth uses ``(X, W)`` and the fit uses ``X``;
* overstratification, where the fit adds ``W`` columns whose true
  coefficients are zero.

The assumed models expose the same interface as the random-effects models in
:mod:`misfit.mixture`, so :func:`misfit.inference.fit_mle` and the condition
checkers apply unchanged. The interest parameter is one designated
coefficient; the remaining coefficients and any dispersion parameters form
the nuisance vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from .errors import InvalidArgumentError, NumericalFailureError
from .inference import FitResult, SolverOptions, fit_mle
from .quadrature import standard_normal_rule

GLM_FAMILIES = ("linear", "logistic", "poisson")
DISPERSION_MODELS = ("fixed", "constant", "loglinear")


def cumulant(family: str, eta, order: int = 0):
    """Cumulant function ``K`` of a canonical GLM family and its derivatives.

    Returns:
        ``K(eta)`` for order 0, ``K'`` for 1 and ``K''`` for 2.
    """
    eta = np.asarray(eta, dtype=float)
    if family == "linear":
        return (0.5 * eta**2, eta, np.ones_like(eta))[order]
    if family == "logistic":
        if order == 0:
            return np.logaddexp(0.0, eta)
        p = special.expit(eta)
        return p if order == 1 else p * (1.0 - p)
    if family == "poisson":
        return np.exp(eta)
    raise InvalidArgumentError("family", f"unknown GLM family {family!r}")


@dataclass(frozen=True)
class GlmData:
    """Outcomes with included (X), candidate extra (W) and dispersion (V) covariates."""

    y: np.ndarray
    X: np.ndarray
    W: np.ndarray | None = None
    V: np.ndarray | None = None

    def __len__(self) -> int:
        return int(np.asarray(self.y).shape[0])

    def take(self, idx) -> "GlmData":
        pick = lambda a: None if a is None else np.asarray(a)[idx]
        return GlmData(np.asarray(self.y)[idx], np.asarray(self.X)[idx], pick(self.W), pick(self.V))


def make_design(n: int, rng, rho: float = 0.5, orthogonal: bool = False, intercept: bool = True,
                n_extra: int = 1):
    """Standardized covariate design.

    Args:
        n: rows.
        rng: numpy Generator.
        rho: correlation of each extra column with the included covariate.
        orthogonal: make the extra columns exactly orthogonal in-sample to the
            included columns (residualize them on X).
        intercept: prepend a column of ones to X.
        n_extra: number of extra (W) columns.

    Returns:
        ``(X, W, v)`` where ``v`` is an independent covariate for dispersion
        models.
    """
    if n < 2:
        raise InvalidArgumentError("n", "need at least two rows")
    if not -1.0 < rho < 1.0:
        raise InvalidArgumentError("rho", "correlation must lie in (-1, 1)")
    x = rng.standard_normal(n)
    z = rng.standard_normal((n, n_extra))
    v = rng.standard_normal(n)
    W = rho * x[:, None] + np.sqrt(1.0 - rho**2) * z
    X = np.column_stack([np.ones(n), x]) if intercept else x[:, None]
    if orthogonal:
        W = W - X @ np.linalg.lstsq(X, W, rcond=None)[0]
    return X, W, v


def _dispersion_columns(v, n):
    return np.column_stack([np.ones(n), np.zeros(n) if v is None else np.asarray(v, dtype=float)])


@dataclass(frozen=True)
class GlmTruth:
    """Fixed-design data-generating GLM.

    Attributes:
        family: "linear", "logistic" or "poisson".
        X, W: included and extra covariates.
        psi_star: true coefficients on X.
        lambda_star: true coefficients on W.
        dispersion: per-row true dispersion (linear only; ones otherwise).
        V: dispersion covariate carried into sampled data.
        interest_column: column of X whose coefficient is the interest
            parameter.
    """

    family: str
    X: np.ndarray
    W: np.ndarray | None
    psi_star: np.ndarray
    lambda_star: np.ndarray
    dispersion: np.ndarray
    V: np.ndarray | None = None
    interest_column: int = -1

    exact_outer = True

    def __post_init__(self):
        if self.family not in GLM_FAMILIES:
            raise InvalidArgumentError("family", f"unknown GLM family {self.family!r}")
        if self.family != "linear" and np.any(np.asarray(self.dispersion) != 1.0):
            raise InvalidArgumentError("dispersion", "only the linear family has a free dispersion")

    @property
    def psi_interest(self) -> float:
        return float(np.asarray(self.psi_star)[self.interest_column])

    @property
    def eta(self) -> np.ndarray:
        eta = np.asarray(self.X) @ np.asarray(self.psi_star, dtype=float)
        if self.W is not None and np.size(self.lambda_star):
            eta = eta + np.asarray(self.W) @ np.asarray(self.lambda_star, dtype=float)
        return eta

    def sample(self, n, rng) -> GlmData:
        """Outcomes for the stored design (``n`` must equal its row count)."""
        eta = self.eta
        if int(n) != eta.size:
            raise InvalidArgumentError("n", "fixed-design truth samples exactly one outcome per row")
        if self.family == "linear":
            y = eta + np.sqrt(self.dispersion) * rng.standard_normal(eta.size)
        elif self.family == "logistic":
            y = (rng.random(eta.size) < special.expit(eta)).astype(float)
        else:
            y = rng.poisson(np.exp(eta)).astype(float)
        return GlmData(y, self.X, self.W, self.V)

    def quadrature_units(self, outer_coarse: bool = False, inner_coarse: bool = False):
        """Outcome nodes for every design row, weights averaging over rows."""
        eta = self.eta
        n = eta.size
        if self.family == "linear":
            z, w = standard_normal_rule(14 if inner_coarse else 20)
            y = eta[:, None] + np.sqrt(self.dispersion)[:, None] * z[None, :]
            wt = np.broadcast_to(w, y.shape) / n
            rows = np.repeat(np.arange(n), z.size)
            return self._units(y.ravel(), rows), wt.ravel()
        if self.family == "logistic":
            p = special.expit(eta)
            y = np.concatenate([np.zeros(n), np.ones(n)])
            rows = np.concatenate([np.arange(n), np.arange(n)])
            return self._units(y, rows), np.concatenate([1.0 - p, p]) / n
        tail = 1e-9 if inner_coarse else 1e-13
        mu = np.exp(eta)
        lo = stats.poisson.ppf(tail, mu).astype(int)
        hi = stats.poisson.isf(tail, mu).astype(int) + 2
        width = hi - lo + 1
        rows = np.repeat(np.arange(n), width)
        y = np.repeat(lo, width) + np.arange(width.sum()) - np.repeat(np.cumsum(width) - width, width)
        w = stats.poisson.pmf(y, mu[rows])
        sums = np.bincount(rows, weights=w, minlength=n)
        return self._units(y.astype(float), rows), w / sums[rows] / n

    def _units(self, y, rows):
        pick = lambda a: None if a is None else np.asarray(a)[rows]
        return GlmData(y, np.asarray(self.X)[rows], pick(self.W), pick(self.V))


@dataclass(frozen=True)
class GlmAssumed:
    """Assumed canonical GLM.

    Attributes:
        family: "linear", "logistic" or "poisson".
        use_extra: include the W columns (overstratified fit).
        dispersion: "fixed" (phi = ``fixed_dispersion``), "constant" (one
            free phi) or "loglinear" (``log phi_i = a + b v_i``). Only the
            linear family may use a free dispersion.
        fixed_dispersion: phi for the "fixed" model.
        interest_column: column of X whose coefficient is the interest.
    """

    family: str = "linear"
    use_extra: bool = False
    dispersion: str = "fixed"
    fixed_dispersion: float = 1.0
    interest_column: int = -1
    n_x: int = 2
    n_w: int = 1

    closed_form = None

    def __post_init__(self):
        if self.family not in GLM_FAMILIES:
            raise InvalidArgumentError("family", f"unknown GLM family {self.family!r}")
        if self.dispersion not in DISPERSION_MODELS:
            raise InvalidArgumentError("dispersion", f"unknown dispersion model {self.dispersion!r}")
        if self.family != "linear" and self.dispersion != "fixed":
            raise InvalidArgumentError("dispersion", "only the linear family has a free dispersion")
        if not self.fixed_dispersion > 0:
            raise InvalidArgumentError("fixed_dispersion", "must be > 0")
        if not -self.n_x <= self.interest_column < self.n_x:
            raise InvalidArgumentError("interest_column", "outside the X columns")

    @property
    def _order(self):
        """Coefficient indices of the stacked (X, W) design, interest first."""
        k = self.interest_column % self.n_x
        rest = [j for j in range(self.n_x) if j != k]
        extra = list(range(self.n_x, self.n_x + self.n_w)) if self.use_extra else []
        return [k] + rest + extra

    @property
    def n_coef(self) -> int:
        return self.n_x + (self.n_w if self.use_extra else 0)

    @property
    def n_disp(self) -> int:
        return {"fixed": 0, "constant": 1, "loglinear": 2}[self.dispersion]

    @property
    def param_names(self):
        names = [f"x{j}" for j in range(self.n_x)] + [f"w{j}" for j in range(self.n_w)]
        out = [names[j] for j in self._order]
        if self.dispersion == "constant":
            out.append("dispersion")
        elif self.dispersion == "loglinear":
            out += ["log_dispersion_0", "log_dispersion_1"]
        return tuple(out)

    @property
    def positive(self):
        return tuple([False] * self.n_coef + ([True] if self.dispersion == "constant" else [False] * self.n_disp))

    def design(self, data: GlmData) -> np.ndarray:
        """Stacked design with columns in parameter order."""
        Z = np.asarray(data.X, dtype=float)
        if self.use_extra:
            if data.W is None:
                raise InvalidArgumentError("data", "overstratified fit needs W columns")
            Z = np.column_stack([Z, np.asarray(data.W, dtype=float)])
        return Z[:, self._order]

    def validate_data(self, data: GlmData):
        X = np.asarray(data.X)
        if X.ndim != 2 or X.shape[1] != self.n_x:
            raise InvalidArgumentError("data", f"X must have {self.n_x} columns")
        if self.use_extra and (data.W is None or np.asarray(data.W).shape[1] != self.n_w):
            raise InvalidArgumentError("data", f"W must have {self.n_w} columns")
        y = np.asarray(data.y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InvalidArgumentError("data", "outcomes must be finite")
        if self.family == "logistic" and np.any((y != 0) & (y != 1)):
            raise InvalidArgumentError("data", "logistic outcomes must be 0 or 1")
        if self.family == "poisson" and np.any((y < 0) | (y != np.floor(y))):
            raise InvalidArgumentError("data", "Poisson outcomes must be nonnegative integers")
        if self.dispersion == "loglinear" and data.V is None:
            raise InvalidArgumentError("data", "log-linear dispersion needs the V covariate")

    def split(self, psi, lam):
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        beta = np.concatenate([[psi], lam[: self.n_coef - 1]])
        return beta, lam[self.n_coef - 1:]

    def derivs(self, psi, lam, data: GlmData, order: int = 2):
        """Per-row log-likelihood, gradient and Hessian over ``(psi, lambda)``."""
        beta, disp = self.split(psi, lam)
        Z = self.design(data)
        y = np.asarray(data.y, dtype=float)
        eta = Z @ beta
        p, kb = beta.size + disp.size, beta.size
        if self.family == "linear":
            if self.dispersion == "loglinear":
                Vd = _dispersion_columns(data.V, y.size)
                prec = np.exp(-(Vd @ disp))
                logphi = Vd @ disp
            else:
                phi = disp[0] if self.dispersion == "constant" else self.fixed_dispersion
                if not phi > 0:
                    raise InvalidArgumentError("dispersion", "must be > 0")
                prec = np.full(y.size, 1.0 / phi)
                logphi = np.full(y.size, np.log(phi))
            r = y - eta
            ll = -0.5 * r**2 * prec - 0.5 * (logphi + np.log(2.0 * np.pi))
            if order == 0:
                return (ll,)
            grad = np.zeros((y.size, p))
            grad[:, :kb] = (r * prec)[:, None] * Z
            if self.dispersion == "constant":
                grad[:, kb] = 0.5 * r**2 * prec**2 - 0.5 * prec
            elif self.dispersion == "loglinear":
                grad[:, kb:] = (0.5 * r**2 * prec - 0.5)[:, None] * Vd
            if order == 1:
                return ll, grad
            hess = np.zeros((y.size, p, p))
            hess[:, :kb, :kb] = -prec[:, None, None] * Z[:, :, None] * Z[:, None, :]
            if self.dispersion == "constant":
                cross = -(r * prec**2)[:, None] * Z
                hess[:, :kb, kb] = cross
                hess[:, kb, :kb] = cross
                hess[:, kb, kb] = -r**2 * prec**3 + 0.5 * prec**2
            elif self.dispersion == "loglinear":
                cross = -(r * prec)[:, None, None] * Z[:, :, None] * Vd[:, None, :]
                hess[:, :kb, kb:] = cross
                hess[:, kb:, :kb] = np.swapaxes(cross, 1, 2)
                hess[:, kb:, kb:] = -(0.5 * r**2 * prec)[:, None, None] * Vd[:, :, None] * Vd[:, None, :]
            return ll, grad, hess
        scale = 1.0 / self.fixed_dispersion
        ll = scale * (y * eta - cumulant(self.family, eta))
        if self.family == "poisson":
            ll = ll - special.gammaln(y + 1.0)
        if order == 0:
            return (ll,)
        grad = (scale * (y - cumulant(self.family, eta, 1)))[:, None] * Z
        if order == 1:
            return ll, grad
        hess = -(scale * cumulant(self.family, eta, 2))[:, None, None] * Z[:, :, None] * Z[:, None, :]
        return ll, grad, hess

    def loglik(self, psi, lam, data) -> float:
        return float(np.sum(self.derivs(psi, lam, data, order=0)[0]))

    def initial_values(self, data: GlmData):
        Z = self.design(data)
        y = np.asarray(data.y, dtype=float)
        if self.family == "linear":
            beta = np.linalg.lstsq(Z, y, rcond=None)[0]
            s2 = max(float(np.mean((y - Z @ beta) ** 2)), 1e-8)
        else:
            beta = np.zeros(Z.shape[1])
            s2 = 1.0
        extra = {"fixed": [], "constant": [s2], "loglinear": [np.log(s2), 0.0]}[self.dispersion]
        return np.concatenate([beta, extra])

    def truth_at(self, psi, lam, reference: GlmTruth) -> GlmTruth:
        """The assumed model's own law at (psi, lambda) on the reference design."""
        beta, disp = self.split(psi, lam)
        inv = np.argsort(self._order)
        full = beta[inv]
        X = np.asarray(reference.X)
        n = X.shape[0]
        if self.family != "linear":
            phi = np.ones(n)
        elif self.dispersion == "constant":
            phi = np.full(n, disp[0])
        elif self.dispersion == "loglinear":
            phi = np.exp(_dispersion_columns(reference.V, n) @ disp)
        else:
            phi = np.full(n, self.fixed_dispersion)
        psi_x = full[: self.n_x]
        lam_w = full[self.n_x:] if self.use_extra else np.zeros(0)
        W = reference.W if self.use_extra else None
        return GlmTruth(self.family, X, W, psi_x, lam_w, phi, reference.V, self.interest_column)

    def own_law(self, psi, lam, reference=None):
        if not isinstance(reference, GlmTruth):
            raise InvalidArgumentError("reference", "GLM own law needs a reference design")
        return self.truth_at(psi, lam, reference)


def separation_margin(y, Z) -> float:
    """Largest total margin ``sum_i s_i z_i^T b`` over directions keeping every ``s_i z_i^T b >= 0``.

    With ``s_i = 2 y_i - 1`` and ``|b_j| <= 1``, a positive value means the
    outcomes are (quasi-)completely separated by a linear predictor, in
    which case the logistic maximum likelihood estimate does not exist.
    """
    s = 2.0 * np.asarray(y, dtype=float) - 1.0
    A = s[:, None] * np.asarray(Z, dtype=float)
    res = optimize.linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(A.shape[0]),
                           bounds=[(-1.0, 1.0)] * A.shape[1], method="highs")
    if res.status != 0:
        return 0.0
    return float(-res.fun)


def glm_fit(assumed: GlmAssumed, data: GlmData, init=None, opts: SolverOptions | None = None) -> FitResult:
    """Newton fit of an assumed GLM.

    Raises:
        InvalidArgumentError: rank-deficient design or malformed data.
        NumericalFailureError: separated logistic data, with the separating
            margin in the diagnostics.
    """
    assumed.validate_data(data)
    Z = assumed.design(data)
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise InvalidArgumentError("design", "design matrix is not of full column rank")
    if assumed.family == "logistic":
        margin = separation_margin(data.y, Z)
        if margin > 1e-7:
            raise NumericalFailureError("logistic outcomes are separated; the estimate does not exist",
                                        separation_margin=margin)
    opts = opts or SolverOptions(multistart=False)
    return fit_mle(assumed, data, init=init, opts=opts)


def least_squares(data: GlmData, assumed: GlmAssumed) -> np.ndarray:
    """Ordinary least squares coefficients in the assumed model's parameter order."""
    Z = assumed.design(data)
    return np.linalg.lstsq(Z, np.asarray(data.y, dtype=float), rcond=None)[0]
