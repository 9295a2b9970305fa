"""Monte Carlo studies of the worked examples, with condition-check cross references.

:func:`run_scenario` draws ``reps`` independent data sets, fits the assumed
model to each and summarizes the estimates against the scenario's target.
Replication ``k`` always uses the ``k``-th child of ``SeedSequence(seed)``, so
records do not depend on the number of worker threads. GLM designs are
drawn once per scenario from a separate stream and held fixed across
replications.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import conditions as cond
from .config import GLM_SCENARIOS, PAIR_SCENARIOS, Scenario, ScenarioConfig
from .errors import InvalidArgumentError, NumericalFailureError
from .glm import GlmAssumed, GlmTruth, glm_fit, least_squares, make_design
from .groups import (antisymmetry_conditions, circle_points, halton_points, symmetry_residual,
                     vonmises_rotation_model)
from .inference import SolverOptions, fit_mle, ratio_baseline_fit
from .mixture import AssumedModel, ExpPairs, MonteCarlo, NormalPairs, PairData, PoissonPairs, TrueModel

log = logging.getLogger(__name__)

DEGRADED_FRACTION = 0.05
_DESIGN_TAG = 0x6D15F17


@dataclass(frozen=True)
class ReplicationRecord:
    """One replication: estimates, convergence, sandwich SE and scenario extras."""

    rep: int
    psi_hat: float
    lambda_hat: tuple
    converged: bool
    sandwich_se: float
    loglik: float = float("nan")
    iterations: int = 0
    extras: tuple = ()
    error: str = ""

    def extra(self, name: str, default=float("nan")) -> float:
        return dict(self.extras).get(name, default)


def summarize(records, target: float) -> dict:
    """Summary statistics over converged records (recomputable from them alone).

    Returns:
        dict with ``mean``, ``bias``, ``sd``, ``se_mean`` (``sd / sqrt(m)``),
        ``bias_se_ratio``, ``mean_sandwich_se``, ``n_converged``,
        ``n_failed`` and ``extras`` (mean and sd of each extra quantity).
    """
    recs = sorted(records, key=lambda r: r.rep)
    ok = [r for r in recs if r.converged]
    est = np.array([r.psi_hat for r in ok], dtype=float)
    m = est.size
    mean = float(est.mean()) if m else float("nan")
    sd = float(est.std(ddof=1)) if m > 1 else float("nan")
    se_mean = sd / math.sqrt(m) if m > 1 else float("nan")
    bias = mean - target
    ses = np.array([r.sandwich_se for r in ok], dtype=float)
    extras = {}
    names = sorted({k for r in ok for k, _ in r.extras})
    for name in names:
        vals = np.array([r.extra(name) for r in ok], dtype=float)
        vals = vals[np.isfinite(vals)]
        extras[name] = {"mean": float(vals.mean()) if vals.size else float("nan"),
                        "sd": float(vals.std(ddof=1)) if vals.size > 1 else float("nan"),
                        "max_abs": float(np.max(np.abs(vals))) if vals.size else float("nan")}
    return {"mean": mean, "bias": bias, "sd": sd, "se_mean": se_mean,
            "bias_se_ratio": bias / se_mean if se_mean and np.isfinite(se_mean) and se_mean > 0 else float("nan"),
            "mean_sandwich_se": float(np.nanmean(ses)) if ses.size else float("nan"),
            "n_converged": m, "n_failed": len(recs) - m, "target": target, "extras": extras}


@dataclass(frozen=True)
class MonteCarloReport:
    """Per-replication records, their summary, linked condition reports and runtime."""

    config: ScenarioConfig
    target: float
    records: tuple
    summary: dict
    conditions: dict = field(default_factory=dict)
    runtime: float = 0.0
    param_names: tuple = ()

    @property
    def degraded(self) -> bool:
        failed = sum(1 for r in self.records if not r.converged)
        return failed > DEGRADED_FRACTION * len(self.records)

    @property
    def verdicts(self) -> dict:
        return {c.value: rep.verdict.value for c, rep in self.conditions.items()}


# ---------------------------------------------------------------------------
# Scenario wiring


@dataclass(frozen=True)
class _Setup:
    truth: object
    assumed: object
    target: float
    fit: object
    lambda_grid: list
    reference: object = None


def _pair_setup(c: ScenarioConfig) -> _Setup:
    true_mix = c.true_mixing.build()
    assumed_mix = c.assumed_mixing.build()
    s = c.scenario
    if s is Scenario.NORMAL_PAIRS:
        conditional, assumed_cond, target = NormalPairs(), NormalPairs(), c.psi_star
    elif s is Scenario.POISSON_TWO_GROUP:
        conditional, assumed_cond, target = PoissonPairs(), PoissonPairs(), c.psi_star
    elif s is Scenario.EXP_PAIRS_NON_SYMMETRIC:
        conditional, assumed_cond, target = ExpPairs(True), ExpPairs(False), c.psi_star**2
    else:
        conditional, assumed_cond, target = ExpPairs(True), ExpPairs(True), c.psi_star
    truth = TrueModel(conditional, c.psi_star, true_mix, c.stratum_counts)
    assumed = AssumedModel(assumed_cond, assumed_mix, fixed=c.assumed_fixed)
    k = len(assumed.param_names) - 1
    if s is Scenario.POISSON_TWO_GROUP and k == 2 and type(assumed_mix).__name__ == "GammaMeanShape" \
            and not c.assumed_fixed:
        # mean-matched inverse mean, shape over the grid
        nu = 1.0 / float(true_mix.mean())
        grid = [(nu, w) for w in c.check.grid]
    else:
        grid = cond.default_lambda_grid(assumed, c.check.grid)
    return _Setup(truth, assumed, target, lambda d: fit_mle(assumed, d), grid)


def _glm_setup(c: ScenarioConfig) -> _Setup:
    g = c.glm
    rng = np.random.default_rng(np.random.SeedSequence([c.seed, _DESIGN_TAG]))
    X, W, v = make_design(c.n, rng, rho=g.rho, orthogonal=g.orthogonal, intercept=g.intercept,
                          n_extra=len(g.lambda_star))
    psi_x = np.array(([g.intercept_value] if g.intercept else []) + [c.psi_star])
    lam_w = np.array(g.lambda_star, dtype=float)
    if g.true_dispersion == "constant":
        phi = np.full(c.n, g.true_dispersion_params[0])
    else:
        a, b = g.true_dispersion_params
        phi = np.exp(a + b * v)
    truth = GlmTruth(g.family, X, W, psi_x, lam_w, phi, v, interest_column=-1)
    use_extra = c.scenario is Scenario.OVERSTRATIFIED
    assumed = GlmAssumed(g.family, use_extra=use_extra, dispersion=g.assumed_dispersion,
                         fixed_dispersion=g.fixed_dispersion, interest_column=-1, n_x=X.shape[1], n_w=W.shape[1])
    reference = None
    if use_extra:
        reference = GlmAssumed(g.family, use_extra=False, dispersion=g.assumed_dispersion,
                               fixed_dispersion=g.fixed_dispersion, interest_column=-1,
                               n_x=X.shape[1], n_w=W.shape[1])
    # nuisance coefficients pinned at their true values; extra and
    # dispersion coordinates run over the grid values
    pinned = [g.intercept_value] if g.intercept else []
    free = (len(g.lambda_star) if use_extra else 0) + assumed.n_disp
    grid = [tuple(pinned) + tuple(p) for p in _product(c.check.grid, free)]
    return _Setup(truth, assumed, c.psi_star, lambda d: glm_fit(assumed, d), grid, reference)


def _product(values, k):
    if k == 0:
        return [()]
    import itertools

    return [tuple(p) for p in itertools.product(values, repeat=k)]


def build_setup(c: ScenarioConfig) -> _Setup:
    if c.scenario in PAIR_SCENARIOS:
        return _pair_setup(c)
    if c.scenario in GLM_SCENARIOS:
        return _glm_setup(c)
    raise InvalidArgumentError("scenario.name", f"{c.scenario.value} fits no model; use rotation_check")


def _extras(c: ScenarioConfig, setup: _Setup, data, fit):
    s = c.scenario
    out = []
    if s is Scenario.EXP_PAIRS_SYMMETRIC:
        try:
            b = ratio_baseline_fit(data)
            out += [("baseline_psi_hat", b.psi_hat), ("baseline_se", b.sandwich_se)]
        except NumericalFailureError:
            out += [("baseline_psi_hat", float("nan")), ("baseline_se", float("nan"))]
    elif s is Scenario.NORMAL_PAIRS and np.all(data.r1 == 1) and np.all(data.r0 == 1):
        closed = (data.y1.sum() - data.y0.sum()) / (2.0 * len(data))
        out.append(("identity_gap", abs(fit.psi_hat - closed)))
    elif s is Scenario.POISSON_TWO_GROUP:
        out.append(("psi_ratio_hat", math.exp(fit.psi_hat)))
    elif s is Scenario.EXP_TWO_GROUP_MINIMA:
        scaled = PairData(data.r1 * data.y1, data.r0 * data.y0, np.ones(len(data)), np.ones(len(data)))
        alt = fit_mle(setup.assumed, scaled)
        out += [("rescaled_psi_hat", alt.psi_hat), ("rescaled_gap", abs(alt.psi_hat - fit.psi_hat))]
    elif s is Scenario.GLM_DISPERSION:
        ls = least_squares(data, setup.assumed)
        out.append(("ols_gap", float(np.max(np.abs(fit.params[: ls.size] - ls)))))
    elif s is Scenario.OVERSTRATIFIED:
        ref = glm_fit(setup.reference, data)
        out += [("reference_psi_hat", ref.psi_hat), ("reference_converged", float(ref.converged))]
    return tuple(out)


def _replicate(c: ScenarioConfig, setup: _Setup, rep: int, seq) -> ReplicationRecord:
    rng = np.random.default_rng(seq)
    data = setup.truth.sample(c.n, rng)
    k = len(setup.assumed.param_names) - 1
    try:
        fit = setup.fit(data)
        extras = _extras(c, setup, data, fit)
    except (NumericalFailureError, np.linalg.LinAlgError) as exc:
        log.info("replication %d failed: %s", rep, exc)
        return ReplicationRecord(rep, float("nan"), (float("nan"),) * k, False, float("nan"), error=str(exc))
    return ReplicationRecord(rep, fit.psi_hat, tuple(float(x) for x in fit.lambda_hat), bool(fit.converged),
                             fit.sandwich_se, fit.loglik, fit.iterations, extras)


def run_scenario(config: ScenarioConfig, threads: int | None = None, check_conditions: bool = False,
                 progress=None) -> MonteCarloReport:
    """Monte Carlo study of one scenario.

    Args:
        config: validated scenario configuration.
        threads: worker threads (``None``: one per logical core). Records
            are identical for every value.
        check_conditions: also run the condition checkers and attach their
            reports.
        progress: optional callable receiving the number of finished
            replications.

    Raises:
        InvalidArgumentError: the scenario fits no model (RotationCheck).
    """
    t0 = time.perf_counter()
    setup = build_setup(config)
    seqs = np.random.SeedSequence(config.seed).spawn(config.reps)
    workers = threads or _cores()
    if workers < 1:
        raise InvalidArgumentError("threads", "must be >= 1")

    def job(k):
        rec = _replicate(config, setup, k, seqs[k])
        if progress is not None:
            progress(k)
        return rec

    if workers == 1:
        records = [job(k) for k in range(config.reps)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, range(config.reps)))
    records = tuple(sorted(records, key=lambda r: r.rep))
    reports = scenario_conditions(config, setup) if check_conditions else {}
    report = MonteCarloReport(config, setup.target, records, summarize(records, setup.target), reports,
                              time.perf_counter() - t0, tuple(setup.assumed.param_names))
    if report.degraded:
        log.warning("scenario %s degraded: %d of %d replications did not converge", config.scenario.value,
                    report.summary["n_failed"], len(records))
    return report


def _cores() -> int:
    import os

    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def _method(c: ScenarioConfig):
    if c.check.method == "montecarlo":
        return MonteCarlo(c.check.mc_draws, c.seed)
    return "quadrature"


def scenario_conditions(config: ScenarioConfig, setup: _Setup | None = None) -> dict:
    """Condition reports for a scenario at its target.

    Returns:
        dict mapping :class:`misfit.conditions.Condition` to reports; for
        RotationCheck a single antisymmetry report.
    """
    if config.scenario is Scenario.ROTATION_CHECK:
        return {cond.Condition.ANTISYMMETRY: rotation_check(config)}
    setup = setup or build_setup(config)
    method = _method(config)
    if config.scenario in GLM_SCENARIOS and isinstance(method, MonteCarlo):
        raise InvalidArgumentError("check.method", "GLM scenarios check conditions by exact quadrature only")
    return cond.check_all(setup.truth, setup.assumed, setup.target, setup.lambda_grid,
                          config.check.tolerance, method)


def rotation_check(config: ScenarioConfig, tol: float = 1e-8) -> cond.ConditionReport:
    """Antisymmetry and symmetry residuals of the rotation pair model on a probe grid.

    Probes are Halton points in (psi, angle1, angle0, gamma) over
    ``[0, 2pi)^3 x [0, 2pi)``; a single probe sits at psi = 0 with both
    points at angle 0. Each probe contributes the a- and c-sums and the
    symmetry residual; the error estimate is the change when the
    finite-difference step is halved.
    """
    if config.scenario is not Scenario.ROTATION_CHECK:
        raise InvalidArgumentError("scenario.name", "rotation_check needs the RotationCheck scenario")
    r = config.rotation
    model = vonmises_rotation_model(r.concentration, r.arm0_power)
    two_pi = 2.0 * np.pi
    if r.probes == 1:
        probes = np.zeros((1, 4))
    else:
        probes = halton_points(r.probes, [0.0] * 4, [two_pi] * 4)
    grid, res, err = [], [], []
    for psi, t1, t0, gam in probes:
        psi = float(psi) % two_pi
        u1, u0 = circle_points([t1, t0])
        a, c = antisymmetry_conditions(model, psi, u1, u0)
        a2, c2 = antisymmetry_conditions(model, psi, u1, u0, fd_step=5e-7)
        y1, y0 = model.observations(psi, u1, u0)
        sym = symmetry_residual(model, psi, float(gam), y1, y0)
        vals = np.concatenate([np.atleast_1d(a), [c, sym]])
        errs = np.concatenate([np.abs(np.atleast_1d(a) - np.atleast_1d(a2)), [abs(c - c2), 1e-15]]) + 1e-15
        grid.append((psi, float(t1), float(t0), float(gam)))
        res.append(vals)
        err.append(errs)
    return cond._report(cond.Condition.ANTISYMMETRY, grid, ("psi", "angle1", "angle0", "gamma"), res, err, tol,
                        "quadrature")
