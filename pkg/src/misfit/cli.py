"""Command-line front end: ``misfit {check,fit,simulate,orthogonalize}``.

Every subcommand reads a scenario config file (``--config``). When ``--out``
is given, ``manifest.json`` is written to the output directory before any
result file and rewritten with the end timestamp when the run finishes.

Exit codes: 0 success, 1 invalid arguments or config, 2 numerical failure,
3 an ``--expect`` expectation contradicted by a verdict.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import conditions as cond
from . import config as cfg
from . import scenarios as sc
from .errors import InvalidArgumentError, NumericalFailureError
from .glm import GlmAssumed, GlmData
from .inference import expected_moments
from .mixture import ClosedForm, PairData, exponential_gamma_information

log = logging.getLogger("misfit")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_EXPECTATION = 0, 1, 2, 3
SUMMARY_KEYS = ("scenario", "n", "reps", "seed", "mean_psi_hat", "bias", "sd", "mean_sandwich_se", "verdicts",
                "degraded")
_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting with status 2."""

    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _json_num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class _Manifest:
    """Run manifest: config digest, seed, version, timestamps and outputs."""

    def __init__(self, out: Path | None, command: str, config: cfg.ScenarioConfig, config_path: str):
        self.out = out
        self.data = {"command": command, "config_path": str(config_path), "config_digest": cfg.digest(config),
                     "seed": config.seed, "version": __version__, "start": _now(), "end": None, "outputs": []}

    def begin(self, outputs):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        self.data["outputs"] = [str(self.out / name) for name in outputs]
        self._write()

    def finish(self, status: str):
        if self.out is None:
            return
        self.data["end"] = _now()
        self.data["status"] = status
        self._write()

    def _write(self):
        (self.out / "manifest.json").write_text(json.dumps(self.data, indent=2) + "\n", encoding="utf-8")


def _build_parser() -> _Parser:
    p = _Parser(prog="misfit", description="Consistency checks and simulations for misspecified nuisance models.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True, reps=False, threads=False, expect=False):
        sp.add_argument("--config", required=True, help="scenario config file (key = value lines)")
        sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="override scenario.seed")
        if reps:
            sp.add_argument("--reps", type=int, help="override scenario.reps")
        if threads:
            sp.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
        if expect:
            sp.add_argument("--expect", choices=("holds", "fails", "any"), default="any",
                            help="exit 3 when a verdict contradicts this expectation")

    common(sub.add_parser("check", help="run the condition checkers and print a verdict table"),
           expect=True)
    sp = sub.add_parser("fit", help="fit the assumed model to one data file")
    common(sp)
    sp.add_argument("--data", required=True, help="CSV with y1,y0[,r1,r0] or y,x0..,w0..[,v] columns")
    common(sub.add_parser("simulate", help="Monte Carlo study of a scenario"), reps=True, threads=True,
           expect=True)
    sp = sub.add_parser("orthogonalize", help="solve the orthogonalizing path for the assumed model")
    common(sp, seed=False)
    sp.add_argument("--phi0", help="comma-separated starting point (interest first)")
    sp.add_argument("--psi-grid", help="comma-separated ordered interest values")
    return p


def _load_config(args) -> cfg.ScenarioConfig:
    c = cfg.load(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        changes["reps"] = args.reps
    return replace(c, **changes) if changes else c


def _expectation_met(expect: str, verdicts) -> bool:
    verdicts = list(verdicts)
    if expect == "holds":
        return cond.Verdict.FAILS not in verdicts
    if expect == "fails":
        return cond.Verdict.FAILS in verdicts
    return True


def _conditions_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "lambda_point", "residual", "error_estimate", "verdict"])
    for c, rep in reports.items():
        for label, r, e, v in rep.rows():
            w.writerow([c.value, label, _num(r), _num(e), v.value])
    return buf.getvalue()


def _verdict_table(reports: dict) -> str:
    lines = [f"{'condition':<20} {'verdict':<13} {'max|residual|':>14} {'tolerance':>10}  points"]
    for c, rep in reports.items():
        lines.append(f"{c.value:<20} {rep.verdict.value:<13} {rep.max_abs_residual:>14.3e} "
                     f"{rep.tolerance:>10.1e}  {len(rep.grid)}")
        for note in rep.notes:
            lines.append(f"  note: {note}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_check(args) -> int:
    c = _load_config(args)
    out = Path(args.out) if args.out else None
    man = _Manifest(out, "check", c, args.config)
    man.begin(["conditions.csv"])
    reports = sc.scenario_conditions(c)
    if out is not None:
        (out / "conditions.csv").write_text(_conditions_csv(reports), encoding="utf-8")
    sys.stdout.write(_verdict_table(reports))
    man.finish("ok")
    met = _expectation_met(args.expect, [r.verdict for r in reports.values()])
    return EXIT_OK if met else EXIT_EXPECTATION


def _estimates_csv(report: sc.MonteCarloReport) -> str:
    k = len(report.param_names) - 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep", "psi_hat"] + [f"lambda_hat_{j + 1}" for j in range(k)] + ["converged", "sandwich_se"])
    for r in report.records:
        lam = list(r.lambda_hat) + [float("nan")] * (k - len(r.lambda_hat))
        w.writerow([r.rep, _num(r.psi_hat)] + [_num(x) for x in lam[:k]]
                   + ["true" if r.converged else "false", _num(r.sandwich_se)])
    return buf.getvalue()


def _extras_csv(report: sc.MonteCarloReport) -> str:
    names = sorted({name for r in report.records for name, _ in r.extras})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep"] + names)
    for r in report.records:
        w.writerow([r.rep] + [_num(r.extra(name)) for name in names])
    return buf.getvalue()


def _summary(report: sc.MonteCarloReport) -> dict:
    s, c = report.summary, report.config
    out = {"scenario": c.scenario.value, "n": c.n, "reps": c.reps, "seed": c.seed,
           "mean_psi_hat": _json_num(s["mean"]), "bias": _json_num(s["bias"]), "sd": _json_num(s["sd"]),
           "mean_sandwich_se": _json_num(s["mean_sandwich_se"]), "verdicts": report.verdicts,
           "degraded": report.degraded}
    assert tuple(out) == SUMMARY_KEYS
    return out


def _details(report: sc.MonteCarloReport) -> dict:
    s = report.summary
    return {"target": _json_num(report.target), "se_mean": _json_num(s["se_mean"]),
            "bias_se_ratio": _json_num(s["bias_se_ratio"]), "n_converged": s["n_converged"],
            "n_failed": s["n_failed"], "param_names": list(report.param_names),
            "extras": {k: {kk: _json_num(vv) for kk, vv in v.items()} for k, v in s["extras"].items()}}


def _cmd_simulate(args) -> int:
    c = _load_config(args)
    if args.threads is not None and args.threads < 1:
        raise InvalidArgumentError("--threads", "must be >= 1")
    out = Path(args.out) if args.out else None
    man = _Manifest(out, "simulate", c, args.config)
    man.begin(["estimates.csv", "extras.csv", "summary.json", "details.json", "conditions.csv"])
    report = sc.run_scenario(c, threads=args.threads, check_conditions=True)
    summary = _summary(report)
    if out is not None:
        (out / "estimates.csv").write_text(_estimates_csv(report), encoding="utf-8")
        (out / "extras.csv").write_text(_extras_csv(report), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        (out / "details.json").write_text(json.dumps(_details(report), indent=2) + "\n", encoding="utf-8")
        (out / "conditions.csv").write_text(_conditions_csv(report.conditions), encoding="utf-8")
    s = report.summary
    sys.stdout.write(f"scenario {c.scenario.value}: n={c.n} reps={c.reps} seed={c.seed}\n"
                     f"target {report.target:.6g}  mean {s['mean']:.6g}  bias {s['bias']:.3e}  "
                     f"bias/SE {s['bias_se_ratio']:.2f}  sd {s['sd']:.4g}  "
                     f"mean sandwich SE {s['mean_sandwich_se']:.4g}  failed {s['n_failed']}\n")
    sys.stdout.write(_verdict_table(report.conditions))
    man.finish("degraded" if report.degraded else "ok")
    met = _expectation_met(args.expect, [r.verdict for r in report.conditions.values()])
    return EXIT_OK if met else EXIT_EXPECTATION


def _read_table(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if line.strip() and not line.lstrip().startswith("#")))
    if len(rows) < 2:
        raise InvalidArgumentError("--data", "need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    try:
        body = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise InvalidArgumentError("--data", f"non-numeric entry: {exc}") from None
    if body.ndim != 2 or body.shape[1] != len(header):
        raise InvalidArgumentError("--data", "every row must have one value per header column")
    return {h: body[:, j] for j, h in enumerate(header)}


def _columns(table: dict, prefix: str):
    names = sorted((h for h in table if h.startswith(prefix) and h[len(prefix):].isdigit()),
                   key=lambda h: int(h[len(prefix):]))
    return np.column_stack([table[h] for h in names]) if names else None


def _fit_data(setup, table: dict):
    if isinstance(setup.assumed, GlmAssumed):
        if "y" not in table:
            raise InvalidArgumentError("--data", "GLM data needs a y column")
        X, W = _columns(table, "x"), _columns(table, "w")
        if X is None:
            raise InvalidArgumentError("--data", "GLM data needs x0, x1, ... columns")
        return GlmData(table["y"], X, W, table.get("v"))
    for col in ("y1", "y0"):
        if col not in table:
            raise InvalidArgumentError("--data", f"pair data needs a {col} column")
    return PairData.build(table["y1"], table["y0"], table.get("r1", 1.0), table.get("r0", 1.0))


def _cmd_fit(args) -> int:
    c = _load_config(args)
    out = Path(args.out) if args.out else None
    man = _Manifest(out, "fit", c, args.config)
    man.begin(["fit.csv"])
    setup = sc.build_setup(c)
    data = _fit_data(setup, _read_table(args.data))
    res = setup.fit(data)
    se = (np.sqrt(np.clip(np.diag(res.sandwich_cov), 0.0, None)) if res.sandwich_cov is not None
          else np.full(res.params.size, np.nan))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "estimate", "sandwich_se"])
    for name, est, s in zip(res.param_names, res.params, se):
        w.writerow([name, _num(est), _num(s)])
    if out is not None:
        (out / "fit.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    sys.stdout.write(f"n={res.n} loglik={_num(res.loglik)} converged={str(res.converged).lower()} "
                     f"iterations={res.iterations}\n")
    man.finish("ok" if res.converged else "not_converged")
    if not res.converged:
        raise NumericalFailureError("fit did not converge", gradient_norm=res.gradient_norm)
    return EXIT_OK


def _floats(flag: str, text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidArgumentError(flag, f"expected comma-separated numbers, got {text!r}") from None


def info_function(setup):
    """Expected information of the assumed model under its own law, as a function of phi."""
    a = setup.assumed
    if not isinstance(a, GlmAssumed) and a.closed_form is ClosedForm.EXPONENTIAL_GAMMA:
        keep = np.concatenate([[0], 1 + a.free_index])

        def exact(phi):
            fam = a.family_at(phi[1:])
            i = exponential_gamma_information(a.cond.symmetric, phi[0], fam.shape, fam.rate)
            return i[np.ix_(keep, keep)]

        return exact

    def by_quadrature(phi):
        law = a.own_law(phi[0], phi[1:], setup.truth)
        return expected_moments(law, a, phi[0], phi[1:])[1]

    return by_quadrature


def _default_phi0(setup):
    a = setup.assumed
    if isinstance(a, GlmAssumed):
        lam = setup.lambda_grid[0]
    else:
        lam = tuple(np.asarray(a.family.params, dtype=float)[a.free_index])
    return [setup.target] + list(lam)


def _cmd_orthogonalize(args) -> int:
    c = _load_config(args)
    out = Path(args.out) if args.out else None
    man = _Manifest(out, "orthogonalize", c, args.config)
    man.begin(["orthogonal_path.csv"])
    setup = sc.build_setup(c)
    phi0 = _floats("--phi0", args.phi0) if args.phi0 else _default_phi0(setup)
    if len(phi0) != len(setup.assumed.param_names):
        raise InvalidArgumentError("--phi0", f"need {len(setup.assumed.param_names)} values "
                                             f"({', '.join(setup.assumed.param_names)})")
    grid = _floats("--psi-grid", args.psi_grid) if args.psi_grid else list(phi0[0] * np.linspace(1.0, 2.0, 6))
    if any(b <= a for a, b in zip(grid, grid[1:])) and any(b >= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgumentError("--psi-grid", "values must be strictly ordered")
    path = cond.orthogonalize(info_function(setup), phi0, grid)
    names = setup.assumed.param_names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["psi"] + [f"lambda_{n}" for n in names[1:]] + ["max_abs_cross_info"])
    for row, cross in zip(path.rows(), path.cross_info):
        w.writerow([_num(x) for x in row] + [_num(np.max(np.abs(cross)))])
    if out is not None:
        (out / "orthogonal_path.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    man.finish("ok")
    return EXIT_OK


_COMMANDS = {"check": _cmd_check, "fit": _cmd_fit, "simulate": _cmd_simulate, "orthogonalize": _cmd_orthogonalize}


def _configure_logging():
    name = os.environ.get("MISFIT_LOG", "error").strip().lower()
    level = _LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("misfit").setLevel(level)
    if name not in _LOG_LEVELS:
        log.error("MISFIT_LOG=%r not in {error, info, debug}; using error", name)


def main(argv=None) -> int:
    """Run the command line; returns the process exit code."""
    _configure_logging()
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    try:
        return _COMMANDS[args.command](args)
    except (InvalidArgumentError, OSError) as exc:
        sys.stderr.write(f"misfit: invalid input: {exc}\n")
        return EXIT_INVALID
    except (NumericalFailureError, np.linalg.LinAlgError, FloatingPointError) as exc:
        sys.stderr.write(f"misfit: numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
