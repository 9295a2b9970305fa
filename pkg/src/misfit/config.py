"""Scenario configuration: typed records and a flat ``key = value`` text format.

Example file::

    # exponential matched pairs, lognormal truth
    scenario.name = ExpPairsSymmetric
    scenario.psi_star = 1.5
    scenario.n = 2000
    mixing.true.kind = lognormal
    mixing.true.log_mean = 0
    mixing.true.log_sd = 1
    mixing.assumed.kind = gamma

Keys missing from a file take the scenario's defaults. Serialization writes
every applicable key in sorted order with 17 significant digits, so parsing
a serialized config gives back an equal record and the content digest does
not depend on key order in the source file.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, replace

from .errors import InvalidArgumentError
from .families import make_family


class Scenario(enum.Enum):
    EXP_PAIRS_SYMMETRIC = "ExpPairsSymmetric"
    EXP_PAIRS_NON_SYMMETRIC = "ExpPairsNonSymmetric"
    NORMAL_PAIRS = "NormalPairs"
    POISSON_TWO_GROUP = "PoissonTwoGroup"
    EXP_TWO_GROUP_MINIMA = "ExpTwoGroupMinima"
    GLM_DISPERSION = "GlmDispersion"
    GLM_OMITTED_COVARIATE = "GlmOmittedCovariate"
    OVERSTRATIFIED = "Overstratified"
    ROTATION_CHECK = "RotationCheck"


PAIR_SCENARIOS = frozenset({Scenario.EXP_PAIRS_SYMMETRIC, Scenario.EXP_PAIRS_NON_SYMMETRIC, Scenario.NORMAL_PAIRS,
                            Scenario.POISSON_TWO_GROUP, Scenario.EXP_TWO_GROUP_MINIMA})
GLM_SCENARIOS = frozenset({Scenario.GLM_DISPERSION, Scenario.GLM_OMITTED_COVARIATE, Scenario.OVERSTRATIFIED})


@dataclass(frozen=True)
class FamilySpec:
    """A mixing family by kind and sorted ``(name, value)`` parameter pairs."""

    kind: str
    params: tuple = ()

    def build(self):
        return make_family(self.kind, dict(self.params))

    @classmethod
    def of(cls, kind: str, **params) -> "FamilySpec":
        norm = []
        for k, v in sorted(params.items()):
            norm.append((k, tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)))
        return cls(kind, tuple(norm))


@dataclass(frozen=True)
class GlmSpec:
    """Design and model choices for the GLM scenarios.

    Attributes:
        family: "linear", "logistic" or "poisson".
        intercept: include an intercept column in X.
        intercept_value: true intercept.
        rho: correlation of each W column with the included covariate.
        orthogonal: residualize W on X so the columns are exactly orthogonal.
        lambda_star: true W coefficients (one per W column).
        true_dispersion: "constant" (``params = (phi,)``) or "loglinear"
            (``params = (a, b)``, ``log phi_i = a + b v_i``).
        true_dispersion_params: see above.
        assumed_dispersion: "fixed", "constant" or "loglinear".
        fixed_dispersion: phi for the "fixed" assumed model.
    """

    family: str = "linear"
    intercept: bool = False
    intercept_value: float = 0.0
    rho: float = 0.5
    orthogonal: bool = False
    lambda_star: tuple = (0.0,)
    true_dispersion: str = "constant"
    true_dispersion_params: tuple = (1.0,)
    assumed_dispersion: str = "fixed"
    fixed_dispersion: float = 1.0


@dataclass(frozen=True)
class CheckSpec:
    """Condition-checker settings: per-coordinate grid values, tolerance and method."""

    grid: tuple = (0.5, 1.0, 2.0, 5.0)
    tolerance: float | None = None
    method: str = "quadrature"
    mc_draws: int = 200000


@dataclass(frozen=True)
class RotationSpec:
    """Probe count and action for the rotation check; ``arm0_power`` 2 perturbs the pairing."""

    probes: int = 100
    arm0_power: float = 1.0
    concentration: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run one scenario reproducibly."""

    scenario: Scenario
    psi_star: float
    n: int
    reps: int
    seed: int
    true_mixing: FamilySpec | None = None
    assumed_mixing: FamilySpec | None = None
    assumed_fixed: tuple = ()
    stratum_counts: tuple = ((1.0, 1.0),)
    glm: GlmSpec | None = None
    check: CheckSpec = field(default_factory=CheckSpec)
    rotation: RotationSpec | None = None

    def __post_init__(self):
        validate(self)


_LOGNORMAL = FamilySpec.of("lognormal", log_mean=0.0, log_sd=1.0)
_GAMMA = FamilySpec.of("gamma", shape=1.0, rate=1.0)


def default_config(scenario: Scenario) -> ScenarioConfig:
    """Defaults for a scenario; files override individual keys."""
    s = Scenario(scenario)
    base = dict(scenario=s, seed=1, check=CheckSpec())
    if s in (Scenario.EXP_PAIRS_SYMMETRIC, Scenario.EXP_PAIRS_NON_SYMMETRIC):
        return ScenarioConfig(psi_star=1.5, n=2000, reps=200, true_mixing=_LOGNORMAL, assumed_mixing=_GAMMA, **base)
    if s is Scenario.NORMAL_PAIRS:
        return ScenarioConfig(psi_star=0.5, n=500, reps=1000, true_mixing=_LOGNORMAL,
                              assumed_mixing=FamilySpec.of("normal", mean=0.0, var=1.0), **base)
    if s is Scenario.POISSON_TWO_GROUP:
        return ScenarioConfig(psi_star=0.5, n=1000, reps=200, true_mixing=_LOGNORMAL,
                              assumed_mixing=FamilySpec.of("gamma_mean_shape", inv_mean=1.0, shape=1.0),
                              stratum_counts=((1.0, 2.0), (3.0, 1.0)), **base)
    if s is Scenario.EXP_TWO_GROUP_MINIMA:
        return ScenarioConfig(psi_star=1.5, n=1000, reps=200, true_mixing=_LOGNORMAL, assumed_mixing=_GAMMA,
                              stratum_counts=((1.0, 2.0), (3.0, 1.0)), **base)
    if s is Scenario.GLM_DISPERSION:
        glm = GlmSpec(true_dispersion="loglinear", true_dispersion_params=(0.0, 0.8), assumed_dispersion="constant")
        return ScenarioConfig(psi_star=1.0, n=1000, reps=500, glm=glm, **base)
    if s is Scenario.GLM_OMITTED_COVARIATE:
        glm = GlmSpec(family="logistic", rho=0.0, lambda_star=(1.5,))
        return ScenarioConfig(psi_star=1.0, n=1000, reps=500, glm=glm, **base)
    if s is Scenario.OVERSTRATIFIED:
        return ScenarioConfig(psi_star=1.0, n=1000, reps=500, glm=GlmSpec(lambda_star=(0.0,)), **base)
    return ScenarioConfig(psi_star=0.0, n=1, reps=1, rotation=RotationSpec(), **base)


def validate(c: ScenarioConfig):
    """Domain checks at construction; raises InvalidArgumentError naming the key."""
    if not isinstance(c.scenario, Scenario):
        raise InvalidArgumentError("scenario.name", f"unknown scenario {c.scenario!r}")
    for key, val in (("scenario.n", c.n), ("scenario.reps", c.reps)):
        if not isinstance(val, int) or isinstance(val, bool) or val < 1:
            raise InvalidArgumentError(key, f"must be an integer >= 1, got {val!r}")
    if not isinstance(c.seed, int) or isinstance(c.seed, bool) or c.seed < 0:
        raise InvalidArgumentError("scenario.seed", f"must be a nonnegative integer, got {c.seed!r}")
    if not math.isfinite(c.psi_star):
        raise InvalidArgumentError("scenario.psi_star", "must be finite")
    s = c.scenario
    if s in PAIR_SCENARIOS:
        if c.true_mixing is None or c.assumed_mixing is None:
            raise InvalidArgumentError("mixing", "pair scenarios need true and assumed mixing families")
        for key, spec in (("mixing.true", c.true_mixing), ("mixing.assumed", c.assumed_mixing)):
            try:
                spec.build()
            except InvalidArgumentError as exc:
                raise InvalidArgumentError(f"{key}.{exc.field}", str(exc)) from None
        if s in (Scenario.EXP_PAIRS_SYMMETRIC, Scenario.EXP_PAIRS_NON_SYMMETRIC, Scenario.EXP_TWO_GROUP_MINIMA):
            if not c.psi_star > 0:
                raise InvalidArgumentError("scenario.psi_star", "must be > 0 for exponential scenarios")
        if s is not Scenario.NORMAL_PAIRS and c.true_mixing.build().support == "real":
            raise InvalidArgumentError("mixing.true.kind", "mixing law must live on the positive half-line")
        if not c.stratum_counts:
            raise InvalidArgumentError("strata.counts", "need at least one (r1, r0) pattern")
        for r1, r0 in c.stratum_counts:
            if not (r1 >= 1 and r0 >= 1):
                raise InvalidArgumentError("strata.counts", "stratum counts must be >= 1")
        unknown = set(c.assumed_fixed) - set(c.assumed_mixing.build().param_names)
        if unknown:
            raise InvalidArgumentError("mixing.assumed.fixed", f"unknown parameter(s) {sorted(unknown)}")
    if s in GLM_SCENARIOS:
        g = c.glm
        if g is None:
            raise InvalidArgumentError("glm", "GLM scenarios need a glm section")
        if g.family not in ("linear", "logistic", "poisson"):
            raise InvalidArgumentError("glm.family", f"unknown GLM family {g.family!r}")
        if not -1.0 < g.rho < 1.0:
            raise InvalidArgumentError("glm.rho", "must lie in (-1, 1)")
        if len(g.lambda_star) < 1:
            raise InvalidArgumentError("glm.lambda_star", "need at least one W coefficient")
        if g.true_dispersion not in ("constant", "loglinear"):
            raise InvalidArgumentError("glm.true_dispersion", "must be constant or loglinear")
        need = 1 if g.true_dispersion == "constant" else 2
        if len(g.true_dispersion_params) != need:
            raise InvalidArgumentError("glm.true_dispersion_params", f"need {need} value(s)")
        if g.true_dispersion == "constant" and not g.true_dispersion_params[0] > 0:
            raise InvalidArgumentError("glm.true_dispersion_params", "dispersion must be > 0")
        if g.assumed_dispersion not in ("fixed", "constant", "loglinear"):
            raise InvalidArgumentError("glm.assumed_dispersion", "must be fixed, constant or loglinear")
        if not g.fixed_dispersion > 0:
            raise InvalidArgumentError("glm.fixed_dispersion", "must be > 0")
        if g.family != "linear":
            if g.assumed_dispersion != "fixed":
                raise InvalidArgumentError("glm.assumed_dispersion", "only the linear family has a free dispersion")
            if g.true_dispersion != "constant" or g.true_dispersion_params != (1.0,):
                raise InvalidArgumentError("glm.true_dispersion", "non-linear families have dispersion 1")
        if s is Scenario.OVERSTRATIFIED and any(v != 0.0 for v in g.lambda_star):
            raise InvalidArgumentError("glm.lambda_star", "overstratified truth has zero W coefficients")
        if c.n < 5:
            raise InvalidArgumentError("scenario.n", "GLM scenarios need n >= 5")
    if s is Scenario.ROTATION_CHECK:
        r = c.rotation
        if r is None:
            raise InvalidArgumentError("rotation", "RotationCheck needs a rotation section")
        if r.probes < 1:
            raise InvalidArgumentError("rotation.probes", "must be >= 1")
        if not r.concentration > 0:
            raise InvalidArgumentError("rotation.concentration", "must be > 0")
    ck = c.check
    if len(ck.grid) < 1:
        raise InvalidArgumentError("check.grid", "need at least one grid value")
    if ck.method not in ("quadrature", "montecarlo"):
        raise InvalidArgumentError("check.method", "must be quadrature or montecarlo")
    if ck.tolerance is not None and not ck.tolerance > 0:
        raise InvalidArgumentError("check.tolerance", "must be > 0")
    if ck.mc_draws < 2:
        raise InvalidArgumentError("check.mc_draws", "must be >= 2")


# ---------------------------------------------------------------------------
# Text format


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def to_pairs(c: ScenarioConfig) -> dict:
    """Flat key-to-text mapping of every applicable key."""
    out = {"scenario.name": c.scenario.value, "scenario.psi_star": _fmt(float(c.psi_star)),
           "scenario.n": _fmt(c.n), "scenario.reps": _fmt(c.reps), "scenario.seed": _fmt(c.seed),
           "check.grid": _fmt(tuple(float(x) for x in c.check.grid)),
           "check.tolerance": "default" if c.check.tolerance is None else _fmt(float(c.check.tolerance)),
           "check.method": c.check.method, "check.mc_draws": _fmt(c.check.mc_draws)}
    if c.scenario in PAIR_SCENARIOS:
        for role, spec in (("true", c.true_mixing), ("assumed", c.assumed_mixing)):
            out[f"mixing.{role}.kind"] = spec.kind
            for k, v in spec.params:
                out[f"mixing.{role}.{k}"] = _fmt(v)
        out["mixing.assumed.fixed"] = ",".join(c.assumed_fixed)
        out["strata.counts"] = ",".join(f"{_fmt(float(a))}:{_fmt(float(b))}" for a, b in c.stratum_counts)
    if c.scenario in GLM_SCENARIOS:
        g = c.glm
        out.update({"glm.family": g.family, "glm.intercept": _fmt(g.intercept),
                    "glm.intercept_value": _fmt(float(g.intercept_value)), "glm.rho": _fmt(float(g.rho)),
                    "glm.orthogonal": _fmt(g.orthogonal), "glm.lambda_star": _fmt(tuple(map(float, g.lambda_star))),
                    "glm.true_dispersion": g.true_dispersion,
                    "glm.true_dispersion_params": _fmt(tuple(map(float, g.true_dispersion_params))),
                    "glm.assumed_dispersion": g.assumed_dispersion,
                    "glm.fixed_dispersion": _fmt(float(g.fixed_dispersion))})
    if c.scenario is Scenario.ROTATION_CHECK:
        r = c.rotation
        out.update({"rotation.probes": _fmt(r.probes), "rotation.arm0_power": _fmt(float(r.arm0_power)),
                    "rotation.concentration": _fmt(float(r.concentration))})
    return out


def serialize(c: ScenarioConfig) -> str:
    """Canonical text: sorted ``key = value`` lines."""
    pairs = to_pairs(c)
    return "".join(f"{k} = {pairs[k]}\n" for k in sorted(pairs))


def digest(c: ScenarioConfig) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(serialize(c).encode("utf-8")).hexdigest()


def read_pairs(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidArgumentError(f"line {lineno}", "empty key")
        if key in out:
            raise InvalidArgumentError(key, f"duplicate key on line {lineno}")
        out[key] = value
    return out


def _float(key, text):
    try:
        v = float(text)
    except ValueError:
        raise InvalidArgumentError(key, f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise InvalidArgumentError(key, f"expected a finite number, got {text!r}")
    return v


def _int(key, text):
    try:
        return int(text)
    except ValueError:
        raise InvalidArgumentError(key, f"expected an integer, got {text!r}") from None


def _bool(key, text):
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise InvalidArgumentError(key, f"expected true or false, got {text!r}")


def _floats(key, text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(_float(key, p) for p in parts)


def _family(role, pairs, default):
    prefix = f"mixing.{role}."
    keys = {k[len(prefix):]: v for k, v in pairs.items() if k.startswith(prefix) and k != prefix + "fixed"}
    if not keys:
        return default
    if "kind" not in keys:
        raise InvalidArgumentError(prefix + "kind", "missing family kind")
    kind = keys.pop("kind")
    if not keys and default is not None and default.kind == kind:
        return default
    if not keys:
        # take default parameters of the family class
        from .families import FAMILIES, family_params

        if kind not in FAMILIES:
            raise InvalidArgumentError(prefix + "kind", f"unknown family {kind!r}")
        try:
            fam = FAMILIES[kind]()
        except TypeError:
            raise InvalidArgumentError(prefix + "kind", f"family {kind!r} needs explicit parameters") from None
        return FamilySpec.of(kind, **family_params(fam))
    params = {}
    for k, v in keys.items():
        params[k] = _floats(prefix + k, v) if kind == "discrete" else _float(prefix + k, v)
    return FamilySpec.of(kind, **params)


def _counts(text):
    out = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        if ":" not in part:
            raise InvalidArgumentError("strata.counts", f"expected r1:r0 pairs, got {part!r}")
        a, b = part.split(":", 1)
        out.append((_float("strata.counts", a), _float("strata.counts", b)))
    return tuple(out)


def from_pairs(pairs: dict) -> ScenarioConfig:
    """Build a config from flat pairs, filling missing keys from scenario defaults."""
    pairs = dict(pairs)
    if "scenario.name" not in pairs:
        raise InvalidArgumentError("scenario.name", "missing")
    try:
        scenario = Scenario(pairs["scenario.name"])
    except ValueError:
        names = ", ".join(s.value for s in Scenario)
        raise InvalidArgumentError("scenario.name", f"unknown scenario {pairs['scenario.name']!r}; one of {names}") from None
    base = default_config(scenario)
    allowed = set(to_pairs(base)) | {"scenario.name"}
    for k in pairs:
        section = k.split(".")[0]
        if k in allowed:
            continue
        if section == "mixing" and scenario in PAIR_SCENARIOS:
            continue
        raise InvalidArgumentError(k, "unknown or inapplicable key")
    get = pairs.get
    kw = {}
    if "scenario.psi_star" in pairs:
        kw["psi_star"] = _float("scenario.psi_star", pairs["scenario.psi_star"])
    for key, name in (("scenario.n", "n"), ("scenario.reps", "reps"), ("scenario.seed", "seed")):
        if key in pairs:
            kw[name] = _int(key, pairs[key])
    ck = base.check
    ck = CheckSpec(grid=_floats("check.grid", get("check.grid")) if "check.grid" in pairs else ck.grid,
                   tolerance=(None if get("check.tolerance", "default") == "default"
                              else _float("check.tolerance", pairs["check.tolerance"])),
                   method=get("check.method", ck.method),
                   mc_draws=_int("check.mc_draws", pairs["check.mc_draws"]) if "check.mc_draws" in pairs else ck.mc_draws)
    kw["check"] = ck
    if scenario in PAIR_SCENARIOS:
        kw["true_mixing"] = _family("true", pairs, base.true_mixing)
        assumed = _family("assumed", pairs, base.assumed_mixing)
        kw["assumed_mixing"] = assumed
        if "mixing.assumed.fixed" in pairs:
            kw["assumed_fixed"] = tuple(p.strip() for p in pairs["mixing.assumed.fixed"].split(",") if p.strip())
        if "strata.counts" in pairs:
            kw["stratum_counts"] = _counts(pairs["strata.counts"])
    if scenario in GLM_SCENARIOS:
        g = base.glm
        gk = {}
        conv = {"family": str, "true_dispersion": str, "assumed_dispersion": str,
                "intercept": _bool, "orthogonal": _bool, "intercept_value": _float, "rho": _float,
                "fixed_dispersion": _float, "lambda_star": _floats, "true_dispersion_params": _floats}
        for name, fn in conv.items():
            key = f"glm.{name}"
            if key in pairs:
                gk[name] = pairs[key] if fn is str else fn(key, pairs[key])
        kw["glm"] = replace(g, **gk)
    if scenario is Scenario.ROTATION_CHECK:
        r = base.rotation
        rk = {}
        if "rotation.probes" in pairs:
            rk["probes"] = _int("rotation.probes", pairs["rotation.probes"])
        for name in ("arm0_power", "concentration"):
            if f"rotation.{name}" in pairs:
                rk[name] = _float(f"rotation.{name}", pairs[f"rotation.{name}"])
        kw["rotation"] = replace(r, **rk)
    return replace(base, **kw)


def parse(text: str) -> ScenarioConfig:
    """Parse configuration text (see the module docstring for the format)."""
    return from_pairs(read_pairs(text))


def load(path) -> ScenarioConfig:
    """Read and parse a UTF-8 configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidArgumentError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse(text)
