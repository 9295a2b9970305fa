import pytest
from hypothesis import given
from hypothesis import strategies as st

from misfit.config import (FamilySpec, Scenario, ScenarioConfig, default_config, digest, from_pairs, load, parse,
                           read_pairs, serialize, to_pairs)
from misfit.errors import InvalidArgumentError


class TestRoundTrip:
    @pytest.mark.parametrize("scenario", list(Scenario), ids=lambda s: s.value)
    def test_defaults(self, scenario):
        c = default_config(scenario)
        assert parse(serialize(c)) == c

    @given(scenario=st.sampled_from(list(Scenario)), seed=st.integers(0, 2**40), reps=st.integers(1, 5000),
           psi=st.floats(0.01, 100.0))
    def test_modified(self, scenario, seed, reps, psi):
        from dataclasses import replace

        c = replace(default_config(scenario), seed=seed, reps=reps, psi_star=psi)
        back = parse(serialize(c))
        assert back == c
        assert serialize(back) == serialize(c)

    @given(scenario=st.sampled_from(list(Scenario)), data=st.data())
    def test_digest_independent_of_key_order(self, scenario, data):
        c = default_config(scenario)
        lines = serialize(c).splitlines()
        shuffled = data.draw(st.permutations(lines))
        text = "# shuffled\n" + "\n".join(shuffled) + "\n"
        assert digest(parse(text)) == digest(c)

    def test_minimal_file_gets_defaults(self):
        c = parse("scenario.name = NormalPairs\n")
        assert c == default_config(Scenario.NORMAL_PAIRS)

    def test_discrete_mixing(self):
        c = parse("scenario.name = ExpPairsSymmetric\nmixing.true.kind = discrete\n"
                  "mixing.true.points = 0.5, 1, 2.5\nmixing.true.weights = 0.3,0.4,0.3\n")
        assert c.true_mixing == FamilySpec.of("discrete", points=(0.5, 1.0, 2.5), weights=(0.3, 0.4, 0.3))
        assert parse(serialize(c)) == c

    def test_counts_and_fixed(self):
        c = parse("scenario.name = ExpPairsNonSymmetric\nstrata.counts = 1:2, 3:1\nmixing.assumed.fixed = rate\n")
        assert c.stratum_counts == ((1.0, 2.0), (3.0, 1.0))
        assert c.assumed_fixed == ("rate",)
        assert to_pairs(c)["strata.counts"] == "1:2,3:1"

    def test_seventeen_digits(self):
        c = parse("scenario.name = NormalPairs\nscenario.psi_star = 0.1\n")
        assert "scenario.psi_star = 0.10000000000000001" in serialize(c)

    def test_load(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("scenario.name = GlmDispersion  # comment\nglm.rho = 0.25\n", encoding="utf-8")
        assert load(p).glm.rho == 0.25


class TestErrors:
    @pytest.mark.parametrize("text,field", [
        ("scenario.n = 5\n", "scenario.name"),
        ("scenario.name = Nope\n", "scenario.name"),
        ("scenario.name = NormalPairs\nscenario.bogus = 1\n", "scenario.bogus"),
        ("scenario.name = NormalPairs\nglm.rho = 0.1\n", "glm.rho"),
        ("scenario.name = NormalPairs\nscenario.n = 0\n", "scenario.n"),
        ("scenario.name = NormalPairs\nscenario.n = ten\n", "scenario.n"),
        ("scenario.name = NormalPairs\nscenario.seed = -1\n", "scenario.seed"),
        ("scenario.name = NormalPairs\nscenario.psi_star = nan\n", "scenario.psi_star"),
        ("scenario.name = ExpPairsSymmetric\nscenario.psi_star = -1\n", "scenario.psi_star"),
        ("scenario.name = ExpPairsSymmetric\nmixing.true.kind = normal\nmixing.true.mean = 0\n"
         "mixing.true.var = 1\n", "mixing.true.kind"),
        ("scenario.name = ExpPairsSymmetric\nmixing.true.kind = gamma\nmixing.true.shape = -2\n"
         "mixing.true.rate = 1\n", "mixing.true.shape"),
        ("scenario.name = ExpPairsSymmetric\nstrata.counts = 1-2\n", "strata.counts"),
        ("scenario.name = ExpPairsSymmetric\nstrata.counts = 0:1\n", "strata.counts"),
        ("scenario.name = ExpPairsSymmetric\nmixing.assumed.fixed = scale\n", "mixing.assumed.fixed"),
        ("scenario.name = GlmDispersion\nglm.rho = 1\n", "glm.rho"),
        ("scenario.name = GlmOmittedCovariate\nglm.assumed_dispersion = constant\n", "glm.assumed_dispersion"),
        ("scenario.name = Overstratified\nglm.lambda_star = 0.5\n", "glm.lambda_star"),
        ("scenario.name = GlmDispersion\nglm.orthogonal = maybe\n", "glm.orthogonal"),
        ("scenario.name = RotationCheck\nrotation.probes = 0\n", "rotation.probes"),
        ("scenario.name = NormalPairs\ncheck.method = simpson\n", "check.method"),
        ("scenario.name = NormalPairs\ncheck.tolerance = 0\n", "check.tolerance"),
        ("scenario.name = NormalPairs\nscenario.n = 5\nscenario.n = 6\n", "scenario.n"),
        ("scenario.name = NormalPairs\njust text\n", "line 2"),
    ])
    def test_field_named(self, text, field):
        with pytest.raises(InvalidArgumentError) as err:
            parse(text)
        assert err.value.field == field

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidArgumentError) as err:
            load(tmp_path / "none.cfg")
        assert err.value.field == "config"

    def test_direct_construction_validates(self):
        with pytest.raises(InvalidArgumentError):
            ScenarioConfig(Scenario.GLM_DISPERSION, 1.0, 100, 1, 1)

    def test_read_pairs_comments(self):
        assert read_pairs("# a\n a = b # c\n\n") == {"a": "b"}
        assert from_pairs({"scenario.name": "RotationCheck"}).rotation.probes == 100


class TestShippedConfigs:
    CONFIG_DIR = __import__("pathlib").Path(__file__).resolve().parent.parent / "configs"

    @pytest.mark.parametrize("scenario", list(Scenario), ids=lambda s: s.value)
    def test_one_file_per_scenario_with_defaults(self, scenario):
        found = [load(p) for p in sorted(self.CONFIG_DIR.glob("*.cfg"))]
        assert default_config(scenario) in found
