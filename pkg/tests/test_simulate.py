import json
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from shadowfit import MechanismModel
from shadowfit.simulate import generate, replicate_seed, run_study, scenario


class TestGenerate:
    @pytest.mark.parametrize("sid", ["S1", "S2", "S3", "S4"])
    def test_deterministic(self, sid):
        spec = scenario(sid, N=300)
        a = generate(spec, replicate_seed(7, 3))
        b = generate(spec, replicate_seed(7, 3))
        npt.assert_array_equal(a.r, b.r)
        npt.assert_array_equal(a.y, b.y)
        npt.assert_array_equal(a.u, b.u)
        npt.assert_array_equal(a.z, b.z)

    def test_seeds_differ(self):
        spec = scenario("S1")
        a = generate(spec, replicate_seed(7, 0))
        b = generate(spec, replicate_seed(7, 1))
        assert not np.array_equal(a.z, b.z)

    @pytest.mark.parametrize("sid, du, dz", [("S1", 0, 1), ("S2", 0, 3), ("S3", 1, 1), ("S4", 1, 1)])
    def test_shapes_and_masking(self, sid, du, dz):
        spec = scenario(sid)
        data = generate(spec, 11)
        assert data.N == spec.N
        assert (data.du, data.dz) == (du, dz)
        assert np.all(np.isnan(data.y[~data.r]))
        assert np.all(np.isfinite(data.y[data.r]))

    def test_s4_binary_design(self):
        data = generate(scenario("S4"), 5)
        assert set(np.unique(data.u)) <= {0.0, 1.0}
        assert set(np.unique(data.z)) <= {0.0, 1.0}
        assert set(np.unique(data.y[data.r])) <= {0.0, 1.0}

    @pytest.mark.parametrize("sid, rate", [("S1", 1 / 3), ("S3", 0.2)])
    def test_missing_rate(self, sid, rate):
        spec = scenario(sid)
        frac = [1.0 - generate(spec, replicate_seed(2024, k)).r.mean() for k in range(100)]
        assert abs(np.mean(frac) - rate) < 0.05


class TestScenarioSpec:
    def test_unknown_scenario(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            scenario("S9")

    def test_unknown_covariates(self):
        with pytest.raises(ValueError, match="covariate design"):
            replace(scenario("S1"), covariates="uniform")

    def test_degenerate_missingness_rejected(self):
        with pytest.raises(ValueError, match="missing fraction"):
            replace(scenario("S1"), true_mech=(8.0, 0.0))

    def test_working_mechanisms(self):
        spec = scenario("S4")
        assert spec.working_mech(True).c1 == -2.0
        assert spec.working_mech(False).c1 == 2.0
        assert spec.true_mechanism().delta_clip == 0.0
        ok = spec.fit_config("empirical", correct=True)
        bad = spec.fit_config("empirical", correct=False)
        assert ok.mech != bad.mech

    def test_oracle_config_carries_density(self):
        cfg = scenario("S1").fit_config("oracle")
        assert cfg.density is not None
        cfg = scenario("S4").fit_config("parametric_fx")
        assert cfg.density_family == "bernoulli_logistic_z_given_u"

    def test_sample_size_override(self):
        assert scenario("S2", N=123).N == 123
        assert scenario("S2").N == 1000


class TestRunStudy:
    def test_smoke_report(self):
        rep = run_study(scenario("S1", N=200), ["empirical"], R=2, base_seed=1, mechs=["correct", "misspecified"])
        assert set(rep.cells) == {("empirical", "correct"), ("empirical", "misspecified")}
        d = json.loads(rep.to_json())
        assert d["scenario"] == "S1" and d["replicates_requested"] == 2
        for cell in d["cells"]:
            assert cell["replicates"] + cell["failures"] == 2
            assert [c["name"] for c in cell["coefficients"]] == ["beta0", "beta1"]
            for c in cell["coefficients"]:
                assert set(c) == {"name", "bias", "std", "std_hat", "cvg"}
        table = rep.to_table()
        header = table.splitlines()[1].split()
        assert header == ["variant", "mech", "coef", "bias", "std", "std-hat", "cvg"]
        assert len(table.splitlines()) >= 2 + 4

    def test_reproducible(self):
        spec = scenario("S1", N=200)
        a = run_study(spec, ["empirical"], R=3, base_seed=9)
        b = run_study(spec, ["empirical"], R=3, base_seed=9)
        assert a.to_json() == b.to_json()
        assert "wall_clock_seconds" not in a.to_dict()
        assert "wall_clock_seconds" in a.to_dict(include_timing=True)

    def test_order_independent_seeds(self):
        # replicate k depends only on (base_seed, k), not on R
        spec = scenario("S1", N=200)
        a = run_study(spec, ["empirical"], R=2, base_seed=4)
        b = run_study(spec, ["empirical"], R=3, base_seed=4)
        npt.assert_array_equal(a.cells[("empirical", "correct")]["estimates"],
                               b.cells[("empirical", "correct")]["estimates"][:2])

    def test_aggregates_match_definition(self):
        spec = scenario("S1", N=200)
        rep = run_study(spec, ["empirical"], R=4, base_seed=3)
        cell = rep.cells[("empirical", "correct")]
        est, se = cell["estimates"], cell["std_errors"]
        truth = np.array(spec.truth)
        npt.assert_allclose(cell["bias"], est.mean(0) - truth, rtol=1e-14)
        npt.assert_allclose(cell["std"], est.std(0, ddof=1), rtol=1e-14)
        npt.assert_allclose(cell["cvg"], (np.abs(est - truth) <= 1.959963984540054 * se).mean(0))

    def test_custom_mechanism(self):
        mech = MechanismModel.logistic(1.0, 1.0, delta_clip=1e-6)
        rep = run_study(scenario("S1", N=200), ["empirical"], R=2, mechs=[("custom", mech)])
        assert ("empirical", "custom") in rep.cells

    def test_failures_counted(self):
        # a one-step iteration budget makes every fit fail
        rep = run_study(scenario("S1", N=200), ["empirical"], R=2, config_overrides={"max_iter": 1})
        cell = rep.cells[("empirical", "correct")]
        assert cell["failures"] == 2 and cell["replicates"] == 0
        assert np.all(np.isnan(cell["bias"]))
        assert "2 failed fits excluded" in rep.to_table()

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError, match="two replicates"):
            run_study(scenario("S1"), R=1)
        with pytest.raises(ValueError, match="mechanism label"):
            run_study(scenario("S1"), R=2, mechs=["wrong"])
