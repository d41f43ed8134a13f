import numpy as np
import pandas as pd
import pytest
from scipy import stats

from mscox.exceptions import ValidationError
from mscox.simulate import (
    EFFECT_SIZE,
    SimSpec,
    auto_beta,
    full_grid,
    named_structure,
    run_study,
    simulate_cohort,
    study_replicate,
    summarize_study,
    true_occupancy,
)


def first_sojourns(data):
    f = data.frame
    return f.drop_duplicates("id").set_index("id")


class TestCohort:
    def test_exponential_mean(self):
        spec = SimSpec(named_structure("linear"), 5000, 0, rates=0.5, seed=1)
        first = first_sojourns(simulate_cohort(spec))
        t = first["time"].to_numpy()
        assert abs(t.mean() - 2.0) < 3 * 2.0 / np.sqrt(t.size)

    def test_exponential_ks(self):
        spec = SimSpec(named_structure("linear"), 5000, 0, rates=0.5, seed=2)
        t = first_sojourns(simulate_cohort(spec))["time"].to_numpy()
        assert stats.kstest(t, "expon", args=(0, 2.0)).pvalue > 0.01

    def test_covariate_effect(self):
        spec = SimSpec(named_structure("linear"), 5000, 1,
                       true_beta=np.array([[np.log(2)], [0.0], [0.0]]), seed=3)
        first = first_sojourns(simulate_cohort(spec))
        ratio = first.loc[first["x1"] == 0, "time"].mean() / first.loc[first["x1"] == 1, "time"].mean()
        assert ratio == pytest.approx(2.0, rel=0.1)

    def test_competing_risk_proportions(self):
        rates = {1: 0.2, 2: 0.3, 3: 0.5}
        spec = SimSpec(named_structure("competing_risks"), 5000, 0, rates=rates, seed=4)
        f = simulate_cohort(spec).frame
        counts = f.loc[f["status"] == 1].groupby("trans").size().reindex([1, 2, 3]).to_numpy()
        expected = 5000 * np.array([0.2, 0.3, 0.5])
        assert stats.chisquare(counts, expected).pvalue > 0.01

    def test_one_row_per_possible_transition(self):
        spec = SimSpec(named_structure("m_structure"), 200, 0, seed=5)
        f = simulate_cohort(spec).frame
        for (pid, s), rows in f.groupby(["id", "from"]):
            assert sorted(rows["trans"]) == spec.structure.outbound(s)
            assert rows["status"].sum() <= 1

    def test_admin_censoring(self):
        spec = SimSpec(named_structure("linear"), 500, 2, rates=0.2, c_admin=3.0, seed=6)
        f = simulate_cohort(spec).frame
        assert f["Tstop"].max() <= 3.0
        short = simulate_cohort(SimSpec(named_structure("linear"), 500, 0, c_admin=0.5, seed=6))
        assert short.frame["Tstop"].max() <= 0.5
        censored = f.groupby("id")["status"].sum() == 0
        assert censored.any()
        last = f.groupby("id")["Tstop"].max()
        assert np.all(last[censored] <= 3.0)

    def test_reproducible(self):
        spec = dict(structure=named_structure("m_structure"), n_patients=100,
                    p_per_transition=3, censor_rate=0.3, seed=7)
        a = simulate_cohort(SimSpec(**spec)).frame
        b = simulate_cohort(SimSpec(**spec)).frame
        pd.testing.assert_frame_equal(a, b)
        c = simulate_cohort(SimSpec(**{**spec, "seed": 8})).frame
        assert not a.equals(c)

    def test_step_baseline(self):
        s = named_structure("linear")
        step = (np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.5, 50.0]))
        spec = SimSpec(s, 2000, 0, rates={1: step, 2: 1.0, 3: 1.0}, seed=9)
        t = first_sojourns(simulate_cohort(spec))["time"].to_numpy()
        # all mass sits on the two jump times
        assert set(np.unique(t)) <= {1.0, 2.0}
        assert np.mean(t == 1.0) == pytest.approx(1 - np.exp(-0.5), abs=0.04)

    def test_validation(self):
        s = named_structure("linear")
        with pytest.raises(ValidationError):
            SimSpec(s, 0)
        with pytest.raises(ValidationError):
            SimSpec(s, 10, rates=-1.0)
        with pytest.raises(ValidationError):
            named_structure("star")
        with pytest.raises(ValidationError):
            SimSpec(s, 10, c_admin=0.0)


class TestTruth:
    def test_linear_closed_form(self):
        s = named_structure("linear")
        t = np.array([0.5, 1.0, 2.0])
        p = true_occupancy(s, {1: 1.0, 2: 1.0, 3: 1.0}, t)
        np.testing.assert_allclose(p[0], np.exp(-t))
        np.testing.assert_allclose(p[1], t * np.exp(-t))
        np.testing.assert_allclose(p[2], t**2 / 2 * np.exp(-t))
        np.testing.assert_allclose(p.sum(axis=0), 1.0)

    def test_auto_beta_signal_constant_in_p(self):
        rng = np.random.default_rng(0)
        for p in (10, 40):
            beta = auto_beta(p, 3, rng)
            np.testing.assert_allclose(np.abs(beta), EFFECT_SIZE * np.sqrt(10 / p))
            # Var(beta'z) for Bernoulli(0.5) covariates
            np.testing.assert_allclose((beta**2).sum(axis=1) * 0.25, EFFECT_SIZE**2 * 10 / 4)


class TestStudy:
    def test_null_coefficient_error(self):
        beta = auto_beta(10, 3, np.random.default_rng(1))
        rows = study_replicate("linear", 100, 10, 0, beta, 0, 0, K=500, methods=("null",))
        err = {r["a"]: r["error"] for r in rows}
        assert err["coefficients"] == pytest.approx(EFFECT_SIZE)

    def test_run_study_shape(self):
        t = run_study([("linear", 80, 2)], replicates=2, K=300)
        assert list(t.columns) == ["a", "m", "G", "n", "p", "replicate", "error", "na_flag"]
        assert len(t) == 2 * 3 * 3
        assert set(t["na_flag"]) <= {0, 1}
        assert (t["error"].isna() == t["na_flag"].astype(bool)).all()

    def test_run_study_deterministic(self):
        a = run_study([("competing_risks", 80, 2)], replicates=2, K=300)
        b = run_study([("competing_risks", 80, 2)], replicates=2, K=300, n_jobs=2)
        pd.testing.assert_frame_equal(a, b)

    def test_summary_counts_na_as_infinite(self):
        t = pd.DataFrame({"a": "x", "m": "m", "G": "g", "n": 1, "p": 1,
                          "replicate": range(3), "error": [1.0, np.nan, np.nan],
                          "na_flag": [0, 1, 1]})
        s = summarize_study(t).iloc[0]
        assert s["median_error"] == np.inf and s["median_valid_error"] == 1.0
        assert s["na_rate"] == pytest.approx(2 / 3)

    def test_full_grid(self):
        grid = full_grid()
        assert len(grid) == 3 * (4 + 6)
        assert ("m_structure", 1000, 500) in grid and ("linear", 100, 70) in grid

    @pytest.mark.slow
    def test_standard_cox_fails_often_at_p70(self):
        t = run_study([("competing_risks", 100, 70)], replicates=10, K=200,
                      methods=("standard_cox",))
        assert t["na_flag"].mean() > 0.25

    @pytest.mark.slow
    def test_eb_beats_standard_at_p10(self):
        t = summarize_study(run_study([("linear", 100, 10)], replicates=8, K=1000))
        med = t.set_index(["a", "m"])["median_error"]
        for a in ("coefficients", "relative_hazards"):
            assert med[(a, "eb_cox")] < med[(a, "standard_cox")]
