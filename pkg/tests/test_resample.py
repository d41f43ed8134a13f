import numpy as np
import pandas as pd
import pytest

from mscox.dataset import MultiStateData
from mscox.exceptions import AllReplicatesFailed, ValidationError
from mscox.resample import Pipeline, bootstrap, loo_predictions
from mscox.simulate import SimSpec, named_structure, simulate_cohort


@pytest.fixture(scope="module")
def small_cohort():
    from mscox.dataset import expand_covariates
    spec = SimSpec(named_structure("linear"), 120, 2, c_admin=6.0, seed=21)
    return expand_covariates(simulate_cohort(spec))


@pytest.fixture(scope="module")
def boot(small_cohort):
    return bootstrap(small_cohort, [1, 0], Pipeline(K=100), B=30, seed=7)


class TestBootstrap:
    def test_shapes(self, boot, small_cohort):
        assert boot.replicates["coefficients"].shape == (30 - boot.n_failed, 6)
        assert boot.replicates["cumhaz"].shape[1:] == (3, 101)
        assert boot.replicates["occupancy"].shape[1:] == (4, 101)

    def test_bounds_ordered(self, boot):
        for t in boot.lower:
            assert np.all(boot.lower[t] <= boot.upper[t])

    def test_type7_quantiles(self, boot):
        stack = boot.replicates["coefficients"]
        lo = np.array([np.percentile(stack[:, j], 2.5) for j in range(stack.shape[1])])
        np.testing.assert_allclose(boot.lower["coefficients"], lo)

    def test_deterministic(self, boot, small_cohort):
        again = bootstrap(small_cohort, [1, 0], Pipeline(K=100), B=30, seed=7)
        for t in boot.lower:
            np.testing.assert_array_equal(again.lower[t], boot.lower[t])
            np.testing.assert_array_equal(again.upper[t], boot.upper[t])

    def test_workers_do_not_change_output(self, boot, small_cohort):
        par = bootstrap(small_cohort, [1, 0], Pipeline(K=100), B=30, seed=7, n_jobs=2)
        np.testing.assert_array_equal(par.replicates["occupancy"], boot.replicates["occupancy"])

    def test_nested_levels(self, boot):
        for t in boot.lower:
            lo, hi = boot.interval(t, 0.5)
            assert np.all(lo >= boot.lower[t]) and np.all(hi <= boot.upper[t])

    def test_point_mostly_inside(self, boot):
        inside = [np.mean((boot.lower[t] <= boot.point[t]) & (boot.point[t] <= boot.upper[t]))
                  for t in ("coefficients", "cumhaz")]
        assert min(inside) >= 0.9

    def test_frame(self, boot):
        f = boot.to_frame()
        assert list(f.columns) == ["target", "time", "point", "lower", "upper"]
        assert set(f["target"]) >= {"x1.1", "cumhaz[2]", "occupancy[4]"}
        assert f.loc[f["target"] == "x1.1", "time"].isna().all()

    def test_resampling_unit_is_patient(self, small_cohort, monkeypatch):
        seen = []
        import mscox.resample as rs
        original = rs._estimates

        def spy(pipe, data, *args):
            sizes = data.frame.groupby("id").size()
            seen.append(sizes.to_numpy())
            return original(pipe, data, *args)

        monkeypatch.setattr(rs, "_estimates", spy)
        bootstrap(small_cohort, [0, 0], Pipeline(K=20), targets=("coefficients",), B=3, seed=1)
        per_patient = small_cohort.frame.groupby("id").size().to_numpy()
        for sizes in seen[1:]:
            assert len(sizes) == len(per_patient)
            assert set(sizes) <= set(per_patient)

    def test_failures_counted(self, small_cohort):
        pipe = Pipeline(model="standard_cox", K=20, fit_params={"max_iter": 1})
        with pytest.raises(AllReplicatesFailed):
            bootstrap(small_cohort, [0, 0], pipe, targets=("coefficients",), B=3, seed=1)

    def test_arguments_validated(self, small_cohort):
        with pytest.raises(ValidationError):
            bootstrap(small_cohort, [0, 0], B=1)
        with pytest.raises(ValidationError):
            bootstrap(small_cohort, [0, 0], level=1.0)
        with pytest.raises(ValidationError):
            bootstrap(small_cohort, [0, 0], targets=("hazard",))


class TestPipeline:
    def test_aj_rejected_for_clock_reset(self):
        with pytest.raises(ValidationError):
            Pipeline(scale="clock_reset", method="aj")

    def test_fft_rejected_for_clock_forward(self):
        with pytest.raises(ValidationError):
            Pipeline(scale="clock_forward", method="fft")

    def test_defaults(self):
        assert Pipeline().method == "fft"
        assert Pipeline(scale="clock_forward").method == "aj"


class TestLOO:
    def test_refit_excludes_patient(self, small_cohort, monkeypatch):
        sizes = []
        original = Pipeline.fit

        def spy(self, data):
            sizes.append(len(data.frame))
            return original(self, data)

        monkeypatch.setattr(Pipeline, "fit", spy)
        loo_predictions(small_cohort, Pipeline(K=50), [3])
        n3 = int((small_cohort.frame["id"] == 3).sum())
        assert sizes == [len(small_cohort.frame) - n3]

    def test_identical_records_identical_curves(self):
        spec = SimSpec(named_structure("competing_risks"), 60, 1, seed=5)
        data = simulate_cohort(spec)
        f = data.frame
        # patient 2 becomes an exact copy of patient 1
        copy = f[f["id"] == 1].assign(id=2)
        frame = pd.concat([f[f["id"] != 2], copy]).sort_values(["id", "trans"])
        dup = MultiStateData(frame.reset_index(drop=True), data.structure, data.covariates)
        res = loo_predictions(dup, Pipeline(model="null", K=50), [1, 2, 3])
        assert res.failures == {}
        np.testing.assert_array_equal(res.grids[1].probs, res.grids[2].probs)

    def test_order_by_survival(self, small_cohort):
        res = loo_predictions(small_cohort, Pipeline(K=50), [1, 2, 3, 4, 5])
        order = res.order_by_survival(2.0)
        surv = res.survival(2.0)
        assert sorted(order) == [1, 2, 3, 4, 5]
        assert all(surv[a] >= surv[b] for a, b in zip(order, order[1:]))

    def test_unknown_patient(self, small_cohort):
        with pytest.raises(ValidationError):
            loo_predictions(small_cohort, Pipeline(K=50), [10_000])

    def test_failures_recorded(self, small_cohort):
        res = loo_predictions(small_cohort, Pipeline(model="standard_cox", K=50,
                                                     fit_params={"max_iter": 1}), [1, 2])
        assert res.grids == {} and set(res.failures) == {1, 2}
