"""Patient-level bootstrap intervals and leave-one-out predictions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .cumhaz import HazardBundle, msfit_generic
from .dataset import MultiStateData, PriorGrouping
from .empbayes import fit_coxph, fit_coxrfx, null_fit
from .exceptions import AllReplicatesFailed, MultiStateError, ValidationError
from .occupancy import (
    OccupancyGrid,
    discretize_kernels,
    probtrans_aj,
    probtrans_direct,
    probtrans_fft,
)

TARGETS = ("coefficients", "cumhaz", "occupancy")
MODELS = ("eb_cox", "standard_cox", "null")
DEFAULT_B = 200
DEFAULT_K = 1000


@dataclass
class Pipeline:
    """Fit, per-patient hazards and occupancy for one model specification.

    Parameters
    ----------
    model : {"eb_cox", "standard_cox", "null"}
    scale : {"clock_reset", "clock_forward"}
    grouping : PriorGrouping, optional
        Prior groups of the empirical Bayes model (one per transition type
        by default).
    K, t_max :
        Occupancy grid. Bootstrap replicates share the horizon of the
        original fit so that their grids line up.
    method : {"fft", "direct", "aj"}, optional
        Occupancy estimator; FFT for clock-reset, Aalen-Johansen otherwise.
    fit_params : dict
        Extra keyword arguments for the fitting function.
    """

    model: str = "eb_cox"
    scale: str = "clock_reset"
    grouping: PriorGrouping | None = None
    K: int = DEFAULT_K
    t_max: float | None = None
    method: str | None = None
    fit_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValidationError(f"model must be one of {MODELS}")
        if self.method is None:
            self.method = "fft" if self.scale == "clock_reset" else "aj"
        if self.method == "aj" and self.scale == "clock_reset":
            raise ValidationError("Aalen-Johansen needs a clock-forward fit")
        if self.method in ("fft", "direct") and self.scale != "clock_reset":
            raise ValidationError("convolution estimators need a clock-reset fit")

    def fit(self, data: MultiStateData):
        if self.model == "eb_cox":
            return fit_coxrfx(data, self.scale, self.grouping, **self.fit_params)
        if self.model == "standard_cox":
            return fit_coxph(data, self.scale, **self.fit_params)
        return null_fit(data, self.scale)

    def hazards(self, fit, data: MultiStateData, values) -> HazardBundle:
        return msfit_generic(fit, data.patient_frame(values))

    def occupancy(self, bundle: HazardBundle, t_max=None) -> OccupancyGrid:
        t_max = t_max if t_max is not None else self.t_max
        if self.method == "aj":
            return probtrans_aj(bundle, K=self.K, t_max=t_max)
        kernels = discretize_kernels(bundle, self.K, t_max)
        return probtrans_fft(kernels) if self.method == "fft" else probtrans_direct(kernels)


def _estimates(pipe: Pipeline, data, values, targets, t_max):
    """Target arrays of one fitted replicate, or None when the fit failed."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            fit = pipe.fit(data)
            if not fit.converged_:
                return None
            out = {}
            if "coefficients" in targets:
                out["coefficients"] = np.asarray(fit.coef_, dtype=float)
            if "cumhaz" in targets or "occupancy" in targets:
                bundle = pipe.hazards(fit, data, values)
                grid = np.arange(pipe.K + 1) * (t_max / pipe.K)
                if "cumhaz" in targets:
                    out["cumhaz"] = np.stack([bundle.evaluate(k, grid)
                                              for k in data.structure.trans_ids])
                if "occupancy" in targets:
                    out["occupancy"] = pipe.occupancy(bundle, t_max).probs
            return out
        except (MultiStateError, np.linalg.LinAlgError):
            return None


def _horizon(pipe: Pipeline, data: MultiStateData) -> float:
    """Grid horizon: the pipeline's, else the largest observed time on its scale."""
    if pipe.t_max is not None:
        return float(pipe.t_max)
    col = "time" if pipe.scale == "clock_reset" else "Tstop"
    return float(data.frame[col].max())


def _replicate(pipe, data, ids, values, targets, t_max, seed, b):
    rng = np.random.default_rng([seed, b])
    draw = rng.choice(ids, size=ids.size, replace=True)
    return _estimates(pipe, data.resample(draw), values, targets, t_max)


@dataclass
class BootstrapResult:
    """Percentile bootstrap intervals.

    ``replicates[target]`` stacks the estimates of the converged replicates
    (first axis); ``lower``/``upper`` are type-7 quantiles of that stack at
    ``(1 - level) / 2`` and ``(1 + level) / 2``. Failed replicates are
    counted in `n_failed` and excluded from the quantiles.
    """

    B: int
    level: float
    point: dict
    replicates: dict
    lower: dict
    upper: dict
    n_failed: int
    columns: list = field(default_factory=list)
    trans_ids: list = field(default_factory=list)
    times: np.ndarray | None = None

    def interval(self, target, level=None):
        """Bounds at another level, recomputed from the stored replicates."""
        level = self.level if level is None else level
        return _percentile(self.replicates[target], level)

    def to_frame(self) -> pd.DataFrame:
        """Long table ``target, time, point, lower, upper``.

        Coefficient rows are labelled by column name; cumulative hazard rows
        by ``cumhaz[<trans>]`` and occupancy rows by ``occupancy[<state>]``.
        """
        parts = []
        for target in self.point:
            pt, lo, hi = self.point[target], self.lower[target], self.upper[target]
            if target == "coefficients":
                parts.append(pd.DataFrame({"target": self.columns, "time": np.nan,
                                           "point": pt, "lower": lo, "upper": hi}))
                continue
            labels = self.trans_ids if target == "cumhaz" else range(1, pt.shape[0] + 1)
            for i, lab in enumerate(labels):
                parts.append(pd.DataFrame({"target": f"{target}[{lab}]", "time": self.times,
                                           "point": pt[i], "lower": lo[i], "upper": hi[i]}))
        return pd.concat(parts, ignore_index=True)


def _percentile(stack, level):
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stack, [alpha, 1.0 - alpha], axis=0, method="linear")
    return lo, hi


def bootstrap(data: MultiStateData, values, pipeline: Pipeline | None = None,
                  targets=TARGETS, B: int = DEFAULT_B, level: float = 0.95, seed: int = 0,
                  n_jobs: int = 1) -> BootstrapResult:
    """Nonparametric bootstrap of coefficients, cumulative hazards and occupancy.

    Parameters
    ----------
    data : MultiStateData
        Long-format data; patients (all their rows) are the resampling unit.
    values : mapping or sequence
        Original covariate values of the patient whose cumulative hazards and
        occupancy are targeted.
    pipeline : Pipeline, optional
        Model specification; the empirical Bayes clock-reset model by default.
    targets : subset of {"coefficients", "cumhaz", "occupancy"}
    B : int
        Number of resamples.
    level : float
        Nominal coverage of the percentile intervals.
    seed : int
        Replicate ``b`` draws from ``default_rng([seed, b])``, so results
        are identical for any `n_jobs`.

    Raises
    ------
    AllReplicatesFailed
        If no replicate produced a converged fit.
    """
    pipe = pipeline if pipeline is not None else Pipeline()
    targets = tuple(targets)
    if not set(targets) <= set(TARGETS) or not targets:
        raise ValidationError(f"targets must be a nonempty subset of {TARGETS}")
    if B < 2:
        raise ValidationError("B must be at least 2")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")

    t_max = _horizon(pipe, data)
    point = _estimates(pipe, data, values, targets, t_max)
    if point is None:
        raise AllReplicatesFailed("the fit on the original data failed")

    ids = np.array(sorted(data.frame["id"].unique()))
    args = (pipe, data, ids, values, targets, t_max, seed)
    if n_jobs == 1:
        reps = [_replicate(*args, b) for b in range(B)]
    else:
        reps = Parallel(n_jobs=n_jobs)(delayed(_replicate)(*args, b) for b in range(B))
    ok = [r for r in reps if r is not None]
    if not ok:
        raise AllReplicatesFailed(f"all {B} bootstrap replicates failed")
    stacks = {t: np.stack([r[t] for r in ok]) for t in targets}
    lower, upper = {}, {}
    for t in targets:
        lower[t], upper[t] = _percentile(stacks[t], level)
    return BootstrapResult(B, level, point, stacks, lower, upper, B - len(ok),
                           list(data.covariates), list(data.structure.trans_ids),
                           np.arange(pipe.K + 1) * (t_max / pipe.K))


@dataclass
class LOOResult:
    """Leave-one-out occupancy curves; failed refits are listed, not raised."""

    grids: dict
    failures: dict

    def survival(self, t: float, dead_states=None) -> dict:
        """Probability of not being in any of `dead_states` at time `t`, per patient."""
        out = {}
        for pid, g in self.grids.items():
            dead = dead_states if dead_states is not None else g.structure.absorbing_states
            p = g.at([t])[:, 0]
            out[pid] = 1.0 - float(sum(p[s - 1] for s in dead))
        return out

    def order_by_survival(self, t: float, dead_states=None) -> list:
        """Patient ids sorted by decreasing survival at `t` (ties by id)."""
        surv = self.survival(t, dead_states)
        return sorted(surv, key=lambda pid: (-surv[pid], pid))


def _loo_one(pipe, data, pid, t_max):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            fit = pipe.fit(data.drop([pid]))
            if not fit.converged_:
                return pid, None, "fit did not converge"
            bundle = pipe.hazards(fit, data, data.base_covariates(pid))
            return pid, pipe.occupancy(bundle, t_max), None
        except (MultiStateError, np.linalg.LinAlgError) as exc:
            return pid, None, f"{type(exc).__name__}: {exc}"


def loo_predictions(data: MultiStateData, pipeline: Pipeline | None = None, patient_ids=None,
                    n_jobs: int = 1) -> LOOResult:
    """Occupancy of each patient from a model fitted without that patient.

    The grid horizon is shared by all patients (the pipeline's `t_max`, or
    the largest observed time).
    """
    pipe = pipeline if pipeline is not None else Pipeline()
    all_ids = list(pd.unique(data.frame["id"]))
    patient_ids = all_ids if patient_ids is None else list(patient_ids)
    missing = [p for p in patient_ids if p not in set(all_ids)]
    if missing:
        raise ValidationError(f"unknown patient ids {missing[:5]}")
    t_max = _horizon(pipe, data)
    if n_jobs == 1:
        res = [_loo_one(pipe, data, pid, t_max) for pid in patient_ids]
    else:
        res = Parallel(n_jobs=n_jobs)(delayed(_loo_one)(pipe, data, pid, t_max)
                                      for pid in patient_ids)
    grids = {pid: g for pid, g, _ in res if g is not None}
    failures = {pid: msg for pid, _, msg in res if msg is not None}
    return LOOResult(grids, failures)
