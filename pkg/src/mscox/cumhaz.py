"""Per-patient cumulative transition hazards from a fitted model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import SCALES, TransitionStructure
from .exceptions import MissingTransitionRow, ValidationError


@dataclass
class HazardBundle:
    """Cumulative hazard of every transition for one covariate profile.

    ``times[k]`` starts at 0 and is strictly increasing; ``cumhaz[k]`` starts
    at 0 and is nondecreasing. With ``interpolation="step"`` the functions are
    right-continuous steps (Breslow estimates); ``"linear"`` interpolates
    between knots, which represents piecewise-constant hazards exactly.
    Beyond the last knot every cumulative hazard is held flat.
    """

    scale: str
    structure: TransitionStructure
    times: dict
    cumhaz: dict
    profile: dict = field(default_factory=dict)
    interpolation: str = "step"

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}")
        if self.interpolation not in ("step", "linear"):
            raise ValidationError("interpolation must be 'step' or 'linear'")
        for k in self.structure.trans_ids:
            t = np.asarray(self.times.get(k, [0.0]), dtype=float)
            h = np.asarray(self.cumhaz.get(k, [0.0]), dtype=float)
            if t.shape != h.shape or t[0] != 0 or h[0] != 0:
                raise ValidationError(f"transition {k}: times/cumhaz must start at (0, 0)")
            if np.any(np.diff(t) <= 0) or np.any(np.diff(h) < 0):
                raise ValidationError(f"transition {k}: times must increase, cumhaz not decrease")
            self.times[k], self.cumhaz[k] = t, h

    @property
    def last_time(self) -> float:
        return max(float(self.times[k][-1]) for k in self.structure.trans_ids)

    def evaluate(self, trans: int, t) -> np.ndarray:
        """Cumulative hazard of `trans` at time(s) `t`."""
        times, h = self.times[trans], self.cumhaz[trans]
        t = np.asarray(t, dtype=float)
        if self.interpolation == "linear":
            return np.interp(t, times, h)
        return h[np.searchsorted(times, t, side="right") - 1]

    def scaled(self, factors: dict) -> "HazardBundle":
        return HazardBundle(self.scale, self.structure, dict(self.times),
                            {k: self.cumhaz[k] * factors.get(k, 1.0) for k in self.cumhaz},
                            dict(self.profile), self.interpolation)

    def to_frame(self) -> pd.DataFrame:
        parts = [pd.DataFrame({"trans": k, "time": self.times[k], "cumhaz": self.cumhaz[k]})
                 for k in self.structure.trans_ids]
        return pd.concat(parts, ignore_index=True)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, structure, scale="clock_reset") -> "HazardBundle":
        times, cumhaz = {}, {}
        for k, g in frame.groupby("trans"):
            times[int(k)] = g["time"].to_numpy(float)
            cumhaz[int(k)] = g["cumhaz"].to_numpy(float)
        return cls(scale, structure, times, cumhaz)


def constant_hazard_bundle(structure: TransitionStructure, rates, horizon: float,
                           scale: str = "clock_reset") -> HazardBundle:
    """Exact bundle for constant transition hazards up to `horizon`."""
    if isinstance(rates, (int, float)):
        rates = {k: float(rates) for k in structure.trans_ids}
    elif not isinstance(rates, dict):
        rates = dict(zip(structure.trans_ids, rates))
    times = {k: np.array([0.0, horizon]) for k in structure.trans_ids}
    cumhaz = {k: np.array([0.0, rates[k] * horizon]) for k in structure.trans_ids}
    return HazardBundle(scale, structure, times, cumhaz, interpolation="linear")


def patient_rows(fit, values) -> pd.DataFrame:
    """Per-transition model rows (trans, strata, covariates) of a fitted model.

    `values` maps the original covariate names to the patient's values; when
    the fit used expanded covariates, ``x.t`` receives ``x`` on transitions of
    type ``t`` and 0 elsewhere.
    """
    names = list(fit.feature_names_in_)
    exp = getattr(fit, "expansion_", None)
    base = list(exp.base_columns) if exp is not None else names
    if not isinstance(values, dict):
        values = dict(zip(base, values))
    missing = [c for c in base if c not in values]
    if missing:
        raise ValidationError(f"patient profile lacks covariates {missing}")
    rows = []
    for k in fit.structure_.trans_ids:
        row = {"trans": k, "strata": fit.trans_strata_.get(k, k)}
        for c in names:
            if exp is None:
                row[c] = float(values[c])
            else:
                x, t = c.rsplit(".", 1)
                row[c] = float(values[x]) if exp.partition[k] == int(t) else 0.0
        rows.append(row)
    return pd.DataFrame(rows, columns=["trans", "strata", *names])


def msfit_generic(fit, patient: pd.DataFrame, structure: TransitionStructure | None = None
                  ) -> HazardBundle:
    """Cumulative hazards of one patient under a fitted Cox model.

    Parameters
    ----------
    fit : fitted CoxRFX or CoxPH
        Must carry ``baseline_hazard_`` and the multi-state metadata set by
        :func:`mscox.empbayes.fit_coxrfx`.
    patient : DataFrame
        One row per transition with columns ``trans``, ``strata`` and the
        fitted covariate columns.
    structure : TransitionStructure, optional
        Defaults to the structure stored on the fit.

    No variances are produced; uncertainty comes from :mod:`mscox.resample`.
    """
    structure = structure if structure is not None else fit.structure_
    names = list(fit.feature_names_in_)
    missing = [c for c in ("trans", "strata", *names) if c not in patient.columns]
    if missing:
        raise ValidationError(f"patient data lacks columns {missing}")
    times, cumhaz, profile = {}, {}, {}
    for k in structure.trans_ids:
        rows = patient.loc[patient["trans"] == k]
        if rows.empty:
            raise MissingTransitionRow(f"patient data has no row for transition {k}")
        row = rows.iloc[0]
        z = row[names].to_numpy(dtype=float)
        stratum = int(row["strata"])
        t, inc = fit.baseline_hazard_.get(stratum, (np.zeros(0), np.zeros(0)))
        rel = float(np.exp(z @ fit.coef_)) if names else 1.0
        times[k] = np.r_[0.0, t]
        cumhaz[k] = np.r_[0.0, np.cumsum(inc) * rel]
        profile[k] = z
    return HazardBundle(fit.scale_, structure, times, cumhaz, profile)
