"""Empirical Bayes (grouped ridge) Cox fitting by Schall's iteration.

Each coefficient group ``g`` has a Gaussian prior ``N(mu_g, sigma2_g)``.
The outer loop alternates a MAP fit of the coefficients at fixed
hyperparameters with the closed-form updates::

    mu_g     = mean(beta_j, j in g)                  (or 0)
    df_g     = p_g - trace([H^-1]_gg) / sigma2_g
    sigma2_g = sum_{j in g} (beta_j - mu_g)**2 / df_g

where ``H`` is the penalized information matrix at the current MAP.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .coxfit import NEWTON_MAX_ITER, NEWTON_TOL, CoxPH, CoxProblem, Penalty, newton_solve
from .dataset import MEAN_MODES, Expansion, MultiStateData, PriorGrouping, TransitionStructure
from .exceptions import DegenerateGroupWarning, NotConvergedWarning, ValidationError

SIGMA2_INIT = 0.1
SIGMA2_FLOOR = 1e-6
DF_FLOOR = 1e-3
OUTER_TOL = 1e-4
MAX_OUTER = 50


def _aitken(seq, floor):
    """Aitken delta-squared limit of the last three variances, or None.

    The Schall map contracts only linearly (and very slowly when a group
    collapses towards ``sigma2 = 0``). Extrapolation is used only when the
    last two steps move in the same direction with a contraction ratio in
    (0, 1); the result is floored.
    """
    s0, s1, s2 = seq
    d1, d2 = s1 - s0, s2 - s1
    if d1 == 0 or not 0 < d2 / d1 < 1:
        return None
    return max(s2 - d2 * d2 / (d2 - d1), floor)


class CoxRFX(BaseEstimator):
    """Cox model with grouped Gaussian random effects, hyperparameters by empirical Bayes.

    Parameters
    ----------
    groups : sequence of str, optional
        Prior-group label of each column of ``X``. One shared group if omitted.
    mean_mode : {"fixed_zero", "estimated"} or dict, default="fixed_zero"
        Whether each group's prior mean is estimated or held at 0.
    fixed_variance : float or dict, optional
        Pin the prior variance of all (float) or some (dict) groups; pinned
        groups skip both hyperparameter updates.
    sigma2_init, sigma2_floor, df_floor : float
        Starting variance, lower bound on variances, and the degrees of
        freedom below which a group is treated as carrying no information.
    outer_tol : float, default=1e-4
        Bound on the relative change of the variances and the absolute change
        of the means between outer iterations.
    max_outer : int, default=50
    tol, max_iter :
        Passed to the inner Newton solver.
    update_order : {"mean_first", "variance_first"}
        Which hyperparameter is refreshed first in an outer step.
    accelerate : bool, default=True
        Apply Aitken extrapolation to slowly contracting variances.
        Convergence is always judged on a plain Schall step, so the fixed
        point is unchanged.

    Attributes
    ----------
    coef_ : ndarray
        MAP coefficients.
    group_means_, group_vars_, df_ : dict
        Final hyperparameters and effective degrees of freedom by group.
    inner_ : CoxSolution
    n_outer_ : int
    converged_ : bool
    history_ : list of dict
        ``{"mu", "sigma2", "df"}`` after each outer update.
    baseline_hazard_ : dict
        ``{stratum: (event_times, increments)}`` at the zero profile.
    """

    def __init__(self, groups=None, mean_mode="fixed_zero", fixed_variance=None,
                 sigma2_init=SIGMA2_INIT, sigma2_floor=SIGMA2_FLOOR, df_floor=DF_FLOOR,
                 outer_tol=OUTER_TOL, max_outer=MAX_OUTER, tol=NEWTON_TOL,
                 max_iter=NEWTON_MAX_ITER, update_order="mean_first", accelerate=True):
        self.groups = groups
        self.mean_mode = mean_mode
        self.fixed_variance = fixed_variance
        self.sigma2_init = sigma2_init
        self.sigma2_floor = sigma2_floor
        self.df_floor = df_floor
        self.outer_tol = outer_tol
        self.max_outer = max_outer
        self.tol = tol
        self.max_iter = max_iter
        self.update_order = update_order
        self.accelerate = accelerate

    def _resolve(self, p):
        labels = ["all"] * p if self.groups is None else [str(g) for g in self.groups]
        if len(labels) != p:
            raise ValidationError(f"groups has {len(labels)} labels for {p} columns")
        names = list(dict.fromkeys(labels))
        if isinstance(self.mean_mode, str):
            modes = {g: self.mean_mode for g in names}
        else:
            modes = {g: self.mean_mode.get(g, "fixed_zero") for g in names}
        if any(m not in MEAN_MODES for m in modes.values()):
            raise ValidationError(f"mean_mode values must be in {MEAN_MODES}")
        if self.fixed_variance is None:
            fixed = {}
        elif isinstance(self.fixed_variance, dict):
            fixed = {str(g): float(v) for g, v in self.fixed_variance.items()}
        else:
            fixed = {g: float(self.fixed_variance) for g in names}
        if any(v <= 0 for v in fixed.values()):
            raise ValidationError("fixed variances must be positive")
        if self.update_order not in ("mean_first", "variance_first"):
            raise ValidationError("update_order must be 'mean_first' or 'variance_first'")
        return labels, names, modes, fixed

    def fit(self, X, y):
        problem = CoxProblem(X, y)
        p = problem.p
        labels, names, modes, fixed = self._resolve(p)
        idx = {g: np.array([j for j, l in enumerate(labels) if l == g]) for g in names}
        mu = {g: 0.0 for g in names}
        s2 = {g: fixed.get(g, float(self.sigma2_init)) for g in names}
        free = [g for g in names if g not in fixed]
        trail = {g: [s2[g]] for g in free}

        beta = np.zeros(p)
        history = []
        converged = False
        warned = False
        n_outer = 0
        df = {g: float(len(idx[g])) for g in names}
        sol = None
        while n_outer < self.max_outer:
            n_outer += 1
            sol = newton_solve(penalty=Penalty.from_groups(labels, mu, s2), init=beta,
                               tol=self.tol, max_iter=self.max_iter, problem=problem)
            beta = sol.beta
            if not free:
                converged = sol.converged
                break
            new_mu, new_s2 = dict(mu), dict(s2)
            for g in free:
                b = beta[idx[g]]
                v = sol.hessian_diag_of_inverse[idx[g]]
                est_mean = modes[g] == "estimated"
                if self.update_order == "mean_first":
                    new_mu[g] = float(b.mean()) if est_mean else 0.0
                    centre = new_mu[g]
                else:
                    centre = mu[g]
                df[g] = len(b) - float(v.sum()) / s2[g]
                if df[g] <= self.df_floor:
                    if not warned:
                        warnings.warn(f"group {g!r} has {df[g]:.3g} effective degrees of "
                                      "freedom; variance set to the floor",
                                      DegenerateGroupWarning)
                        warned = True
                    new_s2[g] = float(self.sigma2_floor)
                else:
                    new_s2[g] = max(float(np.sum((b - centre) ** 2)) / df[g],
                                    float(self.sigma2_floor))
                if self.update_order == "variance_first":
                    new_mu[g] = float(b.mean()) if est_mean else 0.0
            d_s2 = max(abs(new_s2[g] - s2[g]) / s2[g] for g in free)
            d_mu = max(abs(new_mu[g] - mu[g]) for g in free)
            done = d_s2 < self.outer_tol and d_mu < self.outer_tol
            for g in free:
                trail[g] = trail[g][-2:] + [new_s2[g]]
                if self.accelerate and not done and len(trail[g]) == 3:
                    jump = _aitken(trail[g], float(self.sigma2_floor))
                    if jump is not None:
                        new_s2[g] = jump
                        trail[g] = [jump]
            history.append({"mu": dict(new_mu), "sigma2": dict(new_s2), "df": dict(df)})
            mu, s2 = new_mu, new_s2
            if done:
                sol = newton_solve(penalty=Penalty.from_groups(labels, mu, s2), init=beta,
                                   tol=self.tol, max_iter=self.max_iter, problem=problem)
                beta = sol.beta
                converged = sol.converged
                break
        if not converged:
            warnings.warn(f"empirical Bayes fit did not converge after {n_outer} outer "
                          "iterations; returning the last iterate", NotConvergedWarning)

        self.coef_ = beta
        self.groups_ = labels
        self.group_means_ = mu
        self.group_vars_ = s2
        self.df_ = df
        self.inner_ = sol
        self.n_outer_ = n_outer
        self.converged_ = bool(converged)
        self.history_ = history
        self.n_features_in_ = p
        self.baseline_hazard_ = problem.baseline(beta)
        return self

    def predict(self, X):
        """Linear predictor ``X @ coef_``."""
        check_is_fitted(self)
        return check_array(X, dtype=float, ensure_min_features=0) @ self.coef_

    def predict_relative_hazard(self, X):
        return np.exp(self.predict(X))


# ---------------------------------------------------------------------------
# Multi-state wrappers
# ---------------------------------------------------------------------------

def _attach(est, data: MultiStateData, scale: str):
    est.scale_ = scale
    est.feature_names_in_ = np.array(data.covariates, dtype=object)
    est.structure_ = data.structure
    est.trans_strata_ = data.trans_strata
    est.column_transitions_ = data.column_transitions()
    est.expansion_ = data.expansion
    return est


def fit_coxrfx(data: MultiStateData, scale: str = "clock_reset",
               grouping: PriorGrouping | None = None, **params) -> CoxRFX:
    """Fit the empirical Bayes Cox model to a long-format data set.

    Without `grouping`, expanded data get one group per transition type and
    unexpanded data a single group.
    """
    grouping = grouping if grouping is not None else PriorGrouping.by_transition(data)
    labels = grouping.labels(data.covariates)
    modes = {g: grouping.mean_mode[g] for g in grouping.groups}
    params.setdefault("mean_mode", modes)
    est = CoxRFX(groups=labels, **params).fit(data.X, data.surv(scale))
    return _attach(est, data, scale)


def fit_coxph(data: MultiStateData, scale: str = "clock_reset", **params) -> CoxPH:
    """Standard (unpenalized) stratified Cox fit on a long-format data set."""
    est = CoxPH(**params).fit(data.X, data.surv(scale))
    return _attach(est, data, scale)


def null_fit(data: MultiStateData, scale: str = "clock_reset") -> CoxPH:
    """Degenerate Cox fit with every coefficient fixed at 0 (Nelson-Aalen baselines)."""
    est = CoxPH()
    problem = CoxProblem(data.X, data.surv(scale))
    est.coef_ = np.zeros(problem.p)
    est.converged_ = True
    est.solution_ = None
    est.n_features_in_ = problem.p
    est.baseline_hazard_ = problem.baseline(est.coef_)
    return _attach(est, data, scale)


def relative_hazards(fit, profile) -> dict:
    """Relative transition hazard ``exp(beta_ij' z)`` for every transition.

    `profile` is a vector over the fitted columns; each transition only uses
    the columns that can be nonzero on its rows.
    """
    check_is_fitted(fit)
    z = np.asarray(profile, dtype=float)
    if z.shape != fit.coef_.shape:
        raise ValidationError(f"profile has length {z.size}, fit has {fit.coef_.size} columns")
    names = list(fit.feature_names_in_)
    out = {}
    for k in fit.structure_.trans_ids:
        mask = np.array([k in fit.column_transitions_[c] for c in names], dtype=bool)
        out[k] = float(np.exp(np.dot(fit.coef_[mask], z[mask]))) if mask.size else 1.0
    return out


def fit_to_dict(fit) -> dict:
    """JSON-ready summary of a fitted multi-state model, baselines included."""
    names = [str(c) for c in fit.feature_names_in_]
    d = {
        "beta": {c: float(b) for c, b in zip(names, fit.coef_)},
        "converged": bool(fit.converged_),
        "scale": fit.scale_,
        "structure": fit.structure_.to_dict(),
        "trans_strata": {str(k): int(v) for k, v in fit.trans_strata_.items()},
        "column_transitions": {c: list(v) for c, v in fit.column_transitions_.items()},
        "baseline": {str(s): {"times": t.tolist(), "hazard": h.tolist()}
                     for s, (t, h) in fit.baseline_hazard_.items()},
    }
    exp = getattr(fit, "expansion_", None)
    if exp is not None:
        d["expansion"] = {"base_columns": list(exp.base_columns),
                          "partition": {str(k): int(v) for k, v in exp.partition.items()}}
    if isinstance(fit, CoxRFX):
        d["groups"] = {g: {"mu": fit.group_means_[g], "sigma2": fit.group_vars_[g],
                           "df": fit.df_[g]} for g in fit.group_vars_}
        d["group_of"] = dict(zip(names, fit.groups_))
        d["iters"] = int(fit.n_outer_)
    else:
        d["iters"] = int(fit.solution_.n_iter) if fit.solution_ is not None else 0
    return d


def fit_from_dict(d: dict) -> CoxRFX:
    """Rebuild a fitted :class:`CoxRFX` (enough for prediction) from :func:`fit_to_dict`."""
    names = list(d["beta"])
    est = CoxRFX(groups=[d.get("group_of", {}).get(c, "all") for c in names])
    est.coef_ = np.array([d["beta"][c] for c in names], dtype=float)
    est.groups_ = list(est.groups)
    groups = d.get("groups", {})
    est.group_means_ = {g: v["mu"] for g, v in groups.items()}
    est.group_vars_ = {g: v["sigma2"] for g, v in groups.items()}
    est.df_ = {g: v["df"] for g, v in groups.items()}
    est.n_outer_ = d.get("iters", 0)
    est.converged_ = d["converged"]
    est.n_features_in_ = len(names)
    est.feature_names_in_ = np.array(names, dtype=object)
    est.scale_ = d["scale"]
    est.structure_ = TransitionStructure.from_dict(d["structure"])
    est.trans_strata_ = {int(k): int(v) for k, v in d["trans_strata"].items()}
    est.column_transitions_ = {c: list(v) for c, v in d["column_transitions"].items()}
    est.baseline_hazard_ = {int(s): (np.array(v["times"], float), np.array(v["hazard"], float))
                            for s, v in d["baseline"].items()}
    exp = d.get("expansion")
    est.expansion_ = None if exp is None else Expansion(
        tuple(exp["base_columns"]), {int(k): int(v) for k, v in exp["partition"].items()})
    return est


def save_fit(fit, path) -> None:
    Path(path).write_text(json.dumps(fit_to_dict(fit), indent=2))


def load_fit(path) -> CoxRFX:
    return fit_from_dict(json.loads(Path(path).read_text()))
