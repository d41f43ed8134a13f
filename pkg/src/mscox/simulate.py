"""Clock-reset Cox cohorts and the estimator-performance study."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import expm

from .cumhaz import msfit_generic
from .dataset import (
    REQUIRED_COLUMNS,
    MultiStateData,
    PriorGrouping,
    TransitionStructure,
    build_structure,
    expand_covariates,
)
from .empbayes import fit_coxph, fit_coxrfx, null_fit, relative_hazards
from .exceptions import MultiStateError, ValidationError
from .occupancy import discretize_kernels, probtrans_fft

STRUCTURES = {
    "linear": [(1, 2), (2, 3), (3, 4)],
    "competing_risks": [(1, 2), (1, 3), (1, 4)],
    "m_structure": [(1, 2), (1, 3), (2, 4), (2, 5)],
}
METHODS = ("standard_cox", "eb_cox", "null")
TARGETS = ("coefficients", "relative_hazards", "occupancy")
EFFECT_SIZE = 0.3
INFINITE_COEF = 10.0
STUDY_C_ADMIN = 10.0
# covariates per transition at each training-set size of the full study
P_BY_N = {100: (10, 40, 70, 100), 1000: (10, 100, 200, 300, 400, 500)}


def named_structure(name: str) -> TransitionStructure:
    """One of the study structures: linear, competing_risks, m_structure."""
    try:
        pairs = STRUCTURES[name]
    except KeyError:
        raise ValidationError(f"unknown structure {name!r}; choose from {list(STRUCTURES)}")
    n_states = max(max(p) for p in pairs)
    return build_structure(pairs, [str(s) for s in range(1, n_states + 1)])


def auto_beta(p: int, n_trans: int, rng) -> np.ndarray:
    """Non-sparse coefficients ``+-0.3 * sqrt(10 / p)`` with random signs, shape (n_trans, p)."""
    signs = rng.choice([-1.0, 1.0], size=(n_trans, p))
    return signs * EFFECT_SIZE * np.sqrt(10.0 / p)


@dataclass
class SimSpec:
    """Settings of a simulated clock-reset Cox cohort.

    `rates` gives each transition's baseline hazard: a constant rate, or a
    ``(times, cumhaz)`` step function. `true_beta` has shape
    ``(n_transitions, p_per_transition)``; it is drawn by :func:`auto_beta`
    when omitted. Censoring is administrative at `c_admin` (global time)
    and/or independent exponential at `censor_rate`.
    """

    structure: TransitionStructure
    n_patients: int
    p_per_transition: int = 0
    rates: object = 1.0
    true_beta: np.ndarray | None = None
    c_admin: float | None = None
    censor_rate: float | None = None
    seed: int = 0
    beta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_patients < 1 or self.p_per_transition < 0:
            raise ValidationError("need n_patients >= 1 and p_per_transition >= 0")
        if self.c_admin is not None and not self.c_admin > 0:
            raise ValidationError("c_admin must be positive")
        if self.censor_rate is not None and not self.censor_rate > 0:
            raise ValidationError("censor_rate must be positive")
        T = self.structure.n_transitions
        if not isinstance(self.rates, dict):
            self.rates = {k: self.rates for k in self.structure.trans_ids}
        for k, v in self.rates.items():
            if np.isscalar(v) and not v > 0:
                raise ValidationError("rates must be positive")
        if self.true_beta is None:
            rng = np.random.default_rng([self.seed, 1])
            self.beta = auto_beta(self.p_per_transition, T, rng) if self.p_per_transition \
                else np.zeros((T, 0))
        else:
            self.beta = np.asarray(self.true_beta, dtype=float).reshape(T, self.p_per_transition)


def _sojourn(rate, unit_hazard):
    """Baseline sojourn whose cumulative hazard equals `unit_hazard`."""
    if np.isscalar(rate):
        return unit_hazard / rate
    t, h = (np.asarray(a, float) for a in rate)
    idx = np.searchsorted(h, unit_hazard, side="left")
    out = np.full(unit_hazard.shape, np.inf)
    ok = idx < h.size
    out[ok] = t[idx[ok]]
    return out


def simulate_cohort(spec: SimSpec) -> MultiStateData:
    """Draw a long-format cohort from a clock-reset Cox model.

    Covariates ``x1..xp`` are independent Bernoulli(0.5). In each visited
    state every outbound sojourn is drawn by hazard inversion with the
    patient's multiplier ``exp(beta_k' z)``; the shortest wins.
    """
    structure = spec.structure
    rng = np.random.default_rng([spec.seed, 0])
    n, p = spec.n_patients, spec.p_per_transition
    Z = rng.integers(0, 2, size=(n, p)).astype(float)
    rel = np.exp(Z @ spec.beta.T)
    cens = np.full(n, np.inf)
    if spec.c_admin is not None:
        cens = np.minimum(cens, spec.c_admin)
    if spec.censor_rate is not None:
        cens = np.minimum(cens, rng.exponential(1.0 / spec.censor_rate, size=n))

    (root,) = structure.roots if len(structure.roots) == 1 else (structure.roots[0],)
    state = np.full(n, root)
    now = np.zeros(n)
    active = np.ones(n, dtype=bool)
    rows = []
    while active.any():
        for s in range(1, structure.n_states + 1):
            sel = np.flatnonzero(active & (state == s))
            out = structure.outbound(s)
            if sel.size == 0:
                continue
            if not out:
                active[sel] = False
                continue
            best = np.full(sel.size, np.inf)
            dest = np.zeros(sel.size, dtype=int)
            for k in out:
                e = rng.standard_exponential(sel.size)
                cand = now[sel] + _sojourn(spec.rates[k], e / rel[sel, k - 1])
                win = cand < best
                best[win], dest[win] = cand[win], k
            stop = np.minimum(best, cens[sel])
            event = best <= cens[sel]
            keep = stop > now[sel]
            stop_ok = np.isfinite(stop)
            for k in out:
                m = keep & stop_ok
                rows.append(pd.DataFrame({
                    "id": sel[m] + 1, "from": s, "to": structure.to_state(k), "trans": k,
                    "Tstart": now[sel][m], "Tstop": stop[m], "status": (event & (dest == k))[m]
                    .astype(int)}))
            moved = event & np.isfinite(best)
            now[sel[moved]] = best[moved]
            state[sel[moved]] = np.array([structure.to_state(k) for k in dest[moved]], dtype=int)
            active[sel[~moved]] = False
    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(
        columns=["id", "from", "to", "trans", "Tstart", "Tstop", "status"])
    frame["time"] = frame["Tstop"] - frame["Tstart"]
    frame["strata"] = frame["trans"]
    frame = frame.sort_values(["id", "Tstart", "trans"], kind="stable").reset_index(drop=True)
    names = [f"x{j}" for j in range(1, p + 1)]
    cov = pd.DataFrame(Z[frame["id"].to_numpy() - 1], columns=names)
    frame = pd.concat([frame[list(REQUIRED_COLUMNS)], cov], axis=1)
    frame = frame.astype({"id": int, "from": int, "to": int, "trans": int, "status": int,
                          "strata": int})
    return MultiStateData(frame, structure, tuple(names))


def true_occupancy(structure: TransitionStructure, rates: dict, times) -> np.ndarray:
    """Occupation probabilities (states x times) under constant hazards, from the root."""
    S = structure.n_states
    Q = np.zeros((S, S))
    for k in structure.trans_ids:
        a, b = structure.transitions[k - 1]
        Q[a - 1, b - 1] += rates[k]
        Q[a - 1, a - 1] -= rates[k]
    root = structure.roots[0] - 1
    return np.stack([expm(Q * t)[root] for t in np.atleast_1d(times)], axis=1)


# ---------------------------------------------------------------------------
# Estimator-performance study
# ---------------------------------------------------------------------------

def _evaluate(method, data, z_new, beta_true, occ_true, eval_times, K):
    """Mean absolute errors of one fitted method; None marks an NA estimate."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            if method == "standard_cox":
                fit = fit_coxph(data, "clock_reset")
            elif method == "eb_cox":
                fit = fit_coxrfx(data, "clock_reset", PriorGrouping.by_transition(data))
            else:
                fit = null_fit(data, "clock_reset")
        except MultiStateError:
            return {a: None for a in TARGETS}
        beta_hat = fit.coef_
        if (not fit.converged_ or not np.all(np.isfinite(beta_hat))
                or np.max(np.abs(beta_hat), initial=0.0) > INFINITE_COEF):
            return {a: None for a in TARGETS}
        structure = data.structure
        patient = data.patient_frame(z_new)
        # expanded columns are nonzero on one row each, so the rows add up
        profile = patient[list(data.covariates)].to_numpy(float).sum(axis=0)
        rh_hat = relative_hazards(fit, profile)
        rh_true = np.exp(beta_true @ z_new)
        out = {
            "coefficients": float(np.mean(np.abs(beta_hat - _flat_beta(beta_true, data)))),
            "relative_hazards": float(np.mean(np.abs(
                np.array([rh_hat[k] for k in structure.trans_ids]) - rh_true))),
        }
        bundle = msfit_generic(fit, patient)
        grid = probtrans_fft(discretize_kernels(bundle, K, eval_times[-1]))
        out["occupancy"] = float(np.mean(np.abs(grid.at(eval_times) - occ_true)))
        return out


def _flat_beta(beta_true, data: MultiStateData) -> np.ndarray:
    """True coefficients in the expanded column order ``x.type``."""
    exp = data.expansion
    return np.array([beta_true[t - 1, int(x[1:]) - 1]
                     for x in exp.base_columns for t in exp.types])


def study_replicate(G, n, p, replicate, beta_true, seed, config_index, K=7000,
                    rate=1.0, c_admin=None, methods=METHODS) -> list:
    """Simulate one training cohort and score every method on it."""
    structure = named_structure(G)
    spec = SimSpec(structure, n, p, rates=rate, true_beta=beta_true, c_admin=c_admin,
                   seed=int(np.random.SeedSequence([seed, config_index, replicate])
                            .generate_state(1)[0]))
    data = expand_covariates(simulate_cohort(spec))
    rng = np.random.default_rng([seed, config_index, replicate, 7])
    z_new = rng.integers(0, 2, size=p).astype(float)
    frame = data.frame
    median_event = float(np.median(frame.loc[frame["status"] == 1, "Tstop"]))
    eval_times = median_event * np.arange(1, 8) * 0.5
    rates = {k: rate * float(np.exp(beta_true[k - 1] @ z_new)) for k in structure.trans_ids}
    occ_true = true_occupancy(structure, rates, eval_times)
    rows = []
    for m in methods:
        errs = _evaluate(m, data, z_new, beta_true, occ_true, eval_times, K)
        for a in TARGETS:
            e = errs[a]
            rows.append({"a": a, "m": m, "G": G, "n": n, "p": p, "replicate": replicate,
                         "error": np.nan if e is None else e, "na_flag": int(e is None)})
    return rows


def full_grid(structures=tuple(STRUCTURES)) -> list:
    """Every (G, n, p) configuration of the full-size study."""
    return [(G, n, p) for G in structures for n, ps in P_BY_N.items() for p in ps]


def run_study(grid, replicates: int = 50, seed: int = 0, K: int = 7000, rate: float = 1.0,
              c_admin=STUDY_C_ADMIN, methods=METHODS, n_jobs: int = 1) -> pd.DataFrame:
    """Monte Carlo comparison of standard Cox, empirical Bayes Cox and the null model.

    Parameters
    ----------
    grid : iterable of (G, n, p)
        Structure name, training-set size and covariates per transition.
    replicates : int
        Training sets per configuration; true coefficients are fixed within
        a configuration.
    c_admin : float, optional
        Administrative censoring time of the training cohorts.
    n_jobs : int
        Worker processes; results do not depend on it.

    Returns
    -------
    DataFrame with columns a, m, G, n, p, replicate, error, na_flag.
    """
    jobs = []
    for ci, (G, n, p) in enumerate(grid):
        T = named_structure(G).n_transitions
        beta_true = auto_beta(p, T, np.random.default_rng([seed, ci, 10**6]))
        jobs += [(G, n, p, r, beta_true, seed, ci) for r in range(replicates)]
    if n_jobs == 1:
        parts = [study_replicate(*j, K=K, rate=rate, c_admin=c_admin, methods=methods)
                 for j in jobs]
    else:
        parts = Parallel(n_jobs=n_jobs)(
            delayed(study_replicate)(*j, K=K, rate=rate, c_admin=c_admin, methods=methods)
            for j in jobs)
    return pd.DataFrame([r for part in parts for r in part],
                        columns=["a", "m", "G", "n", "p", "replicate", "error", "na_flag"])


def summarize_study(table: pd.DataFrame) -> pd.DataFrame:
    """Median error (NA counted as +inf) and NA rate per (a, m, G, n, p)."""
    t = table.assign(err_inf=table["error"].fillna(np.inf))
    g = t.groupby(["a", "m", "G", "n", "p"])
    return pd.DataFrame({
        "median_error": g["err_inf"].median(),
        "median_valid_error": g["error"].median(),
        "na_rate": g["na_flag"].mean(),
        "replicates": g["na_flag"].size(),
    }).reset_index()
