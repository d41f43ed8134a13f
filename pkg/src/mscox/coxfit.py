"""Stratified Cox partial likelihood with Gaussian penalties.

Ties follow Breslow's method. A row is at risk at time ``t`` when
``entry < t <= exit`` within its stratum, so left truncation is respected on
the clock-forward scale; on the clock-reset scale every entry is 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import SURV_DTYPE
from .exceptions import EmptyRiskSet, NotConvergedWarning, SingularHessian, ValidationError

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
JITTER = 1e-10
ROUNDING_SLACK = 64 * np.finfo(float).eps
MAX_HALVINGS = 40


def make_surv(exit, status, entry=None, stratum=None, id=None) -> np.ndarray:
    """Pack survival outcomes into the structured array used by the fitters."""
    exit = np.asarray(exit, dtype=float)
    n = exit.shape[0]
    y = np.empty(n, dtype=SURV_DTYPE)
    y["exit"] = exit
    y["entry"] = 0.0 if entry is None else np.asarray(entry, dtype=float)
    y["status"] = np.asarray(status)
    y["stratum"] = 0 if stratum is None else np.asarray(stratum)
    y["id"] = np.arange(n) if id is None else np.asarray(id)
    return check_surv(y)


def check_surv(y, n_samples=None) -> np.ndarray:
    if not (isinstance(y, np.ndarray) and y.dtype.names is not None):
        raise ValidationError("y must be a structured array built by make_surv")
    missing = [f for f in ("exit", "status") if f not in y.dtype.names]
    if missing:
        raise ValidationError(f"y lacks fields {missing}")
    if y.dtype != SURV_DTYPE:
        out = np.zeros(len(y), dtype=SURV_DTYPE)
        out["id"] = np.arange(len(y))
        for f in y.dtype.names:
            if f in SURV_DTYPE.names:
                out[f] = y[f]
        y = out
    if n_samples is not None and len(y) != n_samples:
        raise ValidationError(f"y has {len(y)} rows, X has {n_samples}")
    if not np.isin(y["status"], (0, 1)).all():
        raise ValidationError("status must be 0 or 1")
    if np.any(~(y["exit"] > y["entry"])):
        raise ValidationError("every row needs exit > entry")
    return y


@dataclass(frozen=True)
class Penalty:
    """Per-coefficient Gaussian prior: mean and precision (0 = unpenalized)."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        prec = np.asarray(self.precision, dtype=float)
        if np.any(prec < 0) or not np.all(np.isfinite(prec)):
            raise ValidationError("precisions must be finite and >= 0")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "precision", prec)

    @classmethod
    def none(cls, p):
        return cls(np.zeros(p), np.zeros(p))

    @classmethod
    def from_groups(cls, labels, means, variances):
        labels = list(labels)
        return cls(np.array([means[g] for g in labels], dtype=float),
                   np.array([1.0 / variances[g] for g in labels], dtype=float))


@dataclass
class CoxSolution:
    beta: np.ndarray
    loglik_penalized: float
    gradient_norm: float
    hessian_diag_of_inverse: np.ndarray
    converged: bool
    n_iter: int


class _Stratum:
    __slots__ = ("rows", "times", "d", "exit_pos", "entry_order", "entry_pos",
                 "row_exit_idx", "row_entry_idx", "event_rows")


class CoxProblem:
    """Partial likelihood bookkeeping that does not depend on the coefficients.

    Rows are sorted by (stratum, exit, entry, status, id, covariates), so the
    numbers produced do not depend on the input row order.
    """

    def __init__(self, X, y):
        X = check_array(X, dtype=float, ensure_min_features=0)
        y = check_surv(y, X.shape[0])
        keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
        keys += [y["id"], y["status"], y["entry"], y["exit"], y["stratum"]]
        order = np.lexsort(keys)
        self.order = order
        self.X = X[order]
        self.y = y[order]
        self.n, self.p = self.X.shape
        self.center = self.X.mean(axis=0) if self.n else np.zeros(self.p)
        self.Xc = self.X - self.center
        status = self.y["status"].astype(bool)
        self.event_sum = self.Xc[status].sum(axis=0)
        self.event_mask = status
        self.strata = []
        bounds = np.flatnonzero(np.diff(self.y["stratum"])) + 1
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, self.n]):
            st = self._build_stratum(lo, hi)
            if st is not None:
                self.strata.append((int(self.y["stratum"][lo]), st))

    def _build_stratum(self, lo, hi):
        ys = self.y[lo:hi]
        ev = ys["status"] == 1
        if not ev.any():
            return None
        s = _Stratum()
        s.rows = slice(lo, hi)
        times, d = np.unique(ys["exit"][ev], return_counts=True)
        s.times, s.d = times, d.astype(float)
        exit_ = ys["exit"]
        entry = ys["entry"]
        s.exit_pos = np.searchsorted(exit_, times, side="left")
        s.entry_order = np.argsort(entry, kind="stable")
        s.entry_pos = np.searchsorted(entry[s.entry_order], times, side="left")
        n_risk = (len(ys) - s.exit_pos) - (len(ys) - s.entry_pos)
        if np.any(n_risk <= 0):
            raise EmptyRiskSet(f"event time {times[np.argmax(n_risk <= 0)]} has an empty risk set")
        # C(x) = sum_{t_e <= x} c_e is looked up at each row's exit and entry
        s.row_exit_idx = np.searchsorted(times, exit_, side="right")
        s.row_entry_idx = np.searchsorted(times, entry, side="right")
        s.event_rows = np.flatnonzero(ev)
        return s

    @staticmethod
    def _cumulative(a):
        """Prefix sums ``out[i] = sum(a[:i])`` accumulated in extended precision."""
        out = np.zeros((a.shape[0] + 1,) + a.shape[1:], dtype=np.longdouble)
        np.cumsum(a, axis=0, dtype=np.longdouble, out=out[1:])
        return out

    def _at_risk(self, st, a, use_prefix=None):
        """Sums of `a` over ``entry < t <= exit`` at each event time of a stratum.

        Both ``sum(exit >= t) - sum(entry >= t)`` and
        ``sum(entry < t) - sum(exit < t)`` equal the risk-set sum; each time
        uses the form with the smaller subtracted term (chosen from the first,
        scalar call), which keeps left-truncated strata free of cancellation.
        """
        by_exit = self._cumulative(a)
        entered = self._cumulative(a[st.entry_order])[st.entry_pos]
        exited = by_exit[st.exit_pos]
        late = by_exit[-1] - entered
        if use_prefix is None:
            use_prefix = exited < late
        mask = use_prefix if a.ndim == 1 else use_prefix[:, None]
        out = np.where(mask, entered - exited, (by_exit[-1] - exited) - late)
        return out.astype(float), use_prefix

    def _risk_sums(self, st, eta, need_s1):
        w_eta = eta[st.rows]
        shift = w_eta.max()
        w = np.exp(w_eta - shift)
        s0, use_prefix = self._at_risk(st, w)
        if not need_s1:
            return w, shift, s0, None
        s1, _ = self._at_risk(st, w[:, None] * self.Xc[st.rows], use_prefix)
        return w, shift, s0, s1

    def loglik(self, beta, order=2):
        """Log partial likelihood and (for ``order`` >= 1, 2) its derivatives."""
        beta = np.asarray(beta, dtype=float)
        eta = self.Xc @ beta
        value = float(eta[self.event_mask].sum())
        grad = self.event_sum.copy() if order >= 1 else None
        hess = np.zeros((self.p, self.p)) if order >= 2 else None
        for _, st in self.strata:
            w, shift, s0, s1 = self._risk_sums(st, eta, order >= 1)
            value -= float(np.dot(st.d, np.log(s0) + shift))
            if order >= 1:
                m = s1 / s0[:, None]
                grad -= st.d @ m
            if order >= 2:
                c = np.concatenate(([0.0], np.cumsum(st.d / s0)))
                a = w * (c[st.row_exit_idx] - c[st.row_entry_idx])
                xs = self.Xc[st.rows]
                hess -= (xs * a[:, None]).T @ xs
                hess += (m * st.d[:, None]).T @ m
        return value, grad, hess

    def baseline(self, beta):
        """Breslow increments at the zero covariate profile, per stratum."""
        beta = np.asarray(beta, dtype=float)
        eta = self.Xc @ beta
        offset = float(self.center @ beta)
        out = {}
        for stratum, st in self.strata:
            _, shift, s0, _ = self._risk_sums(st, eta, False)
            out[stratum] = (st.times.copy(), st.d / s0 * np.exp(-shift - offset))
        return out


def penalized_partial_loglik(beta, X, y, penalty: Penalty | None = None, problem=None):
    """Value, gradient and Hessian of the penalized log partial likelihood.

    ``value = sum_strata logPL(beta) - 0.5 * sum_j prec_j (beta_j - mean_j)**2``
    """
    problem = problem if problem is not None else CoxProblem(X, y)
    value, grad, hess = problem.loglik(beta)
    if penalty is not None:
        r = np.asarray(beta, dtype=float) - penalty.mean
        value -= 0.5 * float(np.sum(penalty.precision * r ** 2))
        grad = grad - penalty.precision * r
        hess = hess - np.diag(penalty.precision)
    return value, grad, hess


def _cholesky(info):
    try:
        return linalg.cho_factor(info, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass
    scale = max(1.0, float(np.max(np.abs(np.diag(info))))) if info.size else 1.0
    try:
        return linalg.cho_factor(info + JITTER * scale * np.eye(len(info)), lower=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularHessian("information matrix is singular") from None


def newton_solve(X=None, y=None, penalty: Penalty | None = None, init=None,
                 tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                 problem: CoxProblem | None = None) -> CoxSolution:
    """Maximize the penalized partial likelihood by Newton steps with halving.

    Converged iff the sup-norm of the gradient drops below `tol`; otherwise
    the last iterate is returned with ``converged=False``.
    """
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    problem = problem if problem is not None else CoxProblem(X, y)
    p = problem.p
    penalty = penalty if penalty is not None else Penalty.none(p)
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()

    def objective(b, order):
        v, g, h = problem.loglik(b, order)
        r = b - penalty.mean
        v -= 0.5 * float(np.sum(penalty.precision * r ** 2))
        if order >= 1:
            g = g - penalty.precision * r
        if order >= 2:
            h = h - np.diag(penalty.precision)
        return v, g, h

    value, grad, hess = objective(beta, 2)
    n_iter = 0
    converged = p == 0 or np.max(np.abs(grad)) < tol
    while not converged and n_iter < max_iter:
        n_iter += 1
        step = linalg.cho_solve(_cholesky(-hess), grad)
        # near the optimum the gain is below the rounding noise of the sum
        slack = ROUNDING_SLACK * max(1.0, abs(value))
        for _ in range(MAX_HALVINGS):
            cand = beta + step
            v_new = objective(cand, 0)[0]
            if np.isfinite(v_new) and v_new >= value - slack:
                break
            step = step / 2
        else:
            break
        beta = cand
        value, grad, hess = objective(beta, 2)
        converged = np.max(np.abs(grad)) < tol
    if p:
        diag_inv = np.diag(linalg.cho_solve(_cholesky(-hess), np.eye(p)))
    else:
        diag_inv = np.zeros(0)
    gnorm = float(np.max(np.abs(grad))) if p else 0.0
    return CoxSolution(beta, float(value), gnorm, diag_inv, bool(converged), n_iter)


def breslow_baseline(beta, X=None, y=None, problem: CoxProblem | None = None) -> dict:
    """Breslow hazard increments ``d_e / sum_{risk set} exp(beta'x_i)`` per stratum."""
    problem = problem if problem is not None else CoxProblem(X, y)
    return problem.baseline(beta)


def breslow_increments(beta, X=None, y=None, profile=None,
                       problem: CoxProblem | None = None) -> dict:
    """Cumulative hazard step functions for a covariate profile, per stratum.

    Returns ``{stratum: (times, cumhaz)}`` where ``times`` starts with 0 and
    holds the stratum's event times, and ``cumhaz[0] == 0``.
    """
    beta = np.asarray(beta, dtype=float)
    scale = 1.0 if profile is None else float(np.exp(np.asarray(profile, float) @ beta))
    out = {}
    for stratum, (t, inc) in breslow_baseline(beta, X, y, problem).items():
        out[stratum] = (np.r_[0.0, t], np.r_[0.0, np.cumsum(inc * scale)])
    return out


class CoxPH(BaseEstimator):
    """Stratified Cox model fitted by Newton-Raphson (Breslow ties).

    Parameters
    ----------
    alpha : float, default=0.0
        Ridge precision applied to every coefficient; 0 gives the standard
        (unpenalized) partial likelihood maximizer.
    tol : float, default=1e-8
        Sup-norm gradient tolerance.
    max_iter : int, default=50

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    solution_ : CoxSolution
    converged_ : bool
    baseline_hazard_ : dict
        ``{stratum: (event_times, increments)}`` at the zero profile.
    """

    def __init__(self, alpha=0.0, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        problem = CoxProblem(X, y)
        p = problem.p
        penalty = Penalty(np.zeros(p), np.full(p, float(self.alpha)))
        sol = newton_solve(penalty=penalty, tol=self.tol, max_iter=self.max_iter,
                           problem=problem)
        if not sol.converged:
            warnings.warn(f"Newton did not converge in {sol.n_iter} iterations "
                          f"(|grad|={sol.gradient_norm:.3g})", NotConvergedWarning)
        self.solution_ = sol
        self.coef_ = sol.beta
        self.converged_ = sol.converged
        self.n_features_in_ = p
        self.baseline_hazard_ = problem.baseline(sol.beta)
        return self

    def predict(self, X):
        """Linear predictor ``X @ coef_``."""
        check_is_fitted(self)
        return check_array(X, dtype=float, ensure_min_features=0) @ self.coef_

    def predict_relative_hazard(self, X):
        return np.exp(self.predict(X))
