import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from mscox.coxfit import (
    CoxPH,
    CoxProblem,
    Penalty,
    breslow_increments,
    make_surv,
    newton_solve,
    penalized_partial_loglik,
)
from mscox.exceptions import NotConvergedWarning, SingularHessian, ValidationError

HALF_LN2 = -0.5 * np.log(2.0)


def naive_loglik(beta, X, y):
    """Breslow log partial likelihood by explicit loops over events."""
    eta = X @ beta
    total = 0.0
    for i in np.flatnonzero(y["status"] == 1):
        t, s = y["exit"][i], y["stratum"][i]
        risk = (y["stratum"] == s) & (y["entry"] < t) & (y["exit"] >= t)
        total += eta[i] - np.log(np.exp(eta[risk]).sum())
    return total


def random_instance(rng, n=40, p=3, truncate=True, ties=True):
    X = rng.normal(size=(n, p))
    entry = rng.uniform(0, 2, n) * (rng.random(n) < 0.6) if truncate else np.zeros(n)
    exit_ = entry + rng.exponential(1.0, n)
    if ties:
        exit_ = np.round(exit_, 1) + 0.05
    y = make_surv(exit_, rng.integers(0, 2, n), entry=entry, stratum=rng.integers(0, 2, n))
    return X, y


@pytest.fixture
def three_subjects():
    return np.array([[1.0], [0.0], [1.0]]), make_surv([1.0, 2.0, 3.0], [1, 1, 1])


class TestPartialLikelihood:
    def test_three_subject_grid_oracle(self, three_subjects):
        X, y = three_subjects
        grid = np.linspace(-1, 1, 200001)
        values = [naive_loglik(np.array([b]), X, y) for b in grid[::100]]
        coarse = grid[::100][int(np.argmax(values))]
        fine = np.linspace(coarse - 1e-3, coarse + 1e-3, 2001)
        best = fine[int(np.argmax([naive_loglik(np.array([b]), X, y) for b in fine]))]
        assert abs(best - HALF_LN2) < 1e-6

    def test_matches_naive_oracle(self, rng):
        for _ in range(10):
            X, y = random_instance(rng)
            beta = rng.normal(size=X.shape[1])
            value = penalized_partial_loglik(beta, X, y)[0]
            assert value == pytest.approx(naive_loglik(beta, X, y), rel=1e-12)

    def test_finite_differences(self, rng):
        h = 1e-6
        for _ in range(20):
            X, y = random_instance(rng, p=4)
            problem = CoxProblem(X, y)
            beta = 0.3 * rng.normal(size=4)
            _, g, H = problem.loglik(beta)
            E = np.eye(4) * h
            g_fd = [(problem.loglik(beta + e, 0)[0] - problem.loglik(beta - e, 0)[0]) / (2 * h)
                    for e in E]
            H_fd = [(problem.loglik(beta + e, 1)[1] - problem.loglik(beta - e, 1)[1]) / (2 * h)
                    for e in E]
            np.testing.assert_allclose(g_fd, g, rtol=1e-6, atol=1e-6 * np.abs(g).max())
            np.testing.assert_allclose(H_fd, H, rtol=1e-6, atol=1e-6 * np.abs(H).max())

    def test_penalty_terms(self, rng):
        X, y = random_instance(rng)
        beta = rng.normal(size=3)
        pen = Penalty(np.array([0.1, 0.0, -0.2]), np.array([2.0, 0.0, 5.0]))
        v0, g0, H0 = penalized_partial_loglik(beta, X, y)
        v, g, H = penalized_partial_loglik(beta, X, y, pen)
        r = beta - pen.mean
        assert v == pytest.approx(v0 - 0.5 * np.sum(pen.precision * r ** 2))
        np.testing.assert_allclose(g, g0 - pen.precision * r)
        np.testing.assert_allclose(H, H0 - np.diag(pen.precision))

    def test_zero_covariates_zero_gradient(self, rng):
        X = np.zeros((20, 2))
        y = make_surv(rng.exponential(size=20), np.ones(20, dtype=int))
        _, g, _ = penalized_partial_loglik(np.zeros(2), X, y)
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_no_events_in_stratum_ignored(self):
        X = np.array([[1.0], [0.0], [2.0]])
        y = make_surv([1.0, 2.0, 3.0], [1, 1, 0], stratum=[1, 1, 2])
        assert penalized_partial_loglik(np.array([0.3]), X, y)[0] == pytest.approx(
            naive_loglik(np.array([0.3]), X, y))

    def test_invalid_interval(self):
        with pytest.raises(ValidationError):
            make_surv([1.0], [1], entry=[1.0])

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        X, y = random_instance(rng, n=25, p=2)
        perm = rng.permutation(len(y))
        beta = np.array([0.4, -0.2])
        a = CoxProblem(X, y).loglik(beta)
        b = CoxProblem(X[perm], y[perm]).loglik(beta)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])
        np.testing.assert_array_equal(a[2], b[2])


class TestNewton:
    def test_three_subjects(self, three_subjects):
        sol = newton_solve(*three_subjects, tol=1e-8)
        assert sol.converged and sol.n_iter <= 10
        assert sol.beta[0] == pytest.approx(HALF_LN2, abs=1e-8)
        assert sol.gradient_norm < 1e-8

    def test_init_insensitive(self, rng):
        X, y = random_instance(rng, n=60)
        pen = Penalty(np.zeros(3), np.full(3, 0.5))
        a = newton_solve(X, y, pen).beta
        b = newton_solve(X, y, pen, init=np.array([3.0, -3.0, 2.0])).beta
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_infinite_shrinkage(self, rng):
        X, y = random_instance(rng)
        sol = newton_solve(X, y, Penalty(np.zeros(3), np.full(3, 1e12)))
        np.testing.assert_allclose(sol.beta, 0.0, atol=1e-9)

    def test_separation_reported(self):
        # everyone with x=1 fails before anyone with x=0
        X = np.r_[np.ones(10), np.zeros(10)][:, None]
        y = make_surv(np.arange(1.0, 21.0), np.ones(20, dtype=int))
        try:
            sol = newton_solve(X, y)
        except SingularHessian:
            return
        assert not sol.converged or abs(sol.beta[0]) > 10

    def test_hessian_diag_of_inverse(self, rng):
        X, y = random_instance(rng, n=80)
        pen = Penalty(np.zeros(3), np.ones(3))
        sol = newton_solve(X, y, pen)
        _, _, H = penalized_partial_loglik(sol.beta, X, y, pen)
        np.testing.assert_allclose(sol.hessian_diag_of_inverse, np.diag(np.linalg.inv(-H)))

    def test_max_iter_validated(self, three_subjects):
        with pytest.raises(ValidationError):
            newton_solve(*three_subjects, max_iter=0)

    def test_returns_last_iterate_when_not_converged(self, three_subjects):
        sol = newton_solve(*three_subjects, max_iter=1)
        assert not sol.converged and sol.n_iter == 1


class TestBreslow:
    def test_nelson_aalen_reduction(self):
        y = make_surv([1.0, 2.0], [1, 1])
        (t, h), = breslow_increments(np.zeros(0), np.zeros((2, 0)), y).values()
        np.testing.assert_allclose(t, [0.0, 1.0, 2.0])
        np.testing.assert_allclose(h, [0.0, 0.5, 1.5])

    def test_profile_scaling(self, rng):
        X, y = random_instance(rng)
        beta = np.array([0.2, -0.1, 0.3])
        z = np.array([1.0, 2.0, -1.0])
        base = breslow_increments(beta, X, y)
        prof = breslow_increments(beta, X, y, profile=z)
        for s in base:
            np.testing.assert_allclose(prof[s][1], base[s][1] * np.exp(z @ beta), rtol=1e-12)

    def test_increment_formula(self, rng):
        X, y = random_instance(rng, truncate=True)
        beta = np.array([0.5, 0.0, -0.5])
        out = breslow_increments(beta, X, y)
        for s, (t, h) in out.items():
            for e, te in enumerate(t[1:], 1):
                m = y["stratum"] == s
                d = np.sum(m & (y["status"] == 1) & (y["exit"] == te))
                risk = m & (y["entry"] < te) & (y["exit"] >= te)
                assert h[e] - h[e - 1] == pytest.approx(d / np.exp(X[risk] @ beta).sum())

    def test_jumps_only_at_event_times(self, rng):
        X, y = random_instance(rng)
        for s, (t, h) in breslow_increments(np.zeros(3), X, y).items():
            ev = np.unique(y["exit"][(y["status"] == 1) & (y["stratum"] == s)])
            np.testing.assert_array_equal(t[1:], ev)
            assert np.all(np.diff(h) > 0)

    def test_exponential_oracle(self):
        rng = np.random.default_rng(5)
        n = 5000
        y = make_surv(rng.exponential(1.0, n), np.ones(n, dtype=int))
        (t, h), = breslow_increments(np.zeros(0), np.zeros((n, 0)), y).values()
        grid = np.linspace(0.01, 1, 100)
        est = h[np.searchsorted(t, grid, side="right") - 1]
        assert np.max(np.abs(est - grid)) < 0.05


class TestCoxPH:
    def test_estimator_api(self, rng):
        X, y = random_instance(rng, n=100)
        est = CoxPH()
        assert clone(est).get_params() == est.get_params()
        est.fit(X, y)
        assert est.converged_ and est.coef_.shape == (3,)
        np.testing.assert_allclose(est.predict_relative_hazard(X), np.exp(X @ est.coef_))

    def test_ridge_alpha_shrinks(self, rng):
        X, y = random_instance(rng, n=100)
        free = CoxPH().fit(X, y).coef_
        ridge = CoxPH(alpha=50.0).fit(X, y).coef_
        assert np.linalg.norm(ridge) < np.linalg.norm(free)

    def test_not_converged_warns(self, three_subjects):
        with pytest.warns(NotConvergedWarning):
            est = CoxPH(max_iter=1).fit(*three_subjects)
        assert not est.converged_
