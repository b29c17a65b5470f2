import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bayespim.core_model import Dataset
from bayespim.errors import ConsistencyError, RecodingError
from bayespim.nonparametric import (
    TurnbullInput,
    _em_step,
    _observation_matrix,
    em_misclassified,
    innermost_intervals,
    recode_baseline,
    turnbull_npmle,
)
from bayespim.simgen import Sim1Config, gen_sim1

from conftest import record


def _weibull_interval_sample(n, seed):
    gen = np.random.default_rng(seed)
    x = stats.weibull_min(c=2.0, scale=5.0).rvs(n, random_state=gen)
    left, right = np.zeros(n), np.full(n, np.inf)
    for i in range(n):
        t = 0.0
        while True:
            nxt = t + gen.uniform(0.5, 1.5)
            if nxt > 12:
                left[i] = t
                break
            if x[i] <= nxt:
                left[i], right[i] = t, nxt
                break
            t = nxt
    return TurnbullInput(left, right)


class TestRecoding:
    def test_baseline_time(self):
        ds = Dataset((record((0, 3, 6)), record((0, 4, math.inf))))
        assert recode_baseline(ds).baseline_time == pytest.approx(0.03)

    def test_untested_baseline_dropped(self):
        rec = recode_baseline(Dataset((record((0, 3, 6)), record((0, 5.9, math.inf), r=0))))
        assert rec.tests[1] == (5.9,)
        assert rec.intervals.left[1] == 5.9 and rec.intervals.right[1] == math.inf

    def test_prevalent_becomes_early_event(self):
        rec = recode_baseline(Dataset((record((0, 3, 6)), record((0,)))))
        assert rec.intervals.left[1] == 0.0
        assert rec.intervals.right[1] == pytest.approx(0.03)

    def test_no_second_visit(self):
        with pytest.raises(RecodingError):
            recode_baseline(Dataset((record((0,)), record((0,)))))

    def test_empty(self):
        with pytest.raises(RecodingError):
            recode_baseline(Dataset(()))


class TestTurnbull:
    def test_identical_intervals(self):
        est = turnbull_npmle(TurnbullInput(np.full(5, 2.0), np.full(5, 5.0)))
        assert est.support == [(2.0, 5.0)]
        assert est.masses[0] == pytest.approx(1.0)

    def test_exact_observations_give_ecdf(self):
        t = np.array([1.0, 2.0, 2.0, 3.5, 7.0])
        est = turnbull_npmle(TurnbullInput(t - 1e-9, t))
        grid = np.array([0.5, 1.0, 2.0, 3.0, 3.5, 8.0])
        assert np.allclose(est.cdf(grid), [0, 0.2, 0.6, 0.6, 0.8, 1.0], atol=1e-8)

    def test_recovers_weibull(self):
        est = turnbull_npmle(_weibull_interval_sample(2000, 0), tol=1e-7, accelerate=True)
        dist = stats.weibull_min(c=2.0, scale=5.0)
        for q in np.linspace(0.1, 0.9, 9):
            t = dist.ppf(q)
            lo, hi = est.cdf(t - 0.5), est.cdf(t + 0.5)
            # the CDF is only pinned down up to the width of the support intervals
            assert lo - 0.02 <= q <= hi + 0.02

    def test_acceleration_reaches_same_fixed_point(self):
        data = _weibull_interval_sample(300, 1)
        plain = turnbull_npmle(data, tol=1e-10)
        fast = turnbull_npmle(data, tol=1e-10, accelerate=True)
        assert fast.iterations < plain.iterations
        assert fast.loglik == pytest.approx(plain.loglik, abs=1e-6)
        grid = np.linspace(0, 12, 200)
        assert np.max(np.abs(fast.cdf(grid) - plain.cdf(grid))) < 1e-3

    def test_self_consistency_at_convergence(self):
        data = _weibull_interval_sample(300, 2)
        est = turnbull_npmle(data, tol=1e-12, max_iter=500_000)
        q, p = est.lower, est.upper
        h = ((data.left[:, None] <= q[None, :]) & (p[None, :] <= data.right[:, None])).astype(float)
        step, _ = _em_step(h, est.masses)
        assert np.max(np.abs(step - est.masses)) < 1e-6

    def test_iteration_cap_flags_nonconvergence(self):
        est = turnbull_npmle(_weibull_interval_sample(200, 3), max_iter=3)
        assert not est.converged and est.iterations == 3

    def test_invalid_intervals(self):
        with pytest.raises(ValueError):
            TurnbullInput(np.array([2.0]), np.array([2.0]))
        with pytest.raises(ValueError):
            TurnbullInput(np.array([-1.0]), np.array([2.0]))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0.01, 20), st.booleans()), min_size=1, max_size=30))
    def test_masses_form_a_distribution(self, rows):
        left = np.array([a for a, _, _ in rows])
        right = np.array([a + w if not cens else math.inf for a, w, cens in rows])
        est = turnbull_npmle(TurnbullInput(left, right), tol=1e-8)
        assert np.all(est.masses >= 0)
        assert abs(est.masses.sum() - 1) < 1e-8
        assert np.all(np.diff(est.cdf(np.linspace(0, 80, 100))) >= 0)
        lo, hi = innermost_intervals(left, right)
        assert np.all(lo < hi)


class TestMisclassificationEm:
    @pytest.fixture(scope="class")
    @staticmethod
    def sim():
        cfg = Sim1Config(n=400, theta=-0.5, kappa=1.0, beta_x=(1.5, 0.2, 0.2), sigma=0.5,
                         gap_bounds=(0.5, 1.5), censor_mean=4.0)
        return gen_sim1(cfg, 0)[0]

    def test_reduces_to_turnbull_at_perfect_sensitivity(self, sim):
        em = em_misclassified(sim, 1.0, tol=1e-10)
        tb = turnbull_npmle(recode_baseline(sim).intervals, tol=1e-10)
        grid = np.unique(np.concatenate([em.upper, tb.upper, em.lower, tb.lower]))
        grid = grid[np.isfinite(grid)]
        assert np.max(np.abs(em.cdf(grid) - tb.cdf(grid))) < 1e-6

    def test_masses_and_monotone_likelihood(self, sim):
        est = em_misclassified(sim, 0.8)
        assert est.converged
        assert abs(est.masses.sum() - 1) < 1e-8 and np.all(est.masses >= 0)

    def test_decreasing_likelihood_is_caught(self, monkeypatch):
        from bayespim import nonparametric

        h = np.array([[1.0, 0.0], [0.0, 1.0]])
        # a well-posed problem never trips the monotonicity guard
        nonparametric._self_consistency(h, 1e-12, 1000, check_monotone=True)
        lls = iter([-1.0, -2.0])
        monkeypatch.setattr(nonparametric, "_em_step", lambda h, p: (p[::-1] * 0.5 + np.array([0.5, 0.0]), next(lls)))
        with pytest.raises(ConsistencyError):
            nonparametric._self_consistency(h, 1e-12, 10, check_monotone=True)

    def test_observation_matrix_hand_case(self):
        ds = Dataset((record((0, 3, 6)), record((0, 4, math.inf))))
        rec = recode_baseline(ds)
        # cells end at 0.03, 3, 4, 6, inf
        grid = np.array([0.03, 3.0, 4.0, 6.0, math.inf])
        h = _observation_matrix(rec, grid, 0.8)
        assert np.allclose(h[0], [0.8 * 0.2**2, 0.8 * 0.2, 0.8, 0.8, 0.0])
        assert np.allclose(h[1], [0.2**2, 0.2, 0.2, 1.0, 1.0])

    def test_acceleration_reaches_same_estimate(self, sim):
        plain = em_misclassified(sim, 0.8, tol=1e-10)
        fast = em_misclassified(sim, 0.8, tol=1e-10, accelerate=True)
        assert fast.iterations < plain.iterations
        grid = np.concatenate([plain.upper[np.isfinite(plain.upper)], [0.5, 3.0]])
        assert np.max(np.abs(fast.cdf(grid) - plain.cdf(grid))) < 1e-4

    def test_untested_baseline_runs(self):
        cfg = Sim1Config(n=300, p_baseline_test=0.0, beta_x=(1.5, 0.2, 0.2), sigma=0.5,
                         gap_bounds=(0.5, 1.5), censor_mean=4.0)
        est = em_misclassified(gen_sim1(cfg, 1)[0], 0.8)
        assert abs(est.masses.sum() - 1) < 1e-8

    def test_kappa_range(self, sim):
        with pytest.raises(ValueError):
            em_misclassified(sim, 0.0)
