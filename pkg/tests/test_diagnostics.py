import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bayespim.diagnostics import (
    CONTINUE,
    STOP_CONVERGED,
    STOP_EXHAUSTED,
    ConvergenceReport,
    PolicyThresholds,
    assess,
    convergence_policy,
    effective_sample_size,
    is_degenerate,
    split_rhat,
    waic,
)


def _ar1(phi, n, gen, chains=1):
    out = np.empty((chains, n))
    x = gen.normal(size=chains) / math.sqrt(1 - phi**2)
    for t in range(n):
        x = phi * x + gen.normal(size=chains)
        out[:, t] = x
    return out


class TestSplitRhat:
    def test_constant_traces_degenerate(self):
        chains = np.ones((4, 100))
        assert is_degenerate(chains)
        assert split_rhat(chains) == math.inf

    def test_iid_near_one(self):
        gen = np.random.default_rng(0)
        assert 0.999 <= split_rhat(gen.normal(size=(4, 10_000))) <= 1.01

    def test_separated_chains(self):
        gen = np.random.default_rng(1)
        chains = np.vstack([gen.normal(0, 1, 1000), gen.normal(5, 1, 1000)])
        assert split_rhat(chains) > 2

    def test_identical_copies_of_stationary_trace(self):
        gen = np.random.default_rng(2)
        half = gen.normal(size=1000)
        trace = np.concatenate([half, half])
        for k in (2, 4, 8):
            assert split_rhat(np.tile(trace, (k, 1))) == pytest.approx(1.0, abs=1e-10)

    def test_copies_of_long_trace_near_one(self):
        gen = np.random.default_rng(2)
        trace = gen.normal(size=20_000)
        assert abs(split_rhat(np.tile(trace, (4, 1))) - 1) < 1e-3

    def test_needs_two_chains(self):
        with pytest.raises(ValueError):
            split_rhat(np.zeros((1, 10)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 20), elements=st.floats(-1e3, 1e3)))
    def test_floor(self, chains):
        if is_degenerate(chains):
            return
        assert split_rhat(chains) >= 1 - 1e-6


class TestEffectiveSampleSize:
    def test_iid(self):
        gen = np.random.default_rng(3)
        assert effective_sample_size(gen.normal(size=(4, 10_000))) == pytest.approx(40_000, rel=0.1)

    def test_ar1(self):
        gen = np.random.default_rng(4)
        phi = 0.9
        chains = _ar1(phi, 20_000, gen, chains=4)
        assert effective_sample_size(chains) == pytest.approx(80_000 * (1 - phi) / (1 + phi), rel=0.2)

    def test_constant(self):
        assert effective_sample_size(np.full((2, 50), 3.0)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 30), elements=st.floats(-10, 10)))
    def test_bounded_by_draw_count(self, chains):
        ess = effective_sample_size(chains)
        assert 0 <= ess <= chains.size


class TestWaic:
    def test_constant_unit(self):
        res = waic(np.full((10, 1), -1.7))
        assert res.waic == pytest.approx(3.4)
        assert res.penalty == pytest.approx(0.0, abs=1e-12)

    def test_two_draw_toy(self):
        ll = np.log([[0.5], [0.25]])
        lse = math.log(0.375)
        mean = (math.log(0.5) + math.log(0.25)) / 2
        res = waic(ll)
        assert res.waic == pytest.approx(-2 * (2 * mean - lse), rel=1e-12)
        assert res.lppd == pytest.approx(lse)

    def test_components(self):
        gen = np.random.default_rng(5)
        ll = gen.normal(-2, 0.3, (200, 15))
        res = waic(ll)
        assert res.waic == pytest.approx(-2 * (res.lppd - res.penalty))
        assert res.waic_variance == pytest.approx(-2 * (res.lppd - ll.var(axis=0, ddof=1).sum()))
        assert np.isfinite(res.waic_total)
        assert res.pointwise.sum() == pytest.approx(res.waic)

    def test_reordering_invariance(self):
        gen = np.random.default_rng(6)
        ll = gen.normal(-2, 0.5, (100, 30))
        base = waic(ll).waic
        assert waic(ll[:, gen.permutation(30)]).waic == pytest.approx(base, rel=1e-13)
        assert waic(ll[gen.permutation(100)]).waic == pytest.approx(base, rel=1e-13)

    def test_nonfinite_handling(self):
        ll = np.full((5, 3), -1.0)
        ll[:, 1] = -np.inf
        ll[2, 0] = -np.inf
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = waic(ll)
        assert res.excluded_units == (1,)
        assert res.dropped_draws == 1
        assert len(caught) == 2

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            waic(np.zeros((1, 4)))


class TestPolicy:
    thresholds = PolicyThresholds(1.1, 40.0, 1000)

    def _report(self, rhat, ess, used=100):
        names = [str(k) for k in range(len(rhat))]
        return ConvergenceReport(dict(zip(names, rhat)), dict(zip(names, ess)), False, used, 1)

    def test_converged(self):
        assert convergence_policy([self._report((1.05, 1.09), (100, 50))], self.thresholds) == STOP_CONVERGED

    def test_continue(self):
        assert convergence_policy([self._report((1.05, 1.2), (100, 50))], self.thresholds) == CONTINUE

    def test_low_ess_continues(self):
        assert convergence_policy([self._report((1.0, 1.0), (100, 39))], self.thresholds) == CONTINUE

    def test_exhausted(self):
        assert convergence_policy([self._report((1.5,), (100,), used=1000)], self.thresholds) == STOP_EXHAUSTED

    def test_empty_history(self):
        assert convergence_policy([], self.thresholds) == CONTINUE

    def test_assess_uses_recent_half_and_skips_fixed(self):
        gen = np.random.default_rng(7)
        samples = gen.normal(size=(4, 400, 3))
        samples[:, :200, 0] += np.arange(4)[:, None] * 10  # early disagreement only
        samples[:, :, 2] = 1.0
        rep = assess(samples, ["a", "b", "k"], 400, 1, self.thresholds, fixed=("k",))
        assert set(rep.rhat) == {"a", "b"}
        assert rep.converged
        assert rep.to_dict()["iterations_used"] == 400

    def test_assess_flags_degenerate(self):
        samples = np.zeros((2, 40, 1))
        rep = assess(samples, ["a"], 40, 1, self.thresholds)
        assert rep.degenerate == ("a",) and not rep.converged

    def test_assess_short_traces_are_not_converged(self):
        gen = np.random.default_rng(8)
        rep = assess(gen.normal(size=(2, 4, 1)), ["a"], 4, 1, self.thresholds)
        assert math.isnan(rep.rhat["a"]) and not rep.converged
        assert convergence_policy([rep], self.thresholds) == CONTINUE
