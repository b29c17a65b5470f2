import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from bayespim import _kernels, diagnostics
from bayespim.core_model import (
    AftFamily,
    Dataset,
    KappaPrior,
    ModelParams,
    ModelSpec,
    PriorConfig,
)
from bayespim.errors import ConsistencyError, InvalidParameterError
from bayespim.gibbs import (
    STEP_ORDER,
    GibbsChain,
    SamplerConfig,
    _draw_x,
    collapsed_prevalence_prob,
    incidence_log_target,
    run_chain,
    run_sampler,
    update_beta_w,
    update_beta_x_sigma,
    update_g_collapsed,
    update_kappa,
    update_w,
    update_x,
)
from bayespim.likelihood import SufficientStatsKappa, interval_weights
from bayespim.simgen import Sim1Config, gen_sim1

from conftest import record


def _replicate(rec, n):
    return Dataset((rec,) * n).packed


def _log_incident(pk, params, family):
    from bayespim.likelihood import log_interval_masses, log_tau_tilde

    lm = log_interval_masses(pk, params.beta_x, params.sigma, family)
    return special.logsumexp(log_tau_tilde(pk, lm, params.kappa), axis=1)


class TestCollapsedPrevalence:
    def test_perfect_baseline_gives_zero(self):
        p = ModelParams.of((1.0,), 0.5, (0.5,), 1.0)
        gen = np.random.default_rng(0)
        for rec in (record((0, 3, 6)), record((0, 2, math.inf)), record((0, math.inf))):
            assert all(update_g_collapsed(rec, p, "weibull", gen) == 0 for _ in range(200))

    @pytest.mark.parametrize("eta,expected", [(-40.0, 0.0), (40.0, 1.0)])
    def test_probit_boundaries(self, event_record, eta, expected):
        p = ModelParams.of((1.5,), 0.5, (eta,), 0.8)
        pk = Dataset((event_record,)).packed
        prob = collapsed_prevalence_prob(pk, _log_incident(pk, p, AftFamily.WEIBULL), np.array([eta]), 0.8)
        assert prob[0] == pytest.approx(expected, abs=1e-12)

    def test_formula_by_hand(self, event_record):
        p = ModelParams.of((1.5,), 0.5, (special.ndtri(0.3),), 0.8)
        w = interval_weights(event_record, p.incidence, "weibull", 0.8)
        inc = w.unnormalized.sum()
        prev = 0.8 * 0.2**2
        expected = 0.3 * prev / (0.3 * prev + 0.7 * inc)
        pk = Dataset((event_record,)).packed
        got = collapsed_prevalence_prob(pk, _log_incident(pk, p, AftFamily.WEIBULL), np.array([p.beta_w[0]]), 0.8)
        assert got[0] == pytest.approx(expected, rel=1e-12)

    def test_draw_frequency(self, event_record):
        p = ModelParams.of((1.5,), 0.5, (special.ndtri(0.3),), 0.8)
        pk = Dataset((event_record,)).packed
        prob = collapsed_prevalence_prob(pk, _log_incident(pk, p, AftFamily.WEIBULL), np.array([p.beta_w[0]]), 0.8)[0]
        gen = np.random.default_rng(1)
        n = 20_000
        hits = sum(update_g_collapsed(event_record, p, "weibull", gen) for _ in range(n))
        assert abs(hits / n - prob) < 3 * math.sqrt(prob * (1 - prob) / n)

    def test_kernel_draw_frequency(self, event_record):
        p = ModelParams.of((1.5,), 0.5, (special.ndtri(0.3),), 0.8)
        n = 100_000
        pk = _replicate(event_record, n)
        one = Dataset((event_record,)).packed
        prob = collapsed_prevalence_prob(one, _log_incident(one, p, AftFamily.WEIBULL), np.array([p.beta_w[0]]), 0.8)[0]
        g, w, x, prob_out = np.empty(n, np.bool_), np.empty(n), np.empty(n), np.empty(n)
        interval = np.empty(n, np.int64)
        _kernels.subject_sweep(pk.visits, pk.n_visits, pk.event, pk.baseline_tested, pk.zx @ p.beta_x,
                               pk.zw @ p.beta_w, p.sigma, 0.8, _kernels.KIND_CODES["extreme_value"], True,
                               np.ones(n), np.random.default_rng(2), g, w, x, interval, prob_out)
        assert np.allclose(prob_out, prob, rtol=1e-12)
        assert abs(g.mean() - prob) < 3 * math.sqrt(prob * (1 - prob) / n)
        assert np.array_equal(w > 0, g)

    def test_known_prevalent_rejected(self):
        with pytest.raises(ValueError):
            update_g_collapsed(record((0,)), ModelParams.of((1.0,), 1.0, (0.0,), 0.5), "weibull",
                               np.random.default_rng(0))


class TestPropensity:
    def test_signs(self):
        gen = np.random.default_rng(3)
        assert all(update_w(1, (0.0,), (1.0,), gen) > 0 for _ in range(500))
        assert all(update_w(0, (0.0,), (1.0,), gen) <= 0 for _ in range(500))

    def test_far_tail_mean(self):
        gen = np.random.default_rng(4)
        draws = np.array([update_w(1, (-3.0,), (1.0,), gen) for _ in range(100_000)])
        assert np.all(np.isfinite(draws)) and np.all(draws > 0)
        ref = stats.truncnorm(3.0, math.inf, loc=-3.0).mean()
        assert draws.mean() == pytest.approx(ref, abs=0.01)


class TestTransitionTime:
    params = ModelParams.of((1.5,), 0.5, (0.0,), 0.8)

    def test_prevalent_draw_is_unconstrained(self, event_record):
        n = 100_000
        pk = _replicate(event_record, n)
        x, _ = _draw_x(pk, np.ones(n, bool), self.params.beta_x, 0.5, AftFamily.WEIBULL, 0.8,
                       np.random.default_rng(5))
        assert stats.kstest(x, stats.weibull_min(c=2.0, scale=math.exp(1.5)).cdf).statistic < 0.01

    def test_single_interval(self):
        gen = np.random.default_rng(6)
        rec = record((0, 2.5))
        draws = [update_x(rec, 0, self.params, "weibull", 0.8, gen) for _ in range(2000)]
        assert min(draws) > 0 and max(draws) <= 2.5

    def test_component_frequencies(self, event_record):
        w = interval_weights(event_record, self.params.incidence, "weibull", 0.8).weights
        n = 100_000
        pk = _replicate(event_record, n)
        x, idx = _draw_x(pk, np.zeros(n, bool), self.params.beta_x, 0.5, AftFamily.WEIBULL, 0.8,
                         np.random.default_rng(7))
        freq = np.bincount(idx, minlength=2) / n
        assert np.allclose(freq, w, atol=0.005)
        assert np.array_equal(idx == 0, x > 3.0)

    def test_kernel_matches_array_route(self, event_record):
        """Transition-time law from the compiled sweep equals the array implementation."""
        n = 50_000
        pk = _replicate(event_record, n)
        x_np, _ = _draw_x(pk, np.zeros(n, bool), self.params.beta_x, 0.5, AftFamily.WEIBULL, 0.8,
                          np.random.default_rng(8))
        g, w, x_k, prob = np.empty(n, np.bool_), np.empty(n), np.empty(n), np.empty(n)
        interval = np.empty(n, np.int64)
        # a very negative probit index makes every label incident
        _kernels.subject_sweep(pk.visits, pk.n_visits, pk.event, pk.baseline_tested, pk.zx @ self.params.beta_x,
                               np.full(n, -40.0), 0.5, 0.8, _kernels.KIND_CODES["extreme_value"], True,
                               np.ones(n), np.random.default_rng(9), g, w, x_k, interval, prob)
        assert not g.any()
        assert stats.ks_2samp(x_np, x_k).pvalue > 0.001


class TestProbitCoefficients:
    def test_flat_prior_limit_is_least_squares(self):
        gen = np.random.default_rng(10)
        z, _ = np.linalg.qr(gen.normal(size=(50, 3)))
        w = gen.normal(size=50)
        draws = np.array([update_beta_w(w, z, 1e12, gen) for _ in range(20000)])
        assert np.allclose(draws.mean(axis=0), z.T @ w, atol=0.03)

    def test_empty_data_draws_prior(self):
        gen = np.random.default_rng(11)
        draws = np.array([update_beta_w(np.zeros(0), np.zeros((0, 2)), 4.0, gen) for _ in range(20000)])
        assert np.allclose(draws.mean(axis=0), 0, atol=0.05)
        assert np.allclose(draws.std(axis=0), 2.0, atol=0.05)

    def test_conjugate_posterior_mean(self):
        gen = np.random.default_rng(12)
        z = np.column_stack([np.ones(100), gen.normal(size=(100, 2))])
        w = z @ np.array([0.3, -0.5, 1.0]) + gen.normal(size=100)
        prec = z.T @ z + np.eye(3) / 2.0
        mean = np.linalg.solve(prec, z.T @ w)
        cov = np.linalg.inv(prec)
        draws = np.array([update_beta_w(w, z, 2.0, gen) for _ in range(100_000)])
        assert np.allclose(draws.mean(axis=0), mean, atol=0.005)
        se = np.sqrt(np.diag(cov) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3.5 * se)
        assert np.allclose(np.cov(draws.T), cov, atol=2e-4)


class TestIncidenceMetropolis:
    def test_zero_proposal_always_accepted(self):
        gen = np.random.default_rng(13)
        x = np.exp(gen.normal(1, 0.5, 30))
        z = np.ones((30, 1))
        for _ in range(50):
            (b, s), acc = update_beta_x_sigma(x, z, PriorConfig(), ((1.0,), 0.5), np.zeros((2, 2)), "weibull", gen)
            assert acc and b[0] == 1.0 and s == 0.5

    def test_weibull_target_transcription(self):
        gen = np.random.default_rng(14)
        beta, sigma = np.array([5.0]), 0.2
        z = np.ones((40, 1))
        x = np.exp(5.0 + 0.2 * np.log(gen.standard_exponential(40)))
        prior = PriorConfig(beta_x_var=3.0, sigma_var=2.0)
        shape = 1 / sigma
        gamma = np.exp(z @ beta)
        loglik = 40 * math.log(shape) + np.sum((shape - 1) * np.log(x) - shape * np.log(gamma) - (x / gamma) ** shape)
        log_prior = -0.5 * beta @ beta / 3.0 - sigma**2 / (2 * 2.0)
        # target on (beta, log sigma) drops sum(log x) and carries the log-Jacobian
        expected = loglik + log_prior + math.log(sigma) + np.log(x).sum()
        got = incidence_log_target(np.array([5.0, math.log(sigma)]), np.log(x), z, AftFamily.WEIBULL, prior)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_nonpositive_times_rejected(self):
        with pytest.raises(InvalidParameterError):
            update_beta_x_sigma(np.array([1.0, 0.0]), np.ones((2, 1)), PriorConfig(), ((0.0,), 1.0),
                                0.01 * np.eye(2), "weibull", np.random.default_rng(0))

    def test_exponential_keeps_unit_scale(self):
        gen = np.random.default_rng(15)
        x = gen.exponential(2.0, 30)
        for _ in range(20):
            (_, s), _ = update_beta_x_sigma(x, np.ones((30, 1)), PriorConfig(), ((0.5,), 1.0),
                                            np.eye(1) * 0.1, "exponential", gen)
            assert s == 1.0

    def test_long_run_matches_grid_posterior(self):
        gen = np.random.default_rng(16)
        n = 25
        x = np.exp(0.8 + 0.6 * np.log(gen.standard_exponential(n)))
        z = np.ones((n, 1))
        prior = PriorConfig()
        log_x = np.log(x)
        b_grid = np.linspace(-1.5, 3.0, 301)
        s_grid = np.linspace(0.05, 2.0, 400)

        def log_post(b, s):
            u = (log_x[None, None, :] - b[:, None, None]) / s[None, :, None]
            ll = np.sum(u - np.exp(u), axis=2) - n * np.log(s)[None, :]
            return ll - 0.5 * b[:, None] ** 2 - 0.5 * s[None, :] ** 2

        lp = log_post(b_grid, s_grid)
        dens = np.exp(lp - lp.max())
        s_marg = integrate.trapezoid(dens, b_grid, axis=0)
        s_cdf = integrate.cumulative_trapezoid(s_marg, s_grid, initial=0.0)
        s_cdf /= s_cdf[-1]

        cov = np.diag([0.03, 0.03])
        theta = (np.array([0.8]), 0.6)
        draws = []
        for k in range(200_000):
            theta, _ = update_beta_x_sigma(x, z, prior, theta, cov, "weibull", gen)
            if k >= 2000 and k % 2 == 0:
                draws.append(theta[1])
        ks = stats.kstest(draws, lambda s: np.interp(s, s_grid, s_cdf)).statistic
        assert ks < 0.02


class TestSensitivityUpdate:
    def test_no_data_uniform(self):
        gen = np.random.default_rng(17)
        draws = [update_kappa(SufficientStatsKappa(0, 0, 0, 0), KappaPrior(), gen) for _ in range(20000)]
        assert stats.kstest(draws, "uniform").statistic < 0.015

    def test_single_subject(self):
        gen = np.random.default_rng(18)
        stats_one = SufficientStatsKappa(1, 0, 0, 0)
        draws = [update_kappa(stats_one, KappaPrior(), gen) for _ in range(20000)]
        assert stats.kstest(draws, stats.beta(2, 1).cdf).statistic < 0.015

    def test_informative_prior_moments(self):
        gen = np.random.default_rng(19)
        draws = np.array([update_kappa(SufficientStatsKappa(0, 0, 0, 0), KappaPrior("beta", 50.4, 12.6), gen)
                          for _ in range(20000)])
        assert draws.mean() == pytest.approx(0.8, abs=0.003)
        assert draws.std() == pytest.approx(0.05, abs=0.003)

    def test_point_prior_returns_value(self):
        assert update_kappa(SufficientStatsKappa(3, 1, 2, 1), KappaPrior("point", value=0.9), None) == 0.9

    def test_corrupt_statistics(self):
        with pytest.raises(ConsistencyError):
            # visits_prevalent too small for the prevalent count makes the second shape negative
            update_kappa(SufficientStatsKappa(0, 0, 0, 5), KappaPrior(), np.random.default_rng(0))


def _small_data(seed=0, n=80, kappa=0.8):
    cfg = Sim1Config(n=n, theta=-0.3, kappa=kappa, beta_x=(1.5, 0.2, 0.2), sigma=0.5,
                     gap_bounds=(0.5, 1.5), censor_mean=4.0)
    return gen_sim1(cfg, seed)


class TestChain:
    spec = ModelSpec("weibull", PriorConfig(kappa=KappaPrior("beta", 50.4, 12.6)))

    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            SamplerConfig(burn_in_fraction=1.0)
        with pytest.raises(InvalidParameterError):
            SamplerConfig(proposal_cov=np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(InvalidParameterError):
            SamplerConfig(init="random")

    def test_step_order(self):
        ds, _ = _small_data()
        cfg = SamplerConfig(n_chains=1, check_every=10, max_iters=10, record_step_order=True)
        chain = GibbsChain(ds, self.spec, cfg, np.random.default_rng(0))
        chain.run(5)
        steps = [s for _, s in chain.step_log]
        assert steps == list(STEP_ORDER) * 5
        assert steps.index("g") < steps.index("x")

    def test_label_sign_invariant_and_known_prevalent(self):
        ds, _ = _small_data(1)
        cfg = SamplerConfig(n_chains=1, check_every=10, max_iters=10)
        chain = GibbsChain(ds, self.spec, cfg, np.random.default_rng(1))
        known = ~ds.packed.latent
        for _ in range(50):
            chain.step()
            st = chain.state
            assert np.array_equal(st.g.astype(bool), st.w > 0)
            assert np.all(st.g[known] == 1)
            assert np.all(st.x > 0)

    def test_identical_seeds_identical_draws(self):
        ds, _ = _small_data(2)
        cfg = SamplerConfig(n_chains=1, check_every=100, max_iters=100)
        a = run_chain(ds, self.spec, cfg, seed=5)
        b = run_chain(ds, self.spec, cfg, seed=5)
        assert np.array_equal(a.samples, b.samples)

    def test_point_prior_constant_kappa_and_exponential_sigma(self):
        ds, _ = _small_data(3)
        spec = ModelSpec("exponential", PriorConfig(kappa=KappaPrior("point", value=0.8)))
        draws = run_chain(ds, spec, SamplerConfig(n_chains=1, check_every=200, max_iters=200), seed=1)
        assert np.all(draws.kappa == 0.8)
        assert np.all(draws.sigma == 1.0)
        assert set(draws.fixed) == {"sigma", "kappa"}

    def test_non_collapsed_variant_runs(self):
        ds, _ = _small_data(4)
        cfg = SamplerConfig(n_chains=1, check_every=100, max_iters=100, collapsed_prevalence=False)
        draws = run_chain(ds, self.spec, cfg, seed=2)
        assert np.all(np.isfinite(draws.samples))

    def test_exhausted_budget_reported(self):
        ds, _ = _small_data(5)
        cfg = SamplerConfig(n_chains=2, check_every=10, max_iters=20, rhat_threshold=1.0 + 1e-9,
                            ess_threshold=1e9)
        res = run_sampler(ds, self.spec, cfg, seed=0)
        assert res.status == diagnostics.STOP_EXHAUSTED
        assert res.draws.samples.shape[:2] == (2, 20)
        assert len(res.history) == 2

    def test_all_prevalent_dataset(self):
        ds = Dataset(tuple(record((0,)) for _ in range(30)), ("intercept",), ("intercept",))
        cfg = SamplerConfig(n_chains=2, check_every=500, max_iters=1000)
        res = run_sampler(ds, self.spec, cfg, seed=0)
        assert np.median(res.draws.beta_w[:, 0]) > 1.0
        assert np.all(np.isfinite(res.draws.samples))

    def test_toy_fit_converges(self):
        ds, _ = _small_data(6, n=50)
        spec = ModelSpec("weibull", PriorConfig(kappa=KappaPrior("point", value=0.8)))
        res = run_sampler(ds, spec, SamplerConfig(n_chains=4, check_every=5000, max_iters=100_000), seed=3)
        assert res.converged

    def test_prior_initialization_runs(self):
        ds, _ = _small_data(7)
        cfg = SamplerConfig(n_chains=2, check_every=50, max_iters=50, init="prior")
        res = run_sampler(ds, self.spec, cfg, seed=0)
        assert np.all(np.isfinite(res.draws.samples))

    def test_prevalence_tracking(self):
        ds, _ = _small_data(8)
        cfg = SamplerConfig(n_chains=2, check_every=40, max_iters=40, track_prevalence=True)
        res = run_sampler(ds, self.spec, cfg, seed=0)
        counts = res.draws.prevalence_counts
        assert counts.shape == (2, len(ds))
        assert np.all(counts[:, ~ds.packed.latent] == 40)
