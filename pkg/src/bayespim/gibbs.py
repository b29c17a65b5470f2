"""Metropolis-within-Gibbs sampler with data augmentation.

One iteration updates, in this order: the latent prevalence labels ``g`` (collapsed
over ``w`` and ``x``), the probit propensities ``w``, the transition times ``x``,
the AFT parameters ``(beta_x, sigma)`` by random-walk Metropolis, the probit
coefficients ``beta_w`` from their Gaussian full conditional and the sensitivity
``kappa`` from its Beta full conditional.  The subject-level steps are vectorized
over subjects, which are conditionally independent given the parameters.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg, optimize, special

from . import _kernels, diagnostics
from .core_model import (
    AftFamily,
    ChainState,
    Dataset,
    KappaPrior,
    ModelParams,
    ModelSpec,
    PackedData,
    PriorConfig,
    ScreeningRecord,
    resid_logcdf,
    resid_logpdf,
    resid_logsf,
    resid_ppf_log,
    sample_resid_truncated,
    sample_truncated_normal,
)
from .errors import ConsistencyError, InvalidParameterError, NumericalDegeneracyWarning
from .likelihood import (
    SufficientStatsKappa,
    kappa_stats_arrays,
    log_interval_masses,
    log_prevalent_term,
    log_tau_tilde,
    unit_loglik_vector,
)

STEP_ORDER = ("g", "w", "x", "beta_x_sigma", "beta_w", "kappa")
ACCEPT_TARGET = 0.234
INIT_JITTER = 0.1


@dataclass(frozen=True)
class SamplerConfig:
    """Run-length, thinning, proposal and convergence settings.

    ``proposal_cov`` is the random-walk covariance for ``(beta_x, log sigma)``
    (``beta_x`` only for the exponential family); the default is ``0.01 * I``.
    When ``adapt_proposal`` is set the covariance is tuned during the first
    ``check_every // 2`` iterations and frozen afterwards.  ``init="data"``
    starts every chain from a jittered posterior mode of the collapsed model;
    ``init="prior"`` draws the parameters from their priors.
    """

    n_chains: int = 4
    check_every: int = 20_000
    max_iters: int = 500_000
    burn_in_fraction: float = 0.5
    thin: int = 1
    proposal_cov: Optional[np.ndarray] = None
    adapt_proposal: bool = True
    rhat_threshold: float = 1.1
    ess_threshold: float = 40.0
    n_jobs: int = 1
    max_loglik_draws: int = 2000
    track_prevalence: bool = False
    record_step_order: bool = False
    collapsed_prevalence: bool = True
    init: str = "data"

    def __post_init__(self):
        if self.n_chains < 1:
            raise InvalidParameterError("n_chains must be positive")
        if self.check_every < 4 or self.max_iters < self.check_every:
            raise InvalidParameterError("need check_every >= 4 and max_iters >= check_every")
        if not 0.0 < self.burn_in_fraction < 1.0:
            raise InvalidParameterError("burn_in_fraction must lie in (0, 1)")
        if self.thin < 1:
            raise InvalidParameterError("thin must be at least 1")
        if self.init not in ("data", "prior"):
            raise InvalidParameterError("init must be 'data' or 'prior'")
        if self.proposal_cov is not None:
            cov = np.atleast_2d(np.asarray(self.proposal_cov, dtype=float))
            if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
                raise InvalidParameterError("proposal_cov must be a symmetric matrix")
            if np.any(np.linalg.eigvalsh(cov) < 0):
                raise InvalidParameterError("proposal_cov must be positive semi-definite")
            object.__setattr__(self, "proposal_cov", cov)

    @property
    def thresholds(self) -> diagnostics.PolicyThresholds:
        return diagnostics.PolicyThresholds(self.rhat_threshold, self.ess_threshold, self.max_iters)


def parameter_names(dataset: Dataset) -> list:
    xs = dataset.x_names or tuple(str(k) for k in range(dataset.p_x))
    ws = dataset.w_names or tuple(str(k) for k in range(dataset.p_w))
    return [f"beta_x[{n}]" for n in xs] + ["sigma"] + [f"beta_w[{n}]" for n in ws] + ["kappa"]


@dataclass
class PosteriorDraws:
    """Multi-chain traces of ``(beta_x, sigma, beta_w, kappa)``.

    ``samples`` has shape ``(chains, kept_draws, params)`` and includes burn-in;
    draws from index ``burn_in`` onward are the retained posterior sample.
    """

    samples: np.ndarray
    names: list
    p_x: int
    p_w: int
    family: AftFamily
    burn_in: int
    iterations: int
    thin: int = 1
    acceptance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prevalence_counts: Optional[np.ndarray] = None
    fixed: tuple = ()

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def retained(self) -> np.ndarray:
        return self.samples[:, self.burn_in :, :]

    def flat(self) -> np.ndarray:
        """Retained draws with chains stacked, shape ``(draws, params)``."""
        r = self.retained
        return r.reshape(-1, r.shape[-1])

    @property
    def beta_x(self) -> np.ndarray:
        return self.flat()[:, : self.p_x]

    @property
    def sigma(self) -> np.ndarray:
        return self.flat()[:, self.p_x]

    @property
    def beta_w(self) -> np.ndarray:
        return self.flat()[:, self.p_x + 1 : self.p_x + 1 + self.p_w]

    @property
    def kappa(self) -> np.ndarray:
        return self.flat()[:, -1]

    def column(self, name: str) -> np.ndarray:
        return self.flat()[:, self.names.index(name)]

    def params_at(self, k: int) -> ModelParams:
        row = self.flat()[k]
        return ModelParams.of(
            row[: self.p_x], row[self.p_x], row[self.p_x + 1 : self.p_x + 1 + self.p_w], row[-1]
        )

    def summary(self, level: float = 0.95) -> dict:
        """Posterior median and equal-tailed interval per parameter."""
        flat = self.flat()
        lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
        q = np.quantile(flat, [0.5, lo, hi], axis=0)
        return {n: (q[0, k], q[1, k], q[2, k]) for k, n in enumerate(self.names)}

    def loglik_matrix(self, dataset: Dataset, max_draws: Optional[int] = None) -> np.ndarray:
        """Per-unit log-likelihood at (an evenly spaced subset of) the retained draws."""
        flat = self.flat()
        if max_draws is not None and flat.shape[0] > max_draws:
            flat = flat[np.linspace(0, flat.shape[0] - 1, max_draws).round().astype(int)]
        packed = dataset.packed
        out = np.empty((flat.shape[0], packed.n))
        for k, row in enumerate(flat):
            params = ModelParams.of(
                row[: self.p_x], row[self.p_x], row[self.p_x + 1 : self.p_x + 1 + self.p_w], row[-1]
            )
            out[k] = unit_loglik_vector(packed, params, self.family)
        return out


@dataclass
class SamplerResult:
    draws: PosteriorDraws
    report: diagnostics.ConvergenceReport
    status: str
    history: list

    @property
    def converged(self) -> bool:
        return self.status == diagnostics.STOP_CONVERGED


# ---------------------------------------------------------------------------
# single-record update operations


def collapsed_prevalence_prob(packed: PackedData, log_incident, eta, kappa: float):
    """Pr(g = 1 | parameters, data) with ``w`` and ``x`` integrated out.

    ``log_incident`` is the log of the summed unnormalized interval weights.
    """
    log_prev = special.log_ndtr(eta) + log_prevalent_term(packed, kappa)
    log_inc = special.log_ndtr(-eta) + log_incident
    with np.errstate(invalid="ignore"):
        log_den = np.logaddexp(log_prev, log_inc)
        prob = np.exp(log_prev - log_den)
    return prob


def _single(record: ScreeningRecord) -> PackedData:
    return Dataset((record,)).packed


def _record_log_incident(packed, params: ModelParams, family):
    log_masses = log_interval_masses(packed, params.beta_x, params.sigma, family)
    with np.errstate(divide="ignore"):
        return special.logsumexp(log_tau_tilde(packed, log_masses, params.kappa), axis=1)


def update_g_collapsed(record: ScreeningRecord, params: ModelParams, family, rng) -> int:
    """Draw the prevalence label of a record with latent prevalence."""
    if record.n_visits < 2:
        raise ValueError("known-prevalent records have no latent prevalence")
    packed = _single(record)
    eta = packed.zw @ params.beta_w
    prob = collapsed_prevalence_prob(packed, _record_log_incident(packed, params, family), eta, params.kappa)[0]
    if not np.isfinite(prob):
        warnings.warn("both prevalence branches have zero probability", NumericalDegeneracyWarning)
        prob = 0.0
    return int(rng.random() < prob)


def update_w(g: int, beta_w, z, rng) -> float:
    """Probit propensity draw given the prevalence label."""
    mean = float(np.dot(z, beta_w))
    if g:
        return float(sample_truncated_normal(mean, 0.0, np.inf, rng))
    return float(sample_truncated_normal(mean, -np.inf, 0.0, rng))


def update_x(record: ScreeningRecord, g: int, params: ModelParams, family, kappa: float, rng) -> float:
    """Transition-time draw: unconstrained if prevalent, interval mixture otherwise."""
    packed = _single(record)
    x, _ = _draw_x(
        packed,
        np.array([int(g)]),
        np.asarray(params.beta_x, float),
        params.sigma,
        AftFamily.parse(family),
        kappa,
        rng,
    )
    return float(x[0])


def update_beta_w(w_aug, design, tau_w: float, rng) -> np.ndarray:
    """Conjugate Gaussian draw of the probit coefficients."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    w_aug = np.asarray(w_aug, dtype=float)
    p = design.shape[1]
    chol = linalg.cholesky(design.T @ design + np.eye(p) / tau_w, lower=True)
    return _draw_beta_w(chol, design.T @ w_aug, rng)


def _draw_beta_w(chol, zt_w, rng) -> np.ndarray:
    mean = linalg.cho_solve((chol, True), zt_w)
    return mean + linalg.solve_triangular(chol.T, rng.standard_normal(mean.shape[0]), lower=False)


def incidence_log_target(theta, log_x, zx, family: AftFamily, prior: PriorConfig) -> float:
    """Complete-data log posterior of ``(beta_x, log sigma)`` up to a constant.

    Includes the log-Jacobian of the ``sigma -> log sigma`` transform; the
    ``-sum(log x)`` term of the density is constant and omitted.
    """
    p_x = zx.shape[1]
    beta = theta[:p_x]
    log_sigma = 0.0 if family.fixes_sigma else theta[p_x]
    sigma = math.exp(log_sigma)
    s = (log_x - zx @ beta) / sigma
    target = resid_logpdf(family.residual, s).sum() - log_x.shape[0] * log_sigma
    target -= 0.5 * beta @ beta / prior.beta_x_var
    if not family.fixes_sigma:
        target += -0.5 * sigma * sigma / prior.sigma_var + log_sigma
    return float(target)


def update_beta_x_sigma(x_aug, design, prior: PriorConfig, current, proposal_cov, family, rng):
    """One random-walk Metropolis step for ``(beta_x, sigma)``.

    ``current`` is ``(beta_x, sigma)``.  Returns ``((beta_x, sigma), accepted)``.
    """
    family = AftFamily.parse(family)
    x_aug = np.asarray(x_aug, dtype=float)
    if np.any(x_aug <= 0):
        raise InvalidParameterError("transition times must be positive")
    design = np.atleast_2d(np.asarray(design, dtype=float))
    beta, sigma = current
    theta = np.asarray(beta, dtype=float)
    if not family.fixes_sigma:
        theta = np.append(theta, math.log(sigma))
    cov = np.atleast_2d(np.asarray(proposal_cov, dtype=float))
    chol = _safe_cholesky(cov)
    log_x = np.log(x_aug)
    cur = incidence_log_target(theta, log_x, design, family, prior)
    theta_new, _, accepted = _metropolis(theta, cur, chol, log_x, design, family, prior, rng)
    p_x = design.shape[1]
    new_sigma = 1.0 if family.fixes_sigma else math.exp(theta_new[p_x])
    return (theta_new[:p_x], new_sigma), accepted


def _safe_cholesky(cov):
    if not np.any(cov):
        return np.zeros_like(cov)
    return np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))


def _metropolis(theta, cur_target, chol, log_x, zx, family, prior, rng):
    prop = theta + chol @ rng.standard_normal(theta.shape[0])
    new_target = incidence_log_target(prop, log_x, zx, family, prior)
    log_u = math.log(rng.random())
    if np.isfinite(new_target) and log_u < new_target - cur_target:
        return prop, new_target, True
    return theta, cur_target, False


def update_kappa(stats: SufficientStatsKappa, kappa_prior: KappaPrior, rng) -> float:
    """Conjugate Beta draw of the sensitivity; the point prior returns its value."""
    if kappa_prior.is_point:
        return kappa_prior.value
    a, b = stats.posterior(kappa_prior.a, kappa_prior.b)
    if not (a > 0 and b > 0):
        raise ConsistencyError(f"non-positive Beta posterior parameters ({a}, {b})")
    return float(rng.beta(a, b))


# ---------------------------------------------------------------------------
# vectorized transition-time draw


def _draw_x(packed, g, beta_x, sigma, family, kappa, rng, visit_logs=None, log_tilde=None):
    """Draw transition times for all records; returns ``(x, interval_index)``.

    Prevalent records (``g == 1``) draw from the untruncated AFT law.  Others pick
    an interval by Gumbel-max on the log weights and draw inside it.
    """
    kind = family.residual
    n = packed.n
    mu = packed.zx @ beta_x
    if visit_logs is None:
        s_vis, log_f, log_s = _visit_terms(packed, mu, sigma, kind)
    else:
        s_vis, log_f, log_s = visit_logs
    if log_tilde is None:
        log_masses = log_interval_masses(packed, beta_x, sigma, family, visit_logs=(log_f, log_s))
        log_tilde = log_tau_tilde(packed, log_masses, kappa)
    g = np.asarray(g, dtype=bool)
    gumbel = rng.gumbel(size=log_tilde.shape)
    u = rng.random(n)
    with np.errstate(invalid="ignore"):
        keys = log_tilde + gumbel
    interval = np.argmax(keys, axis=1)
    dead = ~np.isfinite(keys.max(axis=1)) & ~g
    rows = np.arange(n)
    lo_idx = packed.lower_idx[rows, interval]
    hi_idx = packed.upper_idx[rows, interval]
    sa, sb = s_vis[rows, lo_idx], s_vis[rows, hi_idx]
    s_trunc = sample_resid_truncated(
        kind, sa, sb, u,
        lfa=log_f[rows, lo_idx], lfb=log_f[rows, hi_idx],
        lsa=log_s[rows, lo_idx], lsb=log_s[rows, hi_idx],
    )
    with np.errstate(divide="ignore"):
        s_free = resid_ppf_log(kind, np.log(u))
    s = np.where(g, s_free, s_trunc)
    x = np.exp(mu + sigma * s)
    lower = packed.visits[rows, lo_idx]
    upper = packed.visits[rows, hi_idx]
    inc = ~g
    x = np.where(inc, np.minimum(np.maximum(x, np.nextafter(lower, np.inf)), upper), x)
    if np.any(dead):
        warnings.warn(
            f"{int(dead.sum())} records have zero interval mass; drawing uniformly in the most recent interval",
            NumericalDegeneracyWarning,
        )
        lo = packed.visits[rows, packed.lower_idx[:, 0]]
        hi = packed.visits[rows, packed.upper_idx[:, 0]]
        span = np.where(np.isfinite(hi), hi - lo, np.maximum(lo, 1.0))
        fallback = np.maximum(lo + u * span, np.nextafter(lo, np.inf))
        x = np.where(dead, fallback, x)
        interval = np.where(dead, 0, interval)
    x = np.where(x > 0, x, np.finfo(float).tiny)
    return x, np.where(inc, interval, 0)


def _visit_terms(packed, mu, sigma, kind):
    with np.errstate(divide="ignore", invalid="ignore"):
        s_vis = (np.log(packed.visits) - mu[:, None]) / sigma
    return s_vis, resid_logcdf(kind, s_vis), resid_logsf(kind, s_vis)


# ---------------------------------------------------------------------------
# chain



def _crude_start(pk: PackedData):
    """Rough starting values from observed visit times.

    Log transition times are approximated by the midpoint of the most recent
    interval for detected events and by the last visit for censored records,
    then regressed on the incidence design.  The probit intercept starts at
    the share of observed prevalent records.
    """
    rows = np.arange(pk.n)
    lower = pk.visits[rows, pk.lower_idx[:, 0]]
    upper = pk.visits[rows, pk.upper_idx[:, 0]]
    use = pk.latent
    t = np.where(np.isfinite(upper), 0.5 * (lower + upper), lower)
    use = use & (t > 0)
    p_x, p_w = pk.zx.shape[1], pk.zw.shape[1]
    beta_x = np.zeros(p_x)
    sigma = 1.0
    if use.sum() > p_x:
        y = np.log(t[use])
        coef, *_ = np.linalg.lstsq(pk.zx[use], y, rcond=None)
        resid = y - pk.zx[use] @ coef
        beta_x = coef
        sigma = float(np.clip(resid.std(), 0.1, 3.0))
    share = float(np.clip(np.mean(~pk.latent), 0.05, 0.95)) if pk.n else 0.5
    beta_w = np.zeros(p_w)
    beta_w[0] = special.ndtri(share)
    return beta_x, sigma, beta_w


def _log_prior(beta_x, sigma, beta_w, kappa, prior: PriorConfig, fixes_sigma: bool) -> float:
    lp = -0.5 * float(beta_x @ beta_x) / prior.beta_x_var - 0.5 * float(beta_w @ beta_w) / prior.beta_w_var
    if not fixes_sigma:
        lp -= sigma * sigma / (2.0 * prior.sigma_var)
    kp = prior.kappa
    if not kp.is_point:
        lp += (kp.a - 1.0) * math.log(kappa) + (kp.b - 1.0) * math.log1p(-kappa)
    return lp


def _penalized_start(pk: PackedData, family: AftFamily, prior: PriorConfig):
    """Posterior mode of the collapsed model, searched from :func:`_crude_start`.

    The observed-data log-likelihood plus log-prior is maximized over
    ``(beta_x, log sigma, beta_w, logit kappa)``; fixed parameters stay fixed.
    """
    beta_x, sigma, beta_w = _crude_start(pk)
    kp = prior.kappa
    kappa = kp.value if kp.is_point else kp.a / (kp.a + kp.b)
    p_x, p_w = beta_x.size, beta_w.size
    free_sigma, free_kappa = not family.fixes_sigma, not kp.is_point
    if not free_sigma:
        sigma = 1.0

    def unpack(theta):
        k = p_x
        bx = theta[:k]
        sg = sigma
        if free_sigma:
            sg = math.exp(min(theta[k], 5.0))
            k += 1
        bw = theta[k : k + p_w]
        kap = kappa
        if free_kappa:
            kap = float(np.clip(special.expit(theta[k + p_w]), 1e-6, 1.0 - 1e-6))
        return bx, sg, bw, kap

    def objective(theta):
        bx, sg, bw, kap = unpack(theta)
        with np.errstate(all="ignore"):
            ll = float(unit_loglik_vector(pk, ModelParams.of(bx, sg, bw, kap), family).sum())
        val = -(ll + _log_prior(bx, sg, bw, kap, prior, not free_sigma))
        return val if math.isfinite(val) else 1e300

    theta0 = list(beta_x) + ([math.log(sigma)] if free_sigma else []) + list(beta_w)
    if free_kappa:
        theta0.append(float(special.logit(min(max(kappa, 1e-3), 1 - 1e-3))))
    theta0 = np.asarray(theta0)
    if pk.n == 0:
        return unpack(theta0)
    res = optimize.minimize(objective, theta0, method="L-BFGS-B")
    theta = res.x if np.all(np.isfinite(res.x)) and res.fun <= objective(theta0) else theta0
    return unpack(theta)


class _ProposalAdapter:
    """Running covariance plus Robbins-Monro scale, active during a fixed window."""

    def __init__(self, initial_cov, window: int):
        self.dim = initial_cov.shape[0]
        self.initial = initial_cov
        self.window = window
        self.start = window // 4
        self.count = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros((self.dim, self.dim))
        self.log_scale = 0.0
        self.cov = initial_cov.copy()
        self.chol = _safe_cholesky(self.cov)

    def update(self, iteration: int, theta, accepted: bool):
        if iteration >= self.window:
            return
        t = iteration + 1
        self.log_scale += (float(accepted) - ACCEPT_TARGET) / t**0.6
        self.log_scale = float(np.clip(self.log_scale, -10.0, 10.0))
        if iteration >= self.start:
            self.count += 1
            delta = theta - self.mean
            self.mean += delta / self.count
            self.m2 += np.outer(delta, theta - self.mean)
        if t % 25 == 0 or t == self.window:
            if self.count > 10 * self.dim + 50:
                emp = self.m2 / (self.count - 1) + 1e-10 * np.eye(self.dim)
                base = (2.38**2 / self.dim) * emp
            else:
                base = self.initial
            self.cov = math.exp(2.0 * self.log_scale) * base
            self.chol = _safe_cholesky(self.cov)


class GibbsChain:
    """State and transition kernel of a single chain."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, config: SamplerConfig, rng: np.random.Generator,
                 start: Optional[tuple] = None):
        """``start`` optionally supplies the ``(beta_x, sigma, beta_w, kappa)`` centre of data-based starts."""
        self.packed = dataset.packed
        self._start = start
        self.spec = spec
        self.family = spec.family
        self.prior = spec.prior
        self.config = config
        pk = self.packed
        self.p_x, self.p_w = pk.zx.shape[1], pk.zw.shape[1]
        self.dim = self.p_x + (0 if self.family.fixes_sigma else 1)
        self.kind_code = _kernels.KIND_CODES[self.family.residual]
        cov = config.proposal_cov if config.proposal_cov is not None else 0.01 * np.eye(self.dim)
        if cov.shape != (self.dim, self.dim):
            raise InvalidParameterError(f"proposal_cov must be {self.dim}x{self.dim}")
        window = config.check_every // 2 if config.adapt_proposal else 0
        self.adapter = _ProposalAdapter(cov, window)
        self.bw_chol = linalg.cholesky(pk.zw.T @ pk.zw + np.eye(self.p_w) / self.prior.beta_w_var, lower=True)
        self.accepted = 0
        self.prevalence_counts = np.zeros(pk.n, dtype=np.int64) if config.track_prevalence else None
        self.step_log: Optional[list] = [] if config.record_step_order else None
        self.state = self._initial_state(rng)

    def _initial_state(self, rng) -> ChainState:
        pk, prior = self.packed, self.prior
        kp = prior.kappa
        if self.config.init == "prior":
            beta_x = rng.normal(0.0, math.sqrt(prior.beta_x_var), self.p_x)
            sigma = abs(rng.normal(0.0, math.sqrt(prior.sigma_var)))
            beta_w = rng.normal(0.0, math.sqrt(prior.beta_w_var), self.p_w)
            kappa = kp.value if kp.is_point else float(rng.beta(kp.a, kp.b))
        else:
            beta_x, sigma, beta_w, kappa = self._mode()
            beta_x = beta_x + rng.normal(0.0, INIT_JITTER, self.p_x)
            sigma = sigma * math.exp(rng.normal(0.0, INIT_JITTER))
            beta_w = beta_w + rng.normal(0.0, INIT_JITTER, self.p_w)
            if not kp.is_point:
                kappa = float(special.expit(special.logit(kappa) + rng.normal(0.0, INIT_JITTER)))
        sigma = 1.0 if self.family.fixes_sigma else max(sigma, 1e-3)
        n = pk.n
        if self.config.init == "prior":
            latent = pk.latent
            observed_share = float(np.mean(~latent)) if n else 0.0
            g = np.where(latent, rng.random(n) < observed_share, True)
            w = sample_truncated_normal(
                pk.zw @ beta_w, np.where(g, 0.0, -np.inf), np.where(g, np.inf, 0.0), rng
            )
            w = np.atleast_1d(w)
            x, interval = _draw_x(pk, g, beta_x, sigma, self.family, kappa, rng)
        else:
            # labels, propensities and times from one collapsed sweep at the start values
            g = np.empty(n, dtype=np.bool_)
            w, x, prob = np.empty(n), np.empty(n), np.empty(n)
            interval = np.empty(n, dtype=np.int64)
            _kernels.subject_sweep(
                pk.visits, pk.n_visits, pk.event, pk.baseline_tested, pk.zx @ beta_x, pk.zw @ beta_w,
                sigma, kappa, self.kind_code, True, np.zeros(n), rng, g, w, x, interval, prob,
            )
        state = ChainState(np.asarray(beta_x, float), sigma, np.asarray(beta_w, float), kappa, x, w,
                           g.astype(np.int8), rng)
        self.interval = interval
        return state

    def _mode(self):
        if self._start is None:
            self._start = _penalized_start(self.packed, self.family, self.prior)
        bx, sg, bw, kap = self._start
        return np.array(bx, dtype=float), sg, np.array(bw, dtype=float), kap

    def _log(self, step):
        if self.step_log is not None:
            self.step_log.append((self.state.iteration, step))

    def current_row(self) -> np.ndarray:
        st = self.state
        return np.concatenate([st.beta_x, [st.sigma], st.beta_w, [st.kappa]])

    def step(self):
        st, pk, fam = self.state, self.packed, self.family
        rng = st.rng
        n = pk.n
        mu = pk.zx @ st.beta_x
        eta = pk.zw @ st.beta_w
        g = np.empty(n, dtype=np.bool_)
        w = np.empty(n)
        x = np.empty(n)
        interval = np.empty(n, dtype=np.int64)
        prob = np.empty(n)

        # prevalence labels, propensities and transition times, subject by subject
        self._log("g")
        self._log("w")
        self._log("x")
        dead = _kernels.subject_sweep(
            pk.visits, pk.n_visits, pk.event, pk.baseline_tested, mu, eta, st.sigma, st.kappa,
            self.kind_code, self.config.collapsed_prevalence, st.x, rng, g, w, x, interval, prob,
        )
        if dead:
            warnings.warn(
                f"{dead} records have zero interval mass; drawing uniformly in the most recent interval",
                NumericalDegeneracyWarning,
            )
        if np.any((w > 0) != g):
            raise ConsistencyError("propensity sign disagrees with prevalence label")

        # AFT parameters
        self._log("beta_x_sigma")
        theta = st.beta_x if fam.fixes_sigma else np.append(st.beta_x, math.log(st.sigma))
        log_x = np.log(x)
        cur = incidence_log_target(theta, log_x, pk.zx, fam, self.prior)
        theta, _, acc = _metropolis(theta, cur, self.adapter.chol, log_x, pk.zx, fam, self.prior, rng)
        self.adapter.update(st.iteration, theta, acc)
        self.accepted += int(acc)
        beta_x = theta[: self.p_x].copy()
        sigma = 1.0 if fam.fixes_sigma else math.exp(theta[self.p_x])

        # probit coefficients
        self._log("beta_w")
        beta_w = _draw_beta_w(self.bw_chol, pk.zw.T @ w, rng)

        # sensitivity
        self._log("kappa")
        stats = kappa_stats_arrays(pk, g, interval)
        kappa = update_kappa(stats, self.prior.kappa, rng)

        st.beta_x, st.sigma, st.beta_w, st.kappa = beta_x, sigma, beta_w, kappa
        st.x, st.w, st.g = x, w, g.astype(np.int8)
        self.interval = interval
        st.iteration += 1
        if self.prevalence_counts is not None:
            self.prevalence_counts += st.g

    def run(self, n_iter: int) -> np.ndarray:
        """Advance ``n_iter`` iterations and return the kept (thinned) rows."""
        thin = self.config.thin
        rows = []
        for _ in range(n_iter):
            self.step()
            if self.state.iteration % thin == 0:
                rows.append(self.current_row())
        if not rows:
            return np.zeros((0, self.p_x + self.p_w + 2))
        return np.vstack(rows)


def _advance(chain: GibbsChain, n_iter: int):
    rows = chain.run(n_iter)
    return chain, rows


def _chain_seeds(seed, n_chains):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def run_chain(dataset: Dataset, spec: ModelSpec, config: SamplerConfig, seed, n_iter: Optional[int] = None) -> PosteriorDraws:
    """Run one chain for ``n_iter`` iterations (default ``config.check_every``)."""
    n_iter = config.check_every if n_iter is None else n_iter
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chain = GibbsChain(dataset, spec, config, rng)
    rows = chain.run(n_iter)
    return _make_draws(dataset, spec, config, [rows], [chain], n_iter)


def _fixed_names(spec: ModelSpec, names):
    fixed = []
    if spec.family.fixes_sigma:
        fixed.append("sigma")
    if spec.prior.kappa.is_point:
        fixed.append("kappa")
    return tuple(fixed)


def _make_draws(dataset, spec, config, chain_rows, chains, iterations) -> PosteriorDraws:
    samples = np.stack(chain_rows)
    kept = samples.shape[1]
    burn_in = int(math.floor(kept * config.burn_in_fraction))
    names = parameter_names(dataset)
    counts = None
    if config.track_prevalence:
        counts = np.stack([c.prevalence_counts for c in chains])
    return PosteriorDraws(
        samples=samples,
        names=names,
        p_x=dataset.p_x,
        p_w=dataset.p_w,
        family=spec.family,
        burn_in=burn_in,
        iterations=iterations,
        thin=config.thin,
        acceptance=np.array([c.accepted / max(iterations, 1) for c in chains]),
        prevalence_counts=counts,
        fixed=_fixed_names(spec, names),
    )


def run_sampler(dataset: Dataset, spec: ModelSpec, config: SamplerConfig, seed=0) -> SamplerResult:
    """Run ``config.n_chains`` chains until convergence or ``max_iters``.

    Chains advance in blocks of ``check_every`` iterations; after each block the
    split R-hat and ESS over the most recent half of the draws decide whether to
    stop.  With ``n_jobs > 1`` the chains of a block run in worker processes; the
    draws are identical to the sequential run for the same seed.
    """
    rngs = _chain_seeds(seed, config.n_chains)
    start = _penalized_start(dataset.packed, spec.family, spec.prior) if config.init == "data" else None
    chains = [GibbsChain(dataset, spec, config, rng, start) for rng in rngs]
    names = parameter_names(dataset)
    fixed = _fixed_names(spec, names)
    blocks: List[list] = [[] for _ in chains]
    history = []
    iterations = 0
    status = diagnostics.CONTINUE
    executor = ProcessPoolExecutor(max_workers=config.n_jobs) if config.n_jobs > 1 else None
    try:
        while status == diagnostics.CONTINUE:
            n_iter = min(config.check_every, config.max_iters - iterations)
            if executor is not None:
                results = list(executor.map(_advance, chains, [n_iter] * len(chains)))
            else:
                results = [_advance(c, n_iter) for c in chains]
            chains = [r[0] for r in results]
            for k, (_, rows) in enumerate(results):
                blocks[k].append(rows)
            iterations += n_iter
            samples = np.stack([np.vstack(b) for b in blocks])
            report = diagnostics.assess(
                samples, names, iterations, len(history) + 1, config.thresholds, fixed
            )
            history.append(report)
            status = diagnostics.convergence_policy(history, config)
            if status == diagnostics.CONTINUE and iterations >= config.max_iters:
                status = diagnostics.STOP_EXHAUSTED
    finally:
        if executor is not None:
            executor.shutdown()
    draws = _make_draws(dataset, spec, config, [np.vstack(b) for b in blocks], chains, iterations)
    return SamplerResult(draws, history[-1], status, history)
