"""Reference computations that avoid the package's own numerics.

Distributions come from ``scipy.stats``; integrals use adaptive quadrature and
test-outcome probabilities are counted directly from visit vectors.
"""

import math

import numpy as np
from scipy import integrate, stats


def frozen_aft(family: str, mu: float, sigma: float):
    """scipy distribution of ``x`` with ``log x = mu + sigma * eps``."""
    scale = math.exp(mu)
    if family == "weibull":
        return stats.weibull_min(c=1.0 / sigma, scale=scale)
    if family == "exponential":
        return stats.expon(scale=scale)
    if family == "loglogistic":
        return stats.fisk(c=1.0 / sigma, scale=scale)
    if family == "lognormal":
        return stats.lognorm(s=sigma, scale=scale)
    raise ValueError(family)


def outcome_prob(visits, event, r, g, x, kappa):
    """Probability of the observed tests given ``(g, x)``, by counting tests."""
    finite = [v for v in visits if math.isfinite(v)]
    if g:
        n_neg = len(finite) - 1 - (0 if r else 1) + (0 if event else 1)
        # every finite test except the final positive one is a false negative
        return kappa ** event * (1 - kappa) ** n_neg
    if x > visits[-1]:
        return 0.0
    missed = sum(1 for v in visits if v >= x) - 1
    return kappa ** event * (1 - kappa) ** missed


def quad_unit_loglik(record, beta_x, sigma, beta_w, kappa, family):
    """Log-likelihood of one record by integrating over ``x`` with quadrature."""
    eta = float(np.dot(record.covariates_w, beta_w))
    phi = stats.norm.cdf(eta)
    if record.n_visits == 1:
        return math.log(phi * kappa)
    mu = float(np.dot(record.covariates_x, beta_x))
    dist = frozen_aft(family, mu, sigma)
    v, ev, r = record.visits, record.event, record.baseline_tested
    incident = 0.0
    for a, b in zip(v[:-1], v[1:]):
        def integrand(x):
            return outcome_prob(v, ev, r, 0, x, kappa) * dist.pdf(x)

        val, _ = integrate.quad(integrand, a, b, epsabs=1e-14, epsrel=1e-11, limit=200)
        incident += val
    prevalent = outcome_prob(v, ev, r, 1, None, kappa)
    return math.log((1 - phi) * incident + phi * prevalent)


def forward_prevalence(visits, r, event, beta_x, sigma, eta, kappa, family, n_draws, rng):
    """Pr(g = 1 | observed tests) by simulating the screening process and conditioning.

    Returns ``(probability, number of matching simulations)``.
    """
    g = rng.standard_normal(n_draws) + eta > 0
    x = frozen_aft(family, beta_x, sigma).rvs(size=n_draws, random_state=rng)
    finite = [t for t in visits if math.isfinite(t)]
    alive = np.ones(n_draws, dtype=bool)
    for j, t in enumerate(finite):
        if j == 0 and not r:
            continue
        sick = g | (x <= t) if t > 0 else g
        pos = sick & (rng.random(n_draws) < kappa)
        last = j == len(finite) - 1
        if last and event:
            alive &= pos
        else:
            alive &= ~pos
    n_match = int(alive.sum())
    return float(g[alive].mean()), n_match
