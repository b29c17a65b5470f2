"""Convergence diagnostics, WAIC and the stop/continue rule for the sampler."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np
from scipy import special

CONTINUE = "continue"
STOP_CONVERGED = "stop_converged"
STOP_EXHAUSTED = "stop_exhausted"


def _as_chains(chains) -> np.ndarray:
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("chains must be a (n_chains, n_draws) array")
    return arr


def is_degenerate(chains) -> bool:
    """True when every chain is constant, so no variance ratio is defined."""
    arr = _as_chains(chains)
    return bool(np.all(np.ptp(arr, axis=1) == 0))


def split_rhat(chains) -> float:
    """Potential scale reduction factor computed on split chains.

    Each chain is cut into two halves (the middle draw is dropped for odd
    lengths) and the usual between/within variance ratio is formed over the
    resulting ``2 * n_chains`` sequences.  Returns ``inf`` for degenerate traces.
    Values below 1 only reflect the finite-length factor ``(n - 1) / n`` and are
    reported as 1.
    """
    arr = _as_chains(chains)
    n_chains, n = arr.shape
    if n_chains < 2 or n < 4:
        raise ValueError("split R-hat needs at least 2 chains of 4 draws")
    half = n // 2
    halves = np.concatenate([arr[:, :half], arr[:, n - half :]], axis=0)
    within = halves.var(axis=1, ddof=1).mean()
    if within == 0:
        return math.inf
    between_over_n = halves.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * within + between_over_n
    return max(1.0, float(math.sqrt(var_plus / within)))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(centered, size, axis=-1)
    acov = np.fft.irfft(spec * np.conj(spec), size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(chains) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence.

    Returns 0 for constant traces; never exceeds the total number of draws.
    """
    arr = _as_chains(chains)
    n_chains, n = arr.shape
    if n < 4:
        raise ValueError("ESS needs at least 4 draws per chain")
    if is_degenerate(arr):
        return 0.0
    acov = _autocovariance(arr)
    within = acov[:, 0].mean() * n / (n - 1)
    var_plus = within * (n - 1) / n
    if n_chains > 1:
        var_plus += arr.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return 0.0
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    n_pairs = n // 2
    pair_sums = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    negative = np.nonzero(pair_sums < 0)[0]
    stop = negative[0] if negative.size else n_pairs
    pairs = np.minimum.accumulate(pair_sums[:stop]) if stop else np.zeros(0)
    tau = -1.0 + 2.0 * pairs.sum() if stop else 1.0
    total = n_chains * n
    ess = total / tau if tau > 0 else float(total)
    return float(min(ess, total))


# ---------------------------------------------------------------------------
# WAIC


@dataclass(frozen=True)
class WaicResult:
    """WAIC with the lppd and penalty split out.

    ``waic = -2 * (lppd - penalty)`` where the penalty is twice the gap between
    the log of the mean likelihood and the mean log-likelihood.  ``pointwise``
    holds per-unit contributions; ``waic_variance`` uses the posterior-variance
    penalty instead and ``waic_total`` evaluates the same criterion on the
    total-data likelihood rather than unit by unit.
    """

    waic: float
    lppd: float
    penalty: float
    pointwise: np.ndarray
    penalty_variance: float
    waic_variance: float
    waic_total: float
    excluded_units: tuple = ()
    dropped_draws: int = 0


def waic(loglik_matrix) -> WaicResult:
    """WAIC from a ``(draws, units)`` log-likelihood matrix; lower is better."""
    ll = np.asarray(loglik_matrix, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("need a (draws >= 2, units) log-likelihood matrix")
    all_bad = np.all(~np.isfinite(ll), axis=0)
    excluded = tuple(int(i) for i in np.nonzero(all_bad)[0])
    if excluded:
        warnings.warn(f"{len(excluded)} units have no finite log-likelihood and are excluded", RuntimeWarning)
    ll = ll[:, ~all_bad]
    good_rows = np.all(np.isfinite(ll), axis=1)
    dropped = int((~good_rows).sum())
    if dropped:
        warnings.warn(f"{dropped} draws with non-finite log-likelihood dropped", RuntimeWarning)
    ll = ll[good_rows]
    s = ll.shape[0]
    if s < 2:
        raise ValueError("fewer than 2 usable draws")
    log_s = math.log(s)
    lppd_i = special.logsumexp(ll, axis=0) - log_s
    mean_i = ll.mean(axis=0)
    penalty_i = 2.0 * (lppd_i - mean_i)
    pointwise = -2.0 * (lppd_i - penalty_i)
    lppd = float(lppd_i.sum())
    penalty = float(penalty_i.sum())
    var_pen = float(ll.var(axis=0, ddof=1).sum())
    total = ll.sum(axis=1)
    waic_total = -2.0 * (2.0 * total.mean() - (special.logsumexp(total) - log_s))
    return WaicResult(
        waic=float(pointwise.sum()),
        lppd=lppd,
        penalty=penalty,
        pointwise=pointwise,
        penalty_variance=var_pen,
        waic_variance=-2.0 * (lppd - var_pen),
        waic_total=float(waic_total),
        excluded_units=excluded,
        dropped_draws=dropped,
    )


# ---------------------------------------------------------------------------
# convergence policy


@dataclass(frozen=True)
class ConvergenceReport:
    rhat: Dict[str, float]
    ess: Dict[str, float]
    converged: bool
    iterations_used: int
    checks_performed: int
    degenerate: tuple = ()

    def to_dict(self) -> dict:
        return {
            "rhat": dict(self.rhat),
            "ess": dict(self.ess),
            "converged": self.converged,
            "iterations_used": self.iterations_used,
            "checks_performed": self.checks_performed,
            "degenerate": list(self.degenerate),
        }


@dataclass(frozen=True)
class PolicyThresholds:
    rhat_threshold: float = 1.1
    ess_threshold: float = 40.0
    max_iters: int = 500_000


def assess(
    samples,
    names: Sequence[str],
    iterations_used: int,
    checks_performed: int,
    thresholds: PolicyThresholds = PolicyThresholds(),
    fixed: Sequence[str] = (),
) -> ConvergenceReport:
    """Diagnostics on the most recent half of ``samples`` (chains x draws x params).

    Parameters listed in ``fixed`` are held constant by design and skipped.
    """
    samples = np.asarray(samples, dtype=float)
    n_draws = samples.shape[1]
    recent = samples[:, n_draws - n_draws // 2 :, :]
    rhat, ess, degenerate = {}, {}, []
    for k, name in enumerate(names):
        if name in fixed:
            continue
        trace = recent[:, :, k]
        if is_degenerate(trace):
            degenerate.append(name)
            rhat[name], ess[name] = math.inf, 0.0
            continue
        if trace.shape[0] < 2 or trace.shape[1] < 4:
            # too short to judge; never counts as converged
            rhat[name], ess[name] = math.nan, 0.0
            continue
        rhat[name] = split_rhat(trace)
        ess[name] = effective_sample_size(trace)
    ok = all(
        rhat[n] < thresholds.rhat_threshold and ess[n] >= thresholds.ess_threshold for n in rhat
    )
    return ConvergenceReport(rhat, ess, bool(ok), iterations_used, checks_performed, tuple(degenerate))


def convergence_policy(report_history: Sequence[ConvergenceReport], config) -> str:
    """Decide whether the sampler should stop after the latest check.

    ``config`` provides ``rhat_threshold``, ``ess_threshold`` and ``max_iters``.
    """
    if not report_history:
        return CONTINUE
    last = report_history[-1]
    rhat_ok = all(v < config.rhat_threshold for v in last.rhat.values())
    ess_ok = all(v >= config.ess_threshold for v in last.ess.values())
    if rhat_ok and ess_ok:
        return STOP_CONVERGED
    if last.iterations_used >= config.max_iters:
        return STOP_EXHAUSTED
    return CONTINUE
