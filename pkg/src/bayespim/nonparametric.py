"""Model-free cumulative incidence estimates for interval-censored screening data.

``recode_baseline`` turns screening records into ``(left, right]`` intervals by
moving the baseline to a small positive time, ``turnbull_npmle`` computes the
classical self-consistency NPMLE on Turnbull's innermost intervals and
``em_misclassified`` extends the same EM to imperfect test sensitivity, where a
subject's event may lie in any cell before a false negative run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core_model import Dataset
from .errors import ConsistencyError, RecodingError

BASELINE_FRACTION = 0.01


@dataclass(frozen=True)
class TurnbullInput:
    """Half-open censoring intervals ``(left, right]``; ``right`` may be ``inf``."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float)
        right = np.asarray(self.right, dtype=float)
        if left.shape != right.shape or left.ndim != 1:
            raise ValueError("left and right must be equal-length vectors")
        if np.any(left < 0) or np.any(~(right > left)):
            raise ValueError("need 0 <= left < right for every interval")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __len__(self):
        return self.left.shape[0]


@dataclass(frozen=True)
class RecodedData:
    """Screening records with the baseline moved to ``baseline_time``.

    ``tests`` holds each subject's tested visit times after recoding, ``event``
    whether the final test was positive.
    """

    baseline_time: float
    tests: tuple
    event: np.ndarray
    intervals: TurnbullInput


@dataclass(frozen=True)
class NpmleEstimate:
    """Discrete estimate of a CDF supported on intervals ``(lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray
    masses: np.ndarray
    converged: bool
    iterations: int
    loglik: float

    def cdf(self, t):
        """Right-continuous step CDF jumping at the right end of each support interval."""
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.masses)])
        idx = np.searchsorted(self.upper, t, side="right")
        out = cum[idx]
        return out[()] if out.ndim == 0 else out

    @property
    def support(self):
        return list(zip(self.lower.tolist(), self.upper.tolist()))


# ---------------------------------------------------------------------------
# recoding


def recode_baseline(dataset: Dataset) -> RecodedData:
    """Move the baseline to 1% of the smallest second visit (or drop it when untested)."""
    if len(dataset) == 0:
        raise RecodingError("empty dataset")
    seconds = [r.visits[1] for r in dataset if r.n_visits > 1 and math.isfinite(r.visits[1])]
    if not seconds:
        raise RecodingError("no subject has a finite second visit")
    b = BASELINE_FRACTION * min(seconds)
    tests, left, right, event = [], [], [], []
    for rec in dataset:
        finite = [v for v in rec.visits if math.isfinite(v)]
        if rec.baseline_tested:
            times = [b] + finite[1:]
        else:
            times = finite[1:]
        tests.append(tuple(times))
        event.append(rec.event)
        if rec.event:
            right.append(times[-1])
            left.append(times[-2] if len(times) > 1 else 0.0)
        else:
            right.append(math.inf)
            left.append(times[-1] if times else 0.0)
    return RecodedData(b, tuple(tests), np.array(event, dtype=np.int64), TurnbullInput(left, right))


# ---------------------------------------------------------------------------
# Turnbull


def innermost_intervals(left, right):
    """Turnbull's innermost intervals ``(L, R]`` of a set of half-open intervals."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    values = np.concatenate([left, right])
    # right ends sort before left ends at ties because intervals are open on the left
    is_left = np.concatenate([np.ones(left.shape[0], bool), np.zeros(right.shape[0], bool)])
    order = np.lexsort((is_left, values))
    vals, kinds = values[order], is_left[order]
    starts = np.nonzero(kinds[:-1] & ~kinds[1:])[0]
    return vals[starts], vals[starts + 1]


def _em_step(h: np.ndarray, p: np.ndarray):
    denom = h @ p
    new_p = p * (h / denom[:, None]).mean(axis=0)
    return new_p / new_p.sum(), float(np.log(denom).sum())


def _loglik(h, p) -> float:
    with np.errstate(divide="ignore"):
        return float(np.log(h @ p).sum())


def _self_consistency(h: np.ndarray, tol: float, max_iter: int, check_monotone: bool,
                      accelerate: bool = False):
    """Self-consistency iterations; ``accelerate`` adds guarded SQUAREM extrapolation.

    An extrapolated point is only accepted when it does not lower the
    log-likelihood, so the sequence stays monotone either way.
    """
    k = h.shape[1]
    p = np.full(k, 1.0 / k)
    prev_ll = -math.inf
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        p1, ll = _em_step(h, p)
        if check_monotone and ll < prev_ll - 1e-10 * max(1.0, abs(prev_ll)):
            raise ConsistencyError(f"EM log-likelihood decreased at iteration {it}")
        prev_ll = ll
        if np.max(np.abs(p1 - p)) < tol:
            p = p1
            converged = True
            break
        if not accelerate:
            p = p1
            continue
        p2, ll1 = _em_step(h, p1)
        it += 1
        r = p1 - p
        v = p2 - p1 - r
        vn = np.linalg.norm(v)
        alpha = -np.linalg.norm(r) / vn if vn > 0 else -1.0
        alpha = min(alpha, -1.0)
        cand = np.clip(p - 2 * alpha * r + alpha * alpha * v, 0.0, None)
        cand /= cand.sum()
        ll2 = _loglik(h, p2)
        p = cand if np.isfinite(_loglik(h, cand)) and _loglik(h, cand) >= ll2 else p2
    ll = _loglik(h, p)
    return p, converged, it, ll


def turnbull_npmle(data: TurnbullInput, tol: float = 1e-8, max_iter: int = 100_000,
                   accelerate: bool = False) -> NpmleEstimate:
    """NPMLE of an interval-censored CDF by self-consistency on innermost intervals.

    ``accelerate`` switches on SQUAREM extrapolation, which converges to the same
    fixed point in far fewer iterations.
    """
    if len(data) == 0:
        raise ValueError("need at least one interval")
    q, p = innermost_intervals(data.left, data.right)
    h = ((data.left[:, None] <= q[None, :]) & (p[None, :] <= data.right[:, None])).astype(float)
    masses, converged, iters, ll = _self_consistency(h, tol, max_iter, True, accelerate)
    return NpmleEstimate(q, p, masses, converged, iters, ll)


# ---------------------------------------------------------------------------
# misclassification EM


def _observation_matrix(recoded: RecodedData, grid: np.ndarray, kappa: float) -> np.ndarray:
    """Probability of each subject's tests given an event in each grid cell.

    Cell ``k`` is ``(grid[k-1], grid[k]]`` with ``grid[-1] = inf`` closing the last
    cell; an event in cell ``k`` is present at every test time ``>= grid[k]``.
    """
    n, k = len(recoded.tests), grid.shape[0]
    log_miss = math.log1p(-kappa) if kappa < 1 else -math.inf
    h = np.zeros((n, k))
    for i, (times, ev) in enumerate(zip(recoded.tests, recoded.event)):
        t = np.asarray(times, dtype=float)
        # tests at or after the cell's right end see the disease
        n_after = t.shape[0] - np.searchsorted(t, grid, side="left")
        if ev:
            allowed = grid <= t[-1]
            misses = n_after - 1
            with np.errstate(invalid="ignore"):
                logp = math.log(kappa) + np.where(misses > 0, misses * log_miss, 0.0)
            h[i] = np.where(allowed, np.exp(logp), 0.0)
        else:
            with np.errstate(invalid="ignore"):
                logp = np.where(n_after > 0, n_after * log_miss, 0.0)
            h[i] = np.exp(logp)
    return h


def _reduce_columns(h: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    """Merge identical neighbouring cells and drop cells dominated by a neighbour."""
    changed = True
    while changed:
        changed = False
        keep_merge = np.ones(h.shape[1], bool)
        same = np.all(h[:, 1:] == h[:, :-1], axis=0)
        if np.any(same):
            # absorb cell j+1 into cell j when identical
            keep_merge[1:][same] = False
            groups = np.cumsum(keep_merge) - 1
            new_upper = np.zeros(keep_merge.sum())
            np.maximum.at(new_upper, groups, upper)
            lower = lower[keep_merge]
            upper = new_upper
            h = h[:, keep_merge]
            changed = True
        k = h.shape[1]
        if k > 1:
            le_left = np.zeros(k, bool)
            le_right = np.zeros(k, bool)
            le_left[1:] = np.all(h[:, 1:] <= h[:, :-1], axis=0)
            le_right[:-1] = np.all(h[:, :-1] <= h[:, 1:], axis=0)
            drop = le_left | le_right
            if np.any(drop) and not np.all(drop):
                h, lower, upper = h[:, ~drop], lower[~drop], upper[~drop]
                changed = True
    return h, lower, upper


def em_misclassified(
    dataset: Dataset,
    kappa: float,
    tol: float = 1e-8,
    max_iter: int = 100_000,
    recoded: Optional[RecodedData] = None,
    accelerate: bool = False,
) -> NpmleEstimate:
    """NPMLE of the mixture CIF under a known test sensitivity ``kappa``.

    The support is built from all recoded test times.  The first cell
    ``(0, baseline]`` carries the prevalence atom.  With ``kappa = 1`` the
    estimate coincides with :func:`turnbull_npmle` on the recoded intervals.
    ``accelerate`` adds the same guarded SQUAREM steps as the Turnbull fit.
    """
    if not 0.0 < kappa <= 1.0:
        raise ValueError("kappa must lie in (0, 1]")
    recoded = recode_baseline(dataset) if recoded is None else recoded
    times = np.unique(np.concatenate([np.asarray(t, float) for t in recoded.tests if len(t)] or [np.zeros(0)]))
    times = times[times > 0]
    upper = np.concatenate([times, [math.inf]])
    lower = np.concatenate([[0.0], times])
    h = _observation_matrix(recoded, upper, kappa)
    h, lower, upper = _reduce_columns(h, lower, upper)
    masses, converged, iters, ll = _self_consistency(h, tol, max_iter, True, accelerate)
    return NpmleEstimate(lower, upper, masses, converged, iters, ll)
