"""Synthetic screening cohorts with known ground truth.

Two designs are provided.  ``gen_sim1`` simulates a parametric screening process
with uniform gaps between visits and exponential right censoring after the
second visit.  ``gen_sim2`` resamples visit schedules from a reference cohort
(the donor pool), continues schedules past observed events with resampled
visit gaps and draws censoring times from bootstrapped Turnbull estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np
from .core_model import AftFamily, Dataset, ModelParams, ScreeningRecord
from .errors import InvalidParameterError, PoolConstructionError
from .nonparametric import TurnbullInput, turnbull_npmle

COVARIATE_LAWS = ("normal", "uniform", "crc")


@dataclass(frozen=True)
class Sim1Config:
    """Settings of the parametric screening simulation.

    The prevalence model is ``w = theta + z' beta_w_slopes + N(0, 1)``.  Visit
    gaps are uniform on ``gap_bounds`` and censoring happens at the second
    visit plus an exponential offset with mean ``censor_mean``.  ``covariate_law``
    selects two iid standard normal covariates (``"normal"``), two iid uniforms
    with unit variance (``"uniform"``) or a binary sex indicator with probability
    0.56 plus a standardized age (``"crc"``).
    """

    n: int = 1000
    theta: float = 0.11
    kappa: float = 0.8
    p_baseline_test: float = 1.0
    beta_x: tuple = (5.0, 0.2, 0.2)
    sigma: float = 0.2
    beta_w_slopes: tuple = (0.2, 0.2)
    family: str = "weibull"
    covariate_law: str = "normal"
    gap_bounds: tuple = (20.0, 30.0)
    censor_mean: float = 80.0

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidParameterError("n must be positive")
        if not 0.0 < self.kappa <= 1.0:
            raise InvalidParameterError("kappa must lie in (0, 1]")
        if not 0.0 <= self.p_baseline_test <= 1.0:
            raise InvalidParameterError("p_baseline_test must lie in [0, 1]")
        if self.covariate_law not in COVARIATE_LAWS:
            raise InvalidParameterError(f"covariate_law must be one of {COVARIATE_LAWS}")
        if len(self.beta_x) != 3 or len(self.beta_w_slopes) != 2:
            raise InvalidParameterError("two covariates plus an intercept are expected")
        lo, hi = self.gap_bounds
        if not 0 < lo <= hi:
            raise InvalidParameterError("gap bounds must satisfy 0 < low <= high")
        if self.censor_mean <= 0 or self.sigma <= 0:
            raise InvalidParameterError("censor_mean and sigma must be positive")
        if AftFamily.parse(self.family).fixes_sigma and self.sigma != 1.0:
            raise InvalidParameterError("the exponential family requires sigma == 1")

    @property
    def beta_w(self) -> tuple:
        return (self.theta,) + tuple(self.beta_w_slopes)

    @property
    def covariate_names(self) -> tuple:
        return ("female", "age") if self.covariate_law == "crc" else ("z1", "z2")

    @property
    def params(self) -> ModelParams:
        return ModelParams.of(self.beta_x, self.sigma, self.beta_w, self.kappa)


def crc_like_config(n: int = 810, **overrides) -> Sim1Config:
    """Sim1 settings mimicking a colonoscopy surveillance cohort (years scale)."""
    base = dict(
        n=n,
        theta=-0.51,
        kappa=0.8,
        p_baseline_test=0.93,
        beta_x=(2.79, -0.11, -0.17),
        sigma=0.74,
        beta_w_slopes=(-0.24, 0.33),
        covariate_law="crc",
        gap_bounds=(1.0, 6.0),
        censor_mean=5.0,
    )
    base.update(overrides)
    return Sim1Config(**base)


@dataclass(frozen=True)
class SimTruth:
    """Latent ground truth of a simulated cohort, aligned with its records."""

    x: np.ndarray
    w: np.ndarray
    g: np.ndarray
    r: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def prevalence(self) -> float:
        return float(np.mean(self.g))


def draw_residuals(family, size, rng) -> np.ndarray:
    """Standardized AFT residuals of the given family."""
    kind = AftFamily.parse(family).residual
    if kind == "extreme_value":
        return np.log(rng.standard_exponential(size))
    if kind == "logistic":
        return rng.logistic(size=size)
    return rng.standard_normal(size)


def _draw_covariates(law: str, n: int, rng) -> np.ndarray:
    if law == "normal":
        return rng.standard_normal((n, 2))
    if law == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), (n, 2))
    female = (rng.random(n) < 0.56).astype(float)
    return np.column_stack([female, rng.standard_normal(n)])


def _latents(zx, zw, params: ModelParams, family, rng):
    n = zx.shape[0]
    eps = draw_residuals(family, n, rng)
    x = np.exp(zx @ params.beta_x + params.sigma * eps)
    w = zw @ params.beta_w + rng.standard_normal(n)
    return x, w, w > 0


# ---------------------------------------------------------------------------
# screening engine


@dataclass
class _Screened:
    visits: np.ndarray  # (n, steps) padded with nan, finite visits only
    n_finite: np.ndarray
    event: np.ndarray


def _screen(x, g, r, kappa, propose, rng) -> _Screened:
    """Walk every subject through its visits, testing at each one.

    ``propose(step, prev_time, idx)`` returns the next visit times for the
    subjects ``idx``; non-finite or ``nan`` values mean right censoring before
    the next visit.  The baseline (time 0) is tested only when ``r`` is set.
    """
    n = x.shape[0]
    columns = [np.zeros(n)]
    n_finite = np.ones(n, dtype=np.int64)
    present = g.copy()
    event = r & present & (rng.random(n) < kappa)
    active = np.nonzero(~event)[0]
    prev = np.zeros(n)
    step = 1
    while active.size:
        t = propose(step, prev[active], active)
        col = np.full(n, np.nan)
        go = np.isfinite(t)
        active, t = active[go], t[go]
        col[active] = t
        columns.append(col)
        n_finite[active] += 1
        prev[active] = t
        sick = g[active] | (x[active] <= t)
        pos = sick & (rng.random(active.size) < kappa)
        # a non-prevalent subject can only test positive once the transition happened
        assert not np.any(pos & ~g[active] & (t < x[active]))
        event[active[pos]] = True
        active = active[~pos]
        step += 1
    return _Screened(np.column_stack(columns), n_finite, event)


def _records(screened: _Screened, r, zx, zw, id_prefix="") -> tuple:
    out = []
    for i in range(screened.visits.shape[0]):
        k = screened.n_finite[i]
        times = tuple(float(v) for v in screened.visits[i, :k])
        if screened.event[i]:
            outcomes = (0,) * (k - 1) + (1,)
        else:
            times = times + (math.inf,)
            outcomes = (0,) * (k + 1)
        out.append(
            ScreeningRecord(times, outcomes, int(r[i]), tuple(zx[i]), tuple(zw[i]), id=f"{id_prefix}{i + 1}")
        )
    return tuple(out)


def gen_sim1(config: Sim1Config, seed) -> tuple:
    """Simulate a parametric screening cohort; returns ``(dataset, truth)``."""
    rng = np.random.default_rng(seed)
    n = config.n
    z = _draw_covariates(config.covariate_law, n, rng)
    design = np.column_stack([np.ones(n), z])
    params = config.params
    x, w, g = _latents(design, design, params, config.family, rng)
    r = rng.random(n) < config.p_baseline_test
    lo, hi = config.gap_bounds
    censor = np.full(n, np.nan)

    def propose(step, prev, idx):
        t = prev + rng.uniform(lo, hi, idx.size)
        if step == 1:
            censor[idx] = t + rng.exponential(config.censor_mean, idx.size)
            return t
        return np.where(t <= censor[idx], t, np.nan)

    screened = _screen(x, g, r, config.kappa, propose, rng)
    names = ("intercept",) + config.covariate_names
    dataset = Dataset(_records(screened, r, design, design), names, names)
    truth = SimTruth(
        x, w, g.astype(np.int64), r.astype(np.int64),
        metadata={"design": "sim1", "covariate_law": config.covariate_law, "seed": repr(seed),
                  "empirical_prevalence": float(np.mean(g))},
    )
    return dataset, truth


def reference_dataset() -> Dataset:
    """The bundled CRC-like reference cohort used as the default donor pool.

    It was produced once by :func:`gen_reference` and is shipped as a stand-in for
    a real surveillance dataset.
    """
    from .io import read_dataset

    path = resources.files("bayespim") / "data" / "reference_ehr.csv"
    with resources.as_file(path) as p:
        dataset, _ = read_dataset(p)
    return dataset


def gen_reference(seed: int = 20240521, n: int = 810) -> tuple:
    """Regenerate the bundled reference cohort."""
    return gen_sim1(crc_like_config(n), seed)


# ---------------------------------------------------------------------------
# donor pool


@dataclass(frozen=True)
class CensoringCdfBank:
    """Bootstrapped piecewise-linear censoring-time CDFs in padded arrays.

    Row ``b`` describes ``F_b`` by support intervals ``(lower, upper]`` and the
    cumulative mass at each ``upper``; mass is spread uniformly inside an interval.
    """

    lower: np.ndarray
    upper: np.ndarray
    cum: np.ndarray

    @property
    def n_boot(self) -> int:
        return self.lower.shape[0]

    def cdf(self, b, t):
        """``F_b(t)`` for paired arrays of bootstrap indices and times."""
        b = np.asarray(b)
        t = np.asarray(t, dtype=float)
        lo, up, cum = self.lower[b], self.upper[b], self.cum[b]
        prev = np.concatenate([np.zeros(cum.shape[:-1] + (1,)), cum[..., :-1]], axis=-1)
        width = np.where(up > lo, up - lo, 1.0)
        frac = np.clip((t[..., None] - lo) / width, 0.0, 1.0)
        return np.sum((cum - prev) * frac, axis=-1)

    def sample_above(self, b, t0, rng):
        """Inverse-CDF draws from ``F_b`` conditioned on exceeding ``t0``."""
        b = np.asarray(b)
        t0 = np.asarray(t0, dtype=float)
        f0 = self.cdf(b, t0)
        u = f0 + (1.0 - f0) * rng.random(t0.shape)
        cum = self.cum[b]
        j = np.minimum((cum < u[:, None]).sum(axis=1), cum.shape[1] - 1)
        rows = np.arange(b.shape[0])
        prev = np.where(j > 0, cum[rows, np.maximum(j - 1, 0)], 0.0)
        mass = cum[rows, j] - prev
        lo, up = self.lower[b, j], self.upper[b, j]
        frac = np.where(mass > 0, (u - prev) / np.where(mass > 0, mass, 1.0), 1.0)
        out = lo + np.clip(frac, 0.0, 1.0) * (up - lo)
        exhausted = f0 >= 1.0 - 1e-12
        out = np.where(exhausted, t0, out)
        return np.maximum(out, np.nextafter(t0, np.inf))


@dataclass(frozen=True)
class DonorPool:
    """Reference cohort prepared for resampling-based simulation."""

    visits: np.ndarray  # (donors, max_finite) padded with nan
    n_finite: np.ndarray
    event: np.ndarray
    baseline_tested: np.ndarray
    zx: np.ndarray
    zw: np.ndarray
    event_diffs: np.ndarray
    censored_diffs: np.ndarray
    censoring: CensoringCdfBank
    x_names: tuple = ()
    w_names: tuple = ()

    @property
    def n_donors(self) -> int:
        return self.visits.shape[0]

    @property
    def last_visit(self) -> np.ndarray:
        return self.visits[np.arange(self.n_donors), self.n_finite - 1]


def _diffs(records) -> np.ndarray:
    out = []
    for rec in records:
        finite = [v for v in rec.visits if math.isfinite(v)]
        out.extend(b - a for a, b in zip(finite, finite[1:]))
    return np.asarray(out, dtype=float)


def build_donor_pool(reference: Dataset, n_boot: int = 1000, seed=0,
                     censoring_source: str = "all") -> DonorPool:
    """Difference-score pools and bootstrapped censoring CDFs of a reference cohort.

    Each bootstrap sample of censored records contributes the interval
    ``(last visit, last visit + resampled gap]`` for its censoring time.  With
    ``censoring_source="all"`` event records also enter, right-censored at their
    event visit, which removes the pull toward short censoring times that comes
    from fitting censored records alone (``censoring_source="censored"``).
    Mass the fit leaves on an unbounded interval is placed at its lower end.
    """
    if censoring_source not in ("all", "censored"):
        raise InvalidParameterError("censoring_source must be 'all' or 'censored'")
    events = [r for r in reference if r.event]
    censored = [r for r in reference if not r.event]
    if not events or not censored:
        raise PoolConstructionError("the reference needs at least one event and one censored record")
    event_diffs = _diffs(events)
    censored_diffs = _diffs(censored)
    if event_diffs.size == 0 or censored_diffs.size == 0:
        raise PoolConstructionError("a group has no visit gaps to resample")
    rng = np.random.default_rng(seed)
    last = np.array([r.last_finite_visit for r in censored])
    stopped = np.array([r.last_finite_visit for r in events]) if censoring_source == "all" else np.empty(0)
    fits = []
    for _ in range(n_boot):
        left = last[rng.integers(0, last.size, last.size)]
        right = left + rng.choice(censored_diffs, size=left.size)
        if stopped.size:
            extra = stopped[rng.integers(0, stopped.size, stopped.size)]
            left = np.concatenate([left, extra])
            right = np.concatenate([right, np.full(extra.size, np.inf)])
        fits.append(turnbull_npmle(TurnbullInput(left, right), tol=1e-6, accelerate=True))
    width = max(len(f.masses) for f in fits)
    bounded = [np.where(np.isfinite(f.upper), f.upper, f.lower) for f in fits]
    pad_to = float(max(u.max() for u in bounded))
    lower = np.full((n_boot, width), pad_to)
    upper = np.full((n_boot, width), pad_to)
    cum = np.ones((n_boot, width))
    for b, f in enumerate(fits):
        k = len(f.masses)
        lower[b, :k], upper[b, :k] = f.lower, bounded[b]
        cum[b, :k] = np.cumsum(f.masses) / f.masses.sum()
    m = max(r.n_visits for r in reference)
    visits = np.full((len(reference), m), np.nan)
    n_finite = np.zeros(len(reference), dtype=np.int64)
    for i, rec in enumerate(reference):
        finite = [v for v in rec.visits if math.isfinite(v)]
        visits[i, : len(finite)] = finite
        n_finite[i] = len(finite)
    pk = reference.packed
    return DonorPool(
        visits=visits,
        n_finite=n_finite,
        event=pk.event.astype(bool),
        baseline_tested=pk.baseline_tested.astype(bool),
        zx=pk.zx,
        zw=pk.zw,
        event_diffs=event_diffs,
        censored_diffs=censored_diffs,
        censoring=CensoringCdfBank(lower, upper, cum),
        x_names=reference.x_names,
        w_names=reference.w_names,
    )


def _sim2_screen(pool: DonorPool, params: ModelParams, family, kappa, n_sim, extended, omega,
                 p_baseline_test, rng):
    donor = rng.integers(0, pool.n_donors, n_sim)
    zx, zw = pool.zx[donor], pool.zw[donor]
    x, w, g = _latents(zx, zw, params, family, rng)
    p_r = float(np.mean(pool.baseline_tested)) if p_baseline_test is None else p_baseline_test
    r = rng.random(n_sim) < p_r
    boot = rng.integers(0, pool.censoring.n_boot, n_sim)
    censor = pool.censoring.sample_above(boot, pool.last_visit[donor], rng)
    if extended:
        censor = censor + omega
    donor_len = pool.n_finite[donor]
    donor_event = pool.event[donor]

    def propose(step, prev, idx):
        d = donor[idx]
        own = step < donor_len[idx]
        t = np.full(idx.size, np.nan)
        if np.any(own):
            t[own] = pool.visits[d[own], step]
        cont = ~own
        ev = cont & donor_event[idx]
        t[ev] = prev[ev] + rng.choice(pool.event_diffs, size=int(ev.sum()))
        if extended:
            cz = cont & ~donor_event[idx]
            t[cz] = prev[cz] + rng.choice(pool.censored_diffs, size=int(cz.sum()))
        return np.where(own | (t <= censor[idx]), t, np.nan)

    screened = _screen(x, g, r, kappa, propose, rng)
    return screened, (x, w, g, r, zx, zw, donor, censor)


def gen_sim2(pool: DonorPool, true_params: ModelParams, kappa_true: float, n_sim: int,
             extended: bool = False, omega: float = 10.0, seed=None, family="weibull",
             p_baseline_test: Optional[float] = None) -> tuple:
    """Resample a cohort of ``n_sim`` subjects from a donor pool; returns ``(dataset, truth)``.

    Donor visit schedules are copied; after a donor's observed event the schedule
    continues with gaps resampled from event-group donors until the censoring
    time.  In extended mode the censoring time is shifted by ``omega`` and
    censored donors also continue, with gaps from censored-group donors.
    """
    if omega < 0:
        raise InvalidParameterError("omega must be non-negative")
    if not 0.0 < kappa_true <= 1.0:
        raise InvalidParameterError("kappa must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    screened, (x, w, g, r, zx, zw, donor, censor) = _sim2_screen(
        pool, true_params, family, kappa_true, n_sim, extended, omega, p_baseline_test, rng
    )
    dataset = Dataset(_records(screened, r, zx, zw), pool.x_names, pool.w_names)
    truth = SimTruth(
        x, w, g.astype(np.int64), r.astype(np.int64),
        metadata={"design": "sim2", "extended": extended, "omega": omega, "seed": repr(seed),
                  "empirical_prevalence": float(np.mean(g)), "donor": donor.tolist(),
                  "censoring_time": censor.tolist()},
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# benchmark statistics


STAT_NAMES = ("mean_time", "sd_time", "mean_visits", "event_fraction")


def _stats_from(last_time, n_visits, event) -> np.ndarray:
    return np.array([last_time.mean(), last_time.std(ddof=1), n_visits.mean(), event.mean()])


def cohort_statistics(dataset: Dataset) -> dict:
    """Mean/sd of the last finite visit, mean number of finite visits, event share."""
    last = np.array([r.last_finite_visit for r in dataset])
    n_vis = np.array([r.n_visits - (1 if r.censored else 0) for r in dataset])
    event = np.array([r.event for r in dataset], dtype=float)
    return dict(zip(STAT_NAMES, _stats_from(last, n_vis, event)))


def replicate_statistics(pool: DonorPool, true_params: ModelParams, kappa_true: float, n_sim: int,
                         n_rep: int, seed=None, family="weibull", extended=False, omega=10.0,
                         p_baseline_test: Optional[float] = None, chunk: int = 200) -> np.ndarray:
    """Benchmark statistics of ``n_rep`` resampled cohorts, shape ``(n_rep, 4)``."""
    rng = np.random.default_rng(seed)
    out = np.empty((n_rep, len(STAT_NAMES)))
    done = 0
    while done < n_rep:
        k = min(chunk, n_rep - done)
        screened, _ = _sim2_screen(
            pool, true_params, family, kappa_true, k * n_sim, extended, omega, p_baseline_test, rng
        )
        rows = np.arange(k * n_sim)
        last = screened.visits[rows, screened.n_finite - 1].reshape(k, n_sim)
        n_vis = screened.n_finite.reshape(k, n_sim).astype(float)
        ev = screened.event.reshape(k, n_sim).astype(float)
        out[done : done + k, 0] = last.mean(axis=1)
        out[done : done + k, 1] = last.std(axis=1, ddof=1)
        out[done : done + k, 2] = n_vis.mean(axis=1)
        out[done : done + k, 3] = ev.mean(axis=1)
        done += k
    return out
