"""Domain types and distribution primitives of the prevalence-incidence mixture model.

The incidence part is an accelerated failure time (AFT) model,

    log x = z_x' beta_x + sigma * eps,

where the residual law of ``eps`` selects the family (standard extreme value for
Weibull, logistic for loglogistic, normal for lognormal; exponential is Weibull
with ``sigma`` fixed to one).  Prevalence at baseline follows a probit model
``Pr(g = 1) = Phi(z_w' beta_w)``.

All distribution functions are evaluated on the log scale so that truncated
draws stay accurate far in either tail.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import DegenerateIntervalError, InvalidParameterError, RecordValidationError

LOG_HALF = math.log(0.5)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class AftFamily(str, enum.Enum):
    WEIBULL = "weibull"
    LOGLOGISTIC = "loglogistic"
    LOGNORMAL = "lognormal"
    EXPONENTIAL = "exponential"

    @property
    def fixes_sigma(self) -> bool:
        return self is AftFamily.EXPONENTIAL

    @property
    def residual(self) -> str:
        if self in (AftFamily.WEIBULL, AftFamily.EXPONENTIAL):
            return "extreme_value"
        if self is AftFamily.LOGLOGISTIC:
            return "logistic"
        return "normal"

    @classmethod
    def parse(cls, value) -> "AftFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidParameterError(f"unknown AFT family {value!r}") from None


# ---------------------------------------------------------------------------
# log-scale helpers


def log1mexp(a):
    """Stable ``log(1 - exp(a))`` for ``a <= 0``."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > -math.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))


def log_diff_exp(a, b):
    """``log(exp(a) - exp(b))`` for ``a >= b``; ``-inf`` when equal."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(invalid="ignore"):
        out = a + log1mexp(b - a)
    return np.where(np.isneginf(a), -np.inf, out)


# ---------------------------------------------------------------------------
# standardized residual distributions


def resid_logcdf(kind: str, s):
    s = np.asarray(s, dtype=float)
    if kind == "extreme_value":
        with np.errstate(over="ignore"):
            return log1mexp(-np.exp(s))
    if kind == "logistic":
        return -np.logaddexp(0.0, -s)
    return special.log_ndtr(s)


def resid_logsf(kind: str, s):
    s = np.asarray(s, dtype=float)
    if kind == "extreme_value":
        with np.errstate(over="ignore"):
            return -np.exp(s)
    if kind == "logistic":
        return -np.logaddexp(0.0, s)
    return special.log_ndtr(-s)


def resid_logpdf(kind: str, s):
    s = np.asarray(s, dtype=float)
    if kind == "extreme_value":
        with np.errstate(over="ignore"):
            return s - np.exp(s)
    if kind == "logistic":
        a = np.abs(s)
        return -a - 2.0 * np.log1p(np.exp(-a))
    return -0.5 * s * s - HALF_LOG_2PI


def resid_ppf_log(kind: str, logp):
    """Quantile of the residual law at ``exp(logp)``."""
    logp = np.asarray(logp, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "extreme_value":
            return np.log(-log1mexp(logp))
        if kind == "logistic":
            return logp - log1mexp(logp)
        return special.ndtri_exp(logp)


def resid_isf_log(kind: str, logq):
    """Inverse survival function of the residual law at ``exp(logq)``."""
    logq = np.asarray(logq, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "extreme_value":
            return np.log(-logq)
        if kind == "logistic":
            return log1mexp(logq) - logq
        return -special.ndtri_exp(logq)


def resid_log_mass(kind: str, sa, sb):
    """Log probability of the standardized interval ``(sa, sb]``."""
    lfa, lfb = resid_logcdf(kind, sa), resid_logcdf(kind, sb)
    lsa, lsb = resid_logsf(kind, sa), resid_logsf(kind, sb)
    return _log_mass_from(lfa, lfb, lsa, lsb)


def _log_mass_from(lfa, lfb, lsa, lsb):
    upper = lsa < LOG_HALF
    return np.where(upper, log_diff_exp(lsa, lsb), log_diff_exp(lfb, lfa))


def sample_resid_truncated(kind: str, sa, sb, u, *, lfa=None, lfb=None, lsa=None, lsb=None):
    """Inverse-CDF draw from the residual law restricted to ``(sa, sb]``.

    Works in survival space when the interval sits in the upper half of the
    distribution and in CDF space otherwise, so that neither tail loses
    precision.  ``u`` are uniforms on (0, 1).  Precomputed log-CDF/log-SF values
    at the bounds may be passed to avoid recomputation.
    """
    sa = np.asarray(sa, dtype=float)
    sb = np.asarray(sb, dtype=float)
    u = np.asarray(u, dtype=float)
    lfa = resid_logcdf(kind, sa) if lfa is None else lfa
    lfb = resid_logcdf(kind, sb) if lfb is None else lfb
    lsa = resid_logsf(kind, sa) if lsa is None else lsa
    lsb = resid_logsf(kind, sb) if lsb is None else lsb
    upper = lsa < LOG_HALF
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        logq = lsa + np.log(u + (1.0 - u) * np.exp(lsb - lsa))
        logp = lfb + np.log(u + (1.0 - u) * np.exp(lfa - lfb))
    s = np.where(upper, resid_isf_log(kind, logq), resid_ppf_log(kind, logp))
    return np.clip(s, sa, sb)


# ---------------------------------------------------------------------------
# parameter containers


def _as_vector(values, name) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1:
        raise InvalidParameterError(f"{name} must be a vector")
    return arr


@dataclass(frozen=True)
class IncidenceParams:
    """AFT coefficients (intercept first) and scale."""

    beta_x: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta_x", _as_vector(self.beta_x, "beta_x"))
        sigma = float(self.sigma)
        if not (sigma > 0 and math.isfinite(sigma)):
            raise InvalidParameterError(f"sigma must be positive and finite, got {sigma}")
        object.__setattr__(self, "sigma", sigma)
        if not np.all(np.isfinite(self.beta_x)):
            raise InvalidParameterError("beta_x has non-finite entries")


@dataclass(frozen=True)
class PrevalenceParams:
    beta_w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta_w", _as_vector(self.beta_w, "beta_w"))
        if not np.all(np.isfinite(self.beta_w)):
            raise InvalidParameterError("beta_w has non-finite entries")


@dataclass(frozen=True)
class Sensitivity:
    kappa: float

    def __post_init__(self):
        k = float(self.kappa)
        if not (0.0 < k <= 1.0):
            raise InvalidParameterError(f"kappa must lie in (0, 1], got {k}")
        object.__setattr__(self, "kappa", k)


@dataclass(frozen=True)
class KappaPrior:
    """Prior on the test sensitivity.

    ``kind`` is ``"uniform"`` (Beta(1, 1)), ``"beta"`` with shapes ``a``/``b``, or
    ``"point"`` which fixes the sensitivity at ``value``.
    """

    kind: str = "uniform"
    a: float = 1.0
    b: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta", "point"):
            raise InvalidParameterError(f"unknown kappa prior {self.kind!r}")
        if self.kind == "uniform":
            object.__setattr__(self, "a", 1.0)
            object.__setattr__(self, "b", 1.0)
        if not (self.a > 0 and self.b > 0):
            raise InvalidParameterError("Beta shape parameters must be positive")
        if self.kind == "point" and not (0.0 < self.value <= 1.0):
            raise InvalidParameterError("point kappa must lie in (0, 1]")

    @property
    def is_point(self) -> bool:
        return self.kind == "point"

    @classmethod
    def beta_from_moments(cls, mean: float, sd: float) -> "KappaPrior":
        """Beta prior with the given mean and standard deviation."""
        common = mean * (1.0 - mean) / sd**2 - 1.0
        if common <= 0:
            raise InvalidParameterError("sd too large for a Beta prior with this mean")
        return cls("beta", a=mean * common, b=(1.0 - mean) * common)


@dataclass(frozen=True)
class PriorConfig:
    """Independent priors on all model parameters.

    ``beta_x_var`` and ``beta_w_var`` are the variances of the zero-mean normal
    priors on every coefficient.  ``sigma_var`` is the variance parameter of the
    half-normal prior on ``sigma`` (log density ``-sigma**2 / (2 * sigma_var)``).
    """

    beta_x_var: float = 1.0
    beta_w_var: float = 1.0
    sigma_var: float = 1.0
    kappa: KappaPrior = field(default_factory=KappaPrior)

    def __post_init__(self):
        for name in ("beta_x_var", "beta_w_var", "sigma_var"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# screening records


@dataclass(frozen=True)
class ScreeningRecord:
    """One subject: visit times (baseline 0 first, optional trailing ``inf``),
    per-visit test outcomes, baseline-test flag and covariate vectors.

    A series ends either with a positive test at the last finite visit or with
    the ``inf`` sentinel denoting right censoring.
    """

    visits: tuple
    outcomes: tuple
    baseline_tested: int
    covariates_x: tuple = (1.0,)
    covariates_w: tuple = (1.0,)
    id: Optional[str] = None

    def __post_init__(self):
        visits = tuple(float(v) for v in self.visits)
        outcomes = tuple(int(o) for o in self.outcomes)
        object.__setattr__(self, "visits", visits)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "baseline_tested", int(self.baseline_tested))
        object.__setattr__(self, "covariates_x", tuple(float(v) for v in self.covariates_x))
        object.__setattr__(self, "covariates_w", tuple(float(v) for v in self.covariates_w))
        self._validate()

    def _validate(self):
        v, o = self.visits, self.outcomes
        if len(v) == 0:
            raise RecordValidationError("empty visit vector")
        if len(o) != len(v):
            raise RecordValidationError("outcomes and visits differ in length")
        if v[0] != 0.0:
            raise RecordValidationError("first visit must be the baseline time 0")
        if any(not (b > a) for a, b in zip(v, v[1:])):
            raise RecordValidationError("visits must be strictly increasing")
        if any(math.isinf(t) for t in v[:-1]) or any(math.isnan(t) for t in v):
            raise RecordValidationError("only the last visit may be the infinity sentinel")
        if self.baseline_tested not in (0, 1):
            raise RecordValidationError("baseline_tested must be 0 or 1")
        if any(x not in (0, 1) for x in o):
            raise RecordValidationError("outcomes must be binary")
        if any(o[:-1]):
            raise RecordValidationError("only the last outcome may be positive")
        censored = math.isinf(v[-1])
        if censored and o[-1] == 1:
            raise RecordValidationError("positive outcome at the infinity sentinel")
        if not censored and o[-1] != 1:
            raise RecordValidationError("series must end with a positive test or the infinity sentinel")
        if len(v) == 1 and self.baseline_tested != 1:
            raise RecordValidationError("a positive baseline requires a baseline test")
        if any(not math.isfinite(c) for c in self.covariates_x + self.covariates_w):
            raise RecordValidationError("non-finite covariate")

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def event(self) -> int:
        return self.outcomes[-1]

    @property
    def censored(self) -> bool:
        return math.isinf(self.visits[-1])

    @property
    def known_prevalent(self) -> Optional[int]:
        return 1 if len(self.visits) == 1 else None

    @property
    def last_finite_visit(self) -> float:
        return self.visits[-2] if self.censored else self.visits[-1]

    @property
    def screening_type(self) -> int:
        """Visit-pattern type 1-6 (incident/censored/prevalent x baseline test)."""
        if self.n_visits == 1:
            return 3
        if self.baseline_tested:
            if self.event:
                return 1
            return 4 if self.n_visits == 2 else 2
        return 5 if self.event else 6


# ---------------------------------------------------------------------------
# distribution primitives


def _sigma_for(family: AftFamily, params: IncidenceParams) -> float:
    if family.fixes_sigma and params.sigma != 1.0:
        raise InvalidParameterError("the exponential family requires sigma == 1")
    return params.sigma


def _linear_predictor(beta, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if z.shape[-1] != beta.shape[0]:
        raise InvalidParameterError(
            f"covariate length {z.shape[-1]} does not match coefficient length {beta.shape[0]}"
        )
    return z @ beta


def standardize(family: AftFamily, x, params: IncidenceParams, z):
    """Standardized residual ``(log x - z'beta_x) / sigma``."""
    family = AftFamily.parse(family)
    sigma = _sigma_for(family, params)
    mu = _linear_predictor(params.beta_x, z)
    with np.errstate(divide="ignore"):
        return (np.log(np.asarray(x, dtype=float)) - mu) / sigma


def aft_log_density(family, x, params: IncidenceParams, z):
    """Log density of the transition time ``x`` under the AFT model."""
    family = AftFamily.parse(family)
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InvalidParameterError("density requires x > 0")
    s = standardize(family, x, params, z)
    out = resid_logpdf(family.residual, s) - math.log(params.sigma) - np.log(x)
    if not np.all(np.isfinite(out)):
        raise InvalidParameterError("non-finite log density")
    return out[()] if out.ndim == 0 else out


def aft_log_cdf(family, x, params: IncidenceParams, z):
    family = AftFamily.parse(family)
    s = standardize(family, x, params, z)
    return resid_logcdf(family.residual, s)


def aft_log_sf(family, x, params: IncidenceParams, z):
    family = AftFamily.parse(family)
    s = standardize(family, x, params, z)
    return resid_logsf(family.residual, s)


def aft_cdf(family, x, params: IncidenceParams, z):
    """Cumulative incidence ``F_x(x)``; exactly 0 at 0 and 1 at infinity."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidParameterError("CDF requires x >= 0")
    out = np.exp(aft_log_cdf(family, x, params, z))
    return out[()] if out.ndim == 0 else out


def aft_quantile(family, p, params: IncidenceParams, z):
    family = AftFamily.parse(family)
    sigma = _sigma_for(family, params)
    mu = _linear_predictor(params.beta_x, z)
    with np.errstate(divide="ignore"):
        s = resid_ppf_log(family.residual, np.log(np.asarray(p, dtype=float)))
    return np.exp(mu + sigma * s)


def sample_truncated_aft(family, params: IncidenceParams, z, lower, upper, rng, *, min_mass=1e-14):
    """Draw ``x`` from ``f_x`` restricted to ``(lower, upper]``.

    ``upper`` may be ``inf``.  Raises :class:`DegenerateIntervalError` when the
    interval probability is below ``min_mass``.
    """
    family = AftFamily.parse(family)
    lower = float(lower)
    upper = float(upper)
    if not (0.0 <= lower < upper):
        raise InvalidParameterError("need 0 <= lower < upper")
    sigma = _sigma_for(family, params)
    mu = float(_linear_predictor(params.beta_x, z))
    kind = family.residual
    with np.errstate(divide="ignore"):
        sa = (math.log(lower) - mu) / sigma if lower > 0 else -math.inf
    sb = (math.log(upper) - mu) / sigma if math.isfinite(upper) else math.inf
    log_mass = float(resid_log_mass(kind, sa, sb))
    threshold = math.log(min_mass) if min_mass > 0 else -math.inf
    if not log_mass > threshold:
        raise DegenerateIntervalError(
            f"interval ({lower}, {upper}] has probability {math.exp(log_mass):.3g}"
        )
    s = float(sample_resid_truncated(kind, sa, sb, rng.random()))
    x = math.exp(mu + sigma * s)
    x = min(max(x, math.nextafter(lower, math.inf)), upper)
    return x


def sample_truncated_normal(mean, lower, upper, rng, size=None):
    """Draw from ``N(mean, 1)`` restricted to ``(lower, upper]``.

    Inverse-CDF on the log scale keeps far-tail truncations (``|mean|`` of 10 or
    more standard deviations away from the bound) finite and exact.
    """
    mean = np.asarray(mean, dtype=float)
    a = np.asarray(lower, dtype=float) - mean
    b = np.asarray(upper, dtype=float) - mean
    if np.any(~(a < b)):
        raise InvalidParameterError("need lower < upper")
    shape = np.broadcast(a, b).shape if size is None else size
    u = rng.random(shape)
    out = mean + sample_resid_truncated("normal", a, b, u)
    return out[()] if np.ndim(out) == 0 else out


def probit_prob(beta_w, z):
    """``Phi(z' beta_w)``."""
    out = special.ndtr(_linear_predictor(beta_w, z))
    return out[()] if np.ndim(out) == 0 else out


def log_probit_pair(eta):
    """``(log Phi(eta), log(1 - Phi(eta)))`` computed without cancellation."""
    return special.log_ndtr(eta), special.log_ndtr(-eta)


# ---------------------------------------------------------------------------
# full parameter set and chain state


@dataclass(frozen=True)
class ModelParams:
    incidence: IncidenceParams
    prevalence: PrevalenceParams
    sensitivity: Sensitivity

    @property
    def beta_x(self):
        return self.incidence.beta_x

    @property
    def sigma(self):
        return self.incidence.sigma

    @property
    def beta_w(self):
        return self.prevalence.beta_w

    @property
    def kappa(self):
        return self.sensitivity.kappa

    @classmethod
    def of(cls, beta_x: Sequence[float], sigma: float, beta_w: Sequence[float], kappa: float):
        return cls(IncidenceParams(beta_x, sigma), PrevalenceParams(beta_w), Sensitivity(kappa))


@dataclass
class ChainState:
    """Mutable state of one Gibbs chain: parameters plus augmented latents.

    ``g`` is kept equal to ``w > 0`` after every propensity update and is fixed
    to one for records with an observed positive baseline.
    """

    beta_x: np.ndarray
    sigma: float
    beta_w: np.ndarray
    kappa: float
    x: np.ndarray
    w: np.ndarray
    g: np.ndarray
    rng: np.random.Generator
    iteration: int = 0

    @property
    def params(self) -> ModelParams:
        return ModelParams.of(self.beta_x, self.sigma, self.beta_w, self.kappa)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class PackedData:
    """Array view of a dataset used by the vectorized sampler and likelihood.

    Intervals are indexed in reverse visit order: column ``j`` of ``lower`` /
    ``upper`` holds the bounds ``(v_{c-j-1}, v_{c-j}]`` so that column 0 is the most
    recent interval.  ``lower_idx`` / ``upper_idx`` index into ``visits``.
    """

    visits: np.ndarray
    n_visits: np.ndarray
    event: np.ndarray
    baseline_tested: np.ndarray
    zx: np.ndarray
    zw: np.ndarray
    lower_idx: np.ndarray
    upper_idx: np.ndarray
    interval_mask: np.ndarray

    @property
    def n(self) -> int:
        return self.visits.shape[0]

    @property
    def latent(self) -> np.ndarray:
        """Records whose prevalence status is not observed."""
        return self.n_visits > 1

    @property
    def lower(self) -> np.ndarray:
        return np.take_along_axis(self.visits, self.lower_idx, axis=1)

    @property
    def upper(self) -> np.ndarray:
        return np.take_along_axis(self.visits, self.upper_idx, axis=1)

    @property
    def prevalent_exponent(self) -> np.ndarray:
        """Number of false negatives implied by prevalence, ``c - 2 + r``."""
        return np.where(self.n_visits > 1, self.n_visits - 2 + self.baseline_tested, 0)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of screening records sharing covariate designs."""

    records: tuple
    x_names: tuple = ()
    w_names: tuple = ()

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        if records:
            px = {len(r.covariates_x) for r in records}
            pw = {len(r.covariates_w) for r in records}
            if len(px) != 1 or len(pw) != 1:
                raise RecordValidationError("records disagree on covariate dimensions")
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "w_names", tuple(self.w_names))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    @property
    def p_x(self) -> int:
        return len(self.records[0].covariates_x) if self.records else len(self.x_names)

    @property
    def p_w(self) -> int:
        return len(self.records[0].covariates_w) if self.records else len(self.w_names)

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), self.x_names, self.w_names)

    @property
    def type_counts(self) -> dict:
        counts = {t: 0 for t in range(1, 7)}
        for rec in self.records:
            counts[rec.screening_type] += 1
        return counts

    @functools.cached_property
    def packed(self) -> PackedData:
        n = len(self.records)
        m = max((r.n_visits for r in self.records), default=1)
        visits = np.full((n, m), np.inf)
        c = np.zeros(n, dtype=np.int64)
        for i, rec in enumerate(self.records):
            visits[i, : rec.n_visits] = rec.visits
            c[i] = rec.n_visits
        n_int = max(m - 1, 1)
        j = np.arange(n_int)
        upper_idx = c[:, None] - 1 - j[None, :]
        lower_idx = upper_idx - 1
        mask = lower_idx >= 0
        upper_idx = np.where(mask, upper_idx, 0)
        lower_idx = np.where(mask, lower_idx, 0)
        return PackedData(
            visits=visits,
            n_visits=c,
            event=np.array([r.event for r in self.records], dtype=np.int64),
            baseline_tested=np.array([r.baseline_tested for r in self.records], dtype=np.int64),
            zx=np.array([r.covariates_x for r in self.records], dtype=float).reshape(n, self.p_x),
            zw=np.array([r.covariates_w for r in self.records], dtype=float).reshape(n, self.p_w),
            lower_idx=lower_idx,
            upper_idx=upper_idx,
            interval_mask=mask,
        )


@dataclass(frozen=True)
class ModelSpec:
    """AFT family plus prior configuration for a fit."""

    family: AftFamily = AftFamily.WEIBULL
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        object.__setattr__(self, "family", AftFamily.parse(self.family))
