"""Test-outcome probabilities, interval mixture weights and the observed-data likelihood.

For a subject with visits ``v_1 = 0 < ... < v_c`` (``v_c`` possibly infinite) the
incidence contribution is a mixture over the consecutive visit intervals.  Interval
``j = 1`` is the most recent one, ``(v_{c-1}, v_c]``; an incident transition in
interval ``j`` implies ``j - 1`` false negative tests.  Everything is evaluated in
log space because ``(1 - kappa)**(j - 1)`` underflows quickly for long series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core_model import (
    AftFamily,
    Dataset,
    IncidenceParams,
    ModelParams,
    PackedData,
    ScreeningRecord,
    log_diff_exp,
    resid_logcdf,
    resid_logsf,
    LOG_HALF,
)
from .errors import ConsistencyError, ZeroMassError


@dataclass(frozen=True)
class IntervalWeights:
    """Normalized and unnormalized mixture weights over a record's visit intervals.

    Entry ``j`` (0-based) corresponds to the interval ``intervals[j]``, ordered from
    the most recent interval backwards.
    """

    weights: np.ndarray
    unnormalized: np.ndarray
    intervals: tuple

    @property
    def log_total(self) -> float:
        with np.errstate(divide="ignore"):
            return float(np.log(self.unnormalized.sum()))


@dataclass(frozen=True)
class SufficientStatsKappa:
    """Counts entering the conjugate Beta update of the test sensitivity.

    ``positives`` is the number of positive tests, ``negatives_incident`` the number
    of false negatives among non-prevalent subjects, ``visits_prevalent`` the sum of
    ``c + r`` over prevalent subjects and ``n_prevalent`` their count.
    """

    positives: int
    negatives_incident: int
    visits_prevalent: int
    n_prevalent: int

    def __post_init__(self):
        for name in ("positives", "negatives_incident", "visits_prevalent", "n_prevalent"):
            if getattr(self, name) < 0:
                raise ConsistencyError(f"negative sufficient statistic {name}")

    @property
    def false_negatives(self) -> int:
        return self.negatives_incident + self.visits_prevalent - 2 * self.n_prevalent

    def posterior(self, a: float, b: float) -> tuple:
        """Beta posterior shapes given prior shapes ``(a, b)``."""
        return self.positives + a, self.false_negatives + b


# ---------------------------------------------------------------------------
# record-level quantities


def false_negative_count(record: ScreeningRecord, g: int, x: float):
    """Number of false negative tests implied by ``(g, x)``; ``None`` if impossible."""
    if g:
        return record.n_visits - 2 + record.baseline_tested if record.n_visits > 1 else 0
    if x > record.visits[-1]:
        return None
    return sum(1 for v in record.visits if v >= x) - 1


def test_outcome_prob(record: ScreeningRecord, g: int, x: float, kappa: float) -> float:
    """Probability of the observed test results given prevalence ``g`` and transition ``x``."""
    fn = false_negative_count(record, g, x)
    if fn is None:
        return 0.0
    if g == 0 and x <= 0:
        return 0.0
    return float(kappa**record.event * (1.0 - kappa) ** fn)


def interval_weights(record: ScreeningRecord, params: IncidenceParams, family, kappa: float) -> IntervalWeights:
    """Mixture weights of the truncated transition-time distribution for a record."""
    if record.n_visits < 2:
        raise ValueError("interval weights need at least two visits")
    data = Dataset((record,))
    log_masses = log_interval_masses(data.packed, params.beta_x, params.sigma, family)[0]
    log_tilde = log_tau_tilde(data.packed, log_masses[None, :], kappa)[0]
    j = record.n_visits - 1
    log_tilde = log_tilde[:j]
    total = special.logsumexp(log_tilde)
    if not np.isfinite(total):
        raise ZeroMassError("all interval weights underflowed")
    intervals = tuple((record.visits[-k - 2], record.visits[-k - 1]) for k in range(j))
    return IntervalWeights(np.exp(log_tilde - total), np.exp(log_tilde), intervals)


def unit_loglik(record: ScreeningRecord, params: ModelParams, family) -> float:
    """Log observed-data likelihood of one record."""
    return float(unit_loglik_vector(Dataset((record,)).packed, params, family)[0])


def dataset_loglik(dataset: Dataset, params: ModelParams, family):
    """Total log-likelihood and the per-record contributions."""
    if len(dataset) == 0:
        return 0.0, np.zeros(0)
    per_unit = unit_loglik_vector(dataset.packed, params, family)
    return float(per_unit.sum()), per_unit


def kappa_sufficient_stats(dataset: Dataset, g, interval_index) -> SufficientStatsKappa:
    """Sufficient statistics for ``kappa`` given prevalence labels and the interval
    (0 = most recent) containing each non-prevalent transition time."""
    packed = dataset.packed
    return kappa_stats_arrays(packed, np.asarray(g), np.asarray(interval_index))


def kappa_stats_arrays(packed: PackedData, g, interval_index) -> SufficientStatsKappa:
    g = g.astype(bool)
    c = packed.n_visits
    return SufficientStatsKappa(
        positives=int(packed.event.sum()),
        negatives_incident=int(interval_index[~g].sum()),
        visits_prevalent=int((c[g] + packed.baseline_tested[g]).sum()),
        n_prevalent=int(g.sum()),
    )


# ---------------------------------------------------------------------------
# vectorized evaluation


def visit_log_probs(packed: PackedData, beta_x, sigma: float, family):
    """Log CDF and log survival of the transition time at every padded visit."""
    family = AftFamily.parse(family)
    mu = packed.zx @ np.asarray(beta_x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (np.log(packed.visits) - mu[:, None]) / sigma
    return resid_logcdf(family.residual, s), resid_logsf(family.residual, s)


def log_interval_masses(packed: PackedData, beta_x, sigma: float, family, visit_logs=None):
    """``log[F(upper) - F(lower)]`` per record and interval, ``-inf`` on padding."""
    log_f, log_s = visit_logs if visit_logs is not None else visit_log_probs(packed, beta_x, sigma, family)
    lfa = np.take_along_axis(log_f, packed.lower_idx, axis=1)
    lfb = np.take_along_axis(log_f, packed.upper_idx, axis=1)
    lsa = np.take_along_axis(log_s, packed.lower_idx, axis=1)
    lsb = np.take_along_axis(log_s, packed.upper_idx, axis=1)
    upper_half = lsa < LOG_HALF
    out = np.where(upper_half, log_diff_exp(lsa, lsb), log_diff_exp(lfb, lfa))
    return np.where(packed.interval_mask, out, -np.inf)


def log_tau_tilde(packed: PackedData, log_masses, kappa: float):
    """Unnormalized log interval weights ``delta log kappa + j log(1 - kappa) + log mass``."""
    j = np.arange(log_masses.shape[1])
    geometric = special.xlog1py(j, -kappa)
    detect = special.xlogy(packed.event, kappa)
    out = detect[:, None] + geometric[None, :] + log_masses
    return np.where(packed.interval_mask, out, -np.inf)


def log_prevalent_term(packed: PackedData, kappa: float):
    """``log[kappa**delta (1 - kappa)**(c - 2 + r)]`` per record."""
    return special.xlogy(packed.event, kappa) + special.xlog1py(packed.prevalent_exponent, -kappa)


def unit_loglik_vector(packed: PackedData, params: ModelParams, family, log_masses=None):
    """Per-record log-likelihood, mixing incidence and prevalence on the log scale."""
    if log_masses is None:
        log_masses = log_interval_masses(packed, params.beta_x, params.sigma, family)
    eta = packed.zw @ params.beta_w
    log_phi, log_1m_phi = special.log_ndtr(eta), special.log_ndtr(-eta)
    incident = special.logsumexp(log_tau_tilde(packed, log_masses, params.kappa), axis=1)
    prevalent = log_prevalent_term(packed, params.kappa)
    with np.errstate(invalid="ignore"):
        mixed = np.logaddexp(log_1m_phi + incident, log_phi + prevalent)
    single = log_phi + math.log(params.kappa)
    return np.where(packed.latent, mixed, single)
