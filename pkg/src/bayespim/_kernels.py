"""Compiled per-subject loops for the sampler.

These mirror the vectorized reference implementations in ``core_model``,
``likelihood`` and ``gibbs`` but visit only the valid intervals of each record,
which avoids the padding overhead of the array code.  Normal-distribution
special functions are taken from ``scipy.special.cython_special``.
"""

from __future__ import annotations

import ctypes
import math

import numpy as np
from numba import njit
from numba.extending import get_cython_function_address

_unary = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)
_log_ndtr = _unary(get_cython_function_address("scipy.special.cython_special", "__pyx_fuse_1log_ndtr"))
_ndtri_exp = _unary(get_cython_function_address("scipy.special.cython_special", "ndtri_exp"))

EXTREME_VALUE, LOGISTIC, NORMAL = 0, 1, 2
KIND_CODES = {"extreme_value": EXTREME_VALUE, "logistic": LOGISTIC, "normal": NORMAL}
LOG_HALF = math.log(0.5)
LN2 = math.log(2.0)
NEG_INF = -np.inf


@njit
def log1mexp(a):
    if a > -LN2:
        return math.log(-math.expm1(a))
    return math.log1p(-math.exp(a))


@njit
def log_diff_exp(a, b):
    if a == NEG_INF or b >= a:
        return NEG_INF
    return a + log1mexp(b - a)


@njit
def logaddexp(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def logcdf(kind, s):
    if kind == EXTREME_VALUE:
        if s == np.inf:
            return 0.0
        return log1mexp(-math.exp(s)) if s > -745.0 else s
    if kind == LOGISTIC:
        return -logaddexp(0.0, -s)
    return _log_ndtr(s)


@njit
def logsf(kind, s):
    if kind == EXTREME_VALUE:
        return -math.exp(s) if s < 710.0 else NEG_INF
    if kind == LOGISTIC:
        return -logaddexp(0.0, s)
    return _log_ndtr(-s)


@njit
def ppf_log(kind, logp):
    if kind == EXTREME_VALUE:
        return math.log(-log1mexp(logp))
    if kind == LOGISTIC:
        return logp - log1mexp(logp)
    return _ndtri_exp(logp)


@njit
def isf_log(kind, logq):
    if kind == EXTREME_VALUE:
        return math.log(-logq)
    if kind == LOGISTIC:
        return log1mexp(logq) - logq
    return -_ndtri_exp(logq)


@njit
def log_mass(lfa, lfb, lsa, lsb):
    if lsa < LOG_HALF:
        return log_diff_exp(lsa, lsb)
    return log_diff_exp(lfb, lfa)


@njit
def truncated_resid(kind, sa, sb, lfa, lfb, lsa, lsb, u):
    """Inverse-CDF draw from the residual law on ``(sa, sb]``."""
    if lsa < LOG_HALF:
        r = math.exp(lsb - lsa) if lsb > NEG_INF else 0.0
        s = isf_log(kind, lsa + math.log(u + (1.0 - u) * r))
    else:
        r = math.exp(lfa - lfb) if lfa > NEG_INF else 0.0
        s = ppf_log(kind, lfb + math.log(u + (1.0 - u) * r))
    if s < sa:
        s = sa
    if s > sb:
        s = sb
    return s


@njit
def truncated_std_normal(a, b, u):
    """Standard normal restricted to ``(a, b]``."""
    lfa = _log_ndtr(a) if a > NEG_INF else NEG_INF
    lfb = _log_ndtr(b) if b < np.inf else 0.0
    lsa = _log_ndtr(-a) if a > NEG_INF else 0.0
    lsb = _log_ndtr(-b) if b < np.inf else NEG_INF
    return truncated_resid(NORMAL, a, b, lfa, lfb, lsa, lsb, u)


@njit
def _row_terms(visits, c, mu, sigma, kind, s_row, lf_row, ls_row):
    for k in range(c):
        v = visits[k]
        if v == 0.0:
            s_row[k] = NEG_INF
            lf_row[k] = NEG_INF
            ls_row[k] = 0.0
        elif v == np.inf:
            s_row[k] = np.inf
            lf_row[k] = 0.0
            ls_row[k] = NEG_INF
        else:
            s = (math.log(v) - mu) / sigma
            s_row[k] = s
            lf_row[k] = logcdf(kind, s)
            ls_row[k] = logsf(kind, s)


@njit
def _row_log_weights(c, event, kappa, lf_row, ls_row, lt_row):
    """Unnormalized log interval weights of one record; returns their log-sum."""
    log_detect = math.log(kappa) if event else 0.0
    log_miss = math.log1p(-kappa) if kappa < 1.0 else NEG_INF
    total = NEG_INF
    for j in range(c - 1):
        lo = c - 2 - j
        hi = c - 1 - j
        lm = log_mass(lf_row[lo], lf_row[hi], ls_row[lo], ls_row[hi])
        geo = 0.0 if j == 0 else j * log_miss
        lt = log_detect + geo + lm
        lt_row[j] = lt
        total = logaddexp(total, lt)
    return total


@njit
def log_weight_matrix(visits, n_visits, event, mu, sigma, kappa, kind):
    """``(n, max_c - 1)`` unnormalized log interval weights (``-inf`` padding)."""
    n, m = visits.shape
    out = np.full((n, max(m - 1, 1)), NEG_INF)
    s_row = np.empty(m)
    lf_row = np.empty(m)
    ls_row = np.empty(m)
    for i in range(n):
        c = n_visits[i]
        if c < 2:
            continue
        _row_terms(visits[i], c, mu[i], sigma, kind, s_row, lf_row, ls_row)
        _row_log_weights(c, event[i], kappa, lf_row, ls_row, out[i])
    return out


@njit
def subject_sweep(visits, n_visits, event, baseline_tested, mu, eta, sigma, kappa, kind,
                  collapsed, x_prev, rng, g_out, w_out, x_out, interval_out, prob_out):
    """Update ``g``, ``w`` and ``x`` for every record in place.

    Returns the number of records whose interval weights all underflowed.
    """
    n, m = visits.shape
    s_row = np.empty(m)
    lf_row = np.empty(m)
    ls_row = np.empty(m)
    lt_row = np.empty(max(m - 1, 1))
    log_detect_all = math.log(kappa)
    log_miss = math.log1p(-kappa) if kappa < 1.0 else NEG_INF
    dead = 0
    for i in range(n):
        c = n_visits[i]
        vrow = visits[i]
        _row_terms(vrow, c, mu[i], sigma, kind, s_row, lf_row, ls_row)
        if c == 1:
            g = True
            prob_out[i] = 1.0
            log_inc = NEG_INF
        else:
            log_inc = _row_log_weights(c, event[i], kappa, lf_row, ls_row, lt_row)
            expo = c - 2 + baseline_tested[i]
            lp_prev = _log_ndtr(eta[i]) + (log_detect_all if event[i] else 0.0)
            if expo > 0:
                lp_prev += expo * log_miss
            if collapsed:
                lp_inc = _log_ndtr(-eta[i]) + log_inc
            else:
                xp = x_prev[i]
                if xp > vrow[c - 1]:
                    lp_inc = NEG_INF
                else:
                    fn = -1
                    for k in range(c):
                        if vrow[k] >= xp:
                            fn += 1
                    lp_inc = _log_ndtr(-eta[i]) + (log_detect_all if event[i] else 0.0)
                    if fn > 0:
                        lp_inc += fn * log_miss
            den = logaddexp(lp_prev, lp_inc)
            if den == NEG_INF:
                p1 = 0.0
            else:
                p1 = math.exp(lp_prev - den)
            prob_out[i] = p1
            g = rng.random() < p1
        # propensity
        if g:
            w = eta[i] + truncated_std_normal(-eta[i], np.inf, rng.random())
        else:
            w = eta[i] + truncated_std_normal(-np.inf, -eta[i], rng.random())
        # transition time
        u = rng.random()
        if g:
            x = math.exp(mu[i] + sigma * ppf_log(kind, math.log(u)))
            j = 0
        elif log_inc == NEG_INF:
            dead += 1
            j = 0
            lo_v = vrow[c - 2]
            hi_v = vrow[c - 1]
            span = hi_v - lo_v if hi_v < np.inf else max(lo_v, 1.0)
            x = lo_v + u * span
        else:
            target = rng.random()
            acc = 0.0
            j = c - 2
            for k in range(c - 1):
                acc += math.exp(lt_row[k] - log_inc)
                if target < acc:
                    j = k
                    break
            while lt_row[j] == NEG_INF:
                j -= 1
            lo = c - 2 - j
            hi = c - 1 - j
            s = truncated_resid(kind, s_row[lo], s_row[hi], lf_row[lo], lf_row[hi], ls_row[lo], ls_row[hi], u)
            x = math.exp(mu[i] + sigma * s)
            lo_v = vrow[lo]
            hi_v = vrow[hi]
            if x <= lo_v:
                x = np.nextafter(lo_v, np.inf)
            if x > hi_v:
                x = hi_v
        if not x > 0.0:
            x = 5e-324
        g_out[i] = g
        w_out[i] = w
        x_out[i] = x
        interval_out[i] = j
    return dead
