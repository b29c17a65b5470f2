"""Posterior cumulative incidence curves.

Every curve is computed per posterior draw through the closed-form AFT CDF and
then summarized pointwise by its median and an equal-tailed band.  Four kinds
are offered: the non-prevalent CIF at a covariate profile (``conditional``),
its average over a covariate sample (``marginal``) and the corresponding
mixture CIFs that add the prevalence point mass at time zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .core_model import AftFamily, Dataset, resid_logcdf
from .errors import InvalidParameterError

CONDITIONAL = "conditional"
MARGINAL = "marginal"
MIXTURE_CONDITIONAL = "mixture_conditional"
MIXTURE_MARGINAL = "mixture_marginal"
KINDS = (CONDITIONAL, MARGINAL, MIXTURE_CONDITIONAL, MIXTURE_MARGINAL)


@dataclass(frozen=True)
class CifCurve:
    """Pointwise posterior summary of a CIF on ``grid``.

    ``per_draw`` keeps the full ``(draws, grid)`` matrix the summary came from.
    """

    grid: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    per_draw: np.ndarray
    label: str = ""
    level: float = 0.95


@dataclass(frozen=True)
class _DrawArrays:
    beta_x: np.ndarray  # (draws, p_x)
    sigma: np.ndarray  # (draws,)
    beta_w: np.ndarray  # (draws, p_w)


def _arrays(draws) -> _DrawArrays:
    """Accept a ``PosteriorDraws`` or a mapping with ``beta_x``, ``sigma``, ``beta_w``."""
    if isinstance(draws, dict):
        bx = np.atleast_2d(np.asarray(draws["beta_x"], dtype=float))
        sg = np.atleast_1d(np.asarray(draws["sigma"], dtype=float))
        bw = np.atleast_2d(np.asarray(draws.get("beta_w", np.zeros((bx.shape[0], 1))), dtype=float))
    else:
        bx, sg, bw = draws.beta_x, draws.sigma, draws.beta_w
    if not (bx.shape[0] == sg.shape[0] == bw.shape[0]):
        raise InvalidParameterError("draw arrays disagree in length")
    if np.any(sg <= 0):
        raise InvalidParameterError("sigma draws must be positive")
    return _DrawArrays(bx, sg, bw)


def _family(draws, family) -> AftFamily:
    if family is None:
        family = getattr(draws, "family", None)
    if family is None:
        raise InvalidParameterError("family required")
    return AftFamily.parse(family)


def default_grid(dataset: Dataset, n_points: int = 200, upper_quantile: float = 0.99) -> np.ndarray:
    """``n_points`` equally spaced times from 0 to a high quantile of finite visits."""
    finite = np.array([v for rec in dataset for v in rec.visits if np.isfinite(v)])
    top = float(np.quantile(finite, upper_quantile)) if finite.size else 1.0
    return np.linspace(0.0, top if top > 0 else 1.0, n_points)


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidParameterError("grid must be a non-empty vector")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise InvalidParameterError("grid must be non-negative and ascending")
    return grid


def _linear(z: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # column-by-column so a row's value never depends on how many rows there are
    out = z[:, 0] * beta[0]
    for k in range(1, beta.shape[0]):
        out = out + z[:, k] * beta[k]
    return out


def _row_cdf(kind: str, grid, beta_x, sigma, z) -> np.ndarray:
    """``F_x(grid)`` for one draw and covariate rows ``z`` -> ``(rows, grid)``."""
    mu = _linear(z, beta_x)
    with np.errstate(divide="ignore"):
        s = (np.log(grid)[None, :] - mu[:, None]) / sigma
    return np.exp(resid_logcdf(kind, s))


def _average(rows_values: np.ndarray) -> np.ndarray:
    """Column means, accumulated sequentially so every column is summed the same way.

    Columns whose entries are all equal return that entry unchanged.
    """
    first = rows_values[0]
    if rows_values.shape[0] == 1:
        return first.copy()
    out = np.cumsum(rows_values, axis=0)[-1] / rows_values.shape[0]
    same = np.all(rows_values == first, axis=0)
    out[same] = first[same]
    return out


def _assert_monotone(per_draw: np.ndarray, what: str):
    if np.any(np.diff(per_draw, axis=1) < 0):
        raise AssertionError(f"{what} curve decreases in t for some draw")


def _summarize(grid, per_draw, kind, level, label="") -> CifCurve:
    _assert_monotone(per_draw, kind)
    lo, hi = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    q = np.quantile(per_draw, [0.5, lo, hi], axis=0)
    return CifCurve(grid, q[0], q[1], q[2], kind, per_draw, label, level)


def _design(z, width: int) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] == 0:
        raise InvalidParameterError("covariate matrix must be non-empty")
    if z.shape[1] != width:
        raise InvalidParameterError(f"covariate rows have {z.shape[1]} columns, expected {width}")
    return z


def _curves(draws, family, zx, zw, grid, mixture: bool) -> tuple:
    """Per-draw averaged non-prevalent and (optionally) mixture CIFs."""
    arr = _arrays(draws)
    kind = _family(draws, family).residual
    grid = _check_grid(grid)
    zx = _design(zx, arr.beta_x.shape[1])
    if mixture:
        zw = _design(zw, arr.beta_w.shape[1])
        if zw.shape[0] != zx.shape[0]:
            raise InvalidParameterError("x and w covariate rows must be paired")
    n_draws = arr.sigma.shape[0]
    plain = np.empty((n_draws, grid.size))
    mixed = np.empty((n_draws, grid.size)) if mixture else None
    for d in range(n_draws):
        f = _row_cdf(kind, grid, arr.beta_x[d], arr.sigma[d], zx)
        plain[d] = _average(f)
        if mixture:
            phi = special.ndtr(_linear(zw, arr.beta_w[d]))[:, None]
            # the max keeps mixture >= plain under rounding without changing exact values
            mixed[d] = _average(np.maximum(phi + (1.0 - phi) * f, f))
    return grid, plain, mixed


def cif_conditional(draws, family, z_new, grid, level: float = 0.95) -> CifCurve:
    """Non-prevalent CIF at one covariate profile ``z_new`` (intercept included)."""
    z = np.asarray(z_new, dtype=float)
    if z.ndim != 1:
        raise InvalidParameterError("z_new must be a single covariate row")
    grid, plain, _ = _curves(draws, family, z[None, :], None, grid, mixture=False)
    return _summarize(grid, plain, CONDITIONAL, level)


def apply_fixed_subset(z, fixed_subset) -> np.ndarray:
    """Copy of ``z`` with the columns ``fixed_subset[0]`` set to ``fixed_subset[1]``."""
    z = np.array(z, dtype=float, copy=True)
    if fixed_subset is not None:
        idx, values = fixed_subset
        z[:, list(idx)] = np.asarray(values, dtype=float)
    return z


def cif_marginal(draws, family, dataset_covariates, grid, fixed_subset: Optional[tuple] = None,
                 level: float = 0.95) -> CifCurve:
    """Non-prevalent CIF averaged over covariate rows.

    ``fixed_subset = (indices, values)`` holds some columns at given values while
    the rest keep their empirical joint distribution.
    """
    z = apply_fixed_subset(_design(dataset_covariates, np.asarray(dataset_covariates).shape[-1]), fixed_subset)
    grid, plain, _ = _curves(draws, family, z, None, grid, mixture=False)
    return _summarize(grid, plain, MARGINAL, level)


def cif_mixture_conditional(draws, family, z_new, grid, w_new=None, level: float = 0.95) -> CifCurve:
    """Mixture CIF ``Phi(z'beta_w) + (1 - Phi) F_x`` at one profile.

    ``w_new`` is the prevalence covariate row; it defaults to ``z_new``.
    """
    zx = np.asarray(z_new, dtype=float)
    zw = zx if w_new is None else np.asarray(w_new, dtype=float)
    if zx.ndim != 1 or zw.ndim != 1:
        raise InvalidParameterError("profiles must be single covariate rows")
    grid, _, mixed = _curves(draws, family, zx[None, :], zw[None, :], grid, mixture=True)
    return _summarize(grid, mixed, MIXTURE_CONDITIONAL, level)


def cif_mixture_marginal(draws, family, dataset_covariates, grid, w_covariates=None,
                         fixed_subset: Optional[tuple] = None, level: float = 0.95) -> CifCurve:
    """Mixture CIF averaged over covariate rows (``w_covariates`` defaults to the same rows)."""
    zx = apply_fixed_subset(np.atleast_2d(np.asarray(dataset_covariates, dtype=float)), fixed_subset)
    zw = zx if w_covariates is None else np.atleast_2d(np.asarray(w_covariates, dtype=float))
    grid, _, mixed = _curves(draws, family, zx, zw, grid, mixture=True)
    return _summarize(grid, mixed, MIXTURE_MARGINAL, level)


def prevalence_per_draw(draws, dataset_covariates) -> np.ndarray:
    """Mean over rows of ``Phi(z'beta_w)`` for every draw."""
    arr = _arrays(draws)
    zw = _design(dataset_covariates, arr.beta_w.shape[1])
    out = np.empty(arr.sigma.shape[0])
    for d in range(out.size):
        out[d] = _average(special.ndtr(_linear(zw, arr.beta_w[d]))[:, None])[0]
    return out


def marginal_prevalence(draws, dataset_covariates, level: float = 0.95) -> tuple:
    """Posterior median and equal-tailed band of the covariate-averaged prevalence."""
    per = prevalence_per_draw(draws, dataset_covariates)
    lo, hi = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    q = np.quantile(per, [0.5, lo, hi])
    return float(q[0]), (float(q[1]), float(q[2]))


def mixture_at_zero_matches(draws, family, zx, zw=None) -> bool:
    """True when the marginal mixture CIF at 0 equals the prevalence per draw."""
    zw = zx if zw is None else zw
    curve = cif_mixture_marginal(draws, family, zx, np.array([0.0]), w_covariates=zw)
    return bool(np.array_equal(curve.per_draw[:, 0], prevalence_per_draw(draws, zw)))


def sample_transition_times(draws, family, z_new, n_samples: int, rng) -> np.ndarray:
    """Draws of ``x`` from the posterior predictive at ``z_new`` by direct simulation.

    Each sample picks a posterior draw at random and then an AFT residual; the
    empirical CDF of the result estimates the posterior-mean conditional CIF.
    """
    from .simgen import draw_residuals

    arr = _arrays(draws)
    fam = _family(draws, family)
    z = np.asarray(z_new, dtype=float)
    pick = rng.integers(0, arr.sigma.shape[0], n_samples)
    eps = draw_residuals(fam, n_samples, rng)
    return np.exp(arr.beta_x[pick] @ z + arr.sigma[pick] * eps)


def covariate_profile(names, values: dict) -> np.ndarray:
    """Design row with an intercept and named covariate values (others 0)."""
    row = np.zeros(len(names))
    for k, name in enumerate(names):
        if name == "intercept":
            row[k] = 1.0
        elif name in values:
            row[k] = float(values[name])
    unknown = set(values) - set(names)
    if unknown:
        raise InvalidParameterError(f"unknown covariates: {sorted(unknown)}")
    return row
