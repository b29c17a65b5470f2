"""CSV persistence for datasets, ground truth, posterior draws and curves.

Datasets hold one subject per row.  ``visits`` is a semicolon-separated ascending
list that ends in ``inf`` for right-censored subjects; ``outcome`` is the result
of the last finite test and ``r`` flags a baseline test.  Remaining columns are
covariates; the design matrices get an explicit leading intercept.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core_model import AftFamily, Dataset, ScreeningRecord
from .errors import RecordValidationError

RESERVED = ("id", "visits", "outcome", "r")
INTERCEPT = "intercept"


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


@dataclass
class IngestReport:
    """Outcome of reading a dataset file."""

    n_rows: int = 0
    accepted: int = 0
    type_counts: dict = field(default_factory=dict)
    invalid: list = field(default_factory=list)  # (line number, reason)

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "accepted": self.accepted,
            "type_counts": {str(k): v for k, v in sorted(self.type_counts.items())},
            "invalid": [{"line": ln, "reason": why} for ln, why in self.invalid],
        }


def _covariate_columns(dataset: Dataset) -> list:
    cols = []
    for name in list(dataset.x_names) + list(dataset.w_names):
        if name != INTERCEPT and name not in cols:
            cols.append(name)
    return cols


def write_dataset(dataset: Dataset, path) -> None:
    """Write ``dataset`` so that :func:`read_dataset` restores it exactly."""
    cols = _covariate_columns(dataset)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(list(RESERVED) + cols)
        for i, rec in enumerate(dataset):
            values = {}
            for names, row in ((dataset.x_names, rec.covariates_x), (dataset.w_names, rec.covariates_w)):
                for name, val in zip(names, row):
                    if name != INTERCEPT:
                        values[name] = val
            rid = rec.id if rec.id is not None else str(i + 1)
            out.writerow(
                [rid, ";".join(_fmt(v) for v in rec.visits), int(rec.event), int(rec.baseline_tested)]
                + [_fmt(values[c]) for c in cols]
            )


def _parse_row(row: dict, x_cols, w_cols) -> ScreeningRecord:
    raw = (row.get("visits") or "").strip()
    if not raw:
        raise RecordValidationError("empty visit list")
    try:
        visits = tuple(float(tok) for tok in raw.split(";"))
        outcome = int(row["outcome"])
        r = int(row["r"])
        zx = (1.0,) + tuple(float(row[c]) for c in x_cols)
        zw = (1.0,) + tuple(float(row[c]) for c in w_cols)
    except (TypeError, ValueError, KeyError) as exc:
        raise RecordValidationError(f"unparseable field: {exc}") from None
    if outcome not in (0, 1) or r not in (0, 1):
        raise RecordValidationError("outcome and r must be 0 or 1")
    if outcome == 1 and visits[-1] == math.inf:
        raise RecordValidationError("positive outcome cannot follow an infinite visit")
    if outcome == 0 and visits[-1] != math.inf:
        raise RecordValidationError("a negative outcome needs a trailing inf (right censoring)")
    if outcome == 1:
        outcomes = (0,) * (len(visits) - 1) + (1,)
    else:
        outcomes = (0,) * len(visits)
    return ScreeningRecord(visits, outcomes, r, zx, zw, id=row.get("id") or None)


def read_dataset(path, x_columns: Optional[Sequence[str]] = None, w_columns: Optional[Sequence[str]] = None,
                 skip_invalid: bool = False) -> tuple:
    """Read a dataset file; returns ``(dataset, report)``.

    By default every non-reserved column enters both designs.  Invalid rows raise
    :class:`RecordValidationError` listing all problems unless ``skip_invalid``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in RESERVED[1:]):
            raise RecordValidationError(f"{path}: missing required columns {RESERVED[1:]}")
        extra = [c for c in reader.fieldnames if c not in RESERVED]
        x_cols = list(extra if x_columns is None else x_columns)
        w_cols = list(extra if w_columns is None else w_columns)
        unknown = [c for c in x_cols + w_cols if c not in reader.fieldnames]
        if unknown:
            raise RecordValidationError(f"unknown covariate columns: {unknown}")
        report = IngestReport()
        records = []
        for line, row in enumerate(reader, start=2):
            report.n_rows += 1
            try:
                rec = _parse_row(row, x_cols, w_cols)
            except RecordValidationError as exc:
                report.invalid.append((line, str(exc)))
                continue
            records.append(rec)
            report.type_counts[rec.screening_type] = report.type_counts.get(rec.screening_type, 0) + 1
    report.accepted = len(records)
    if report.invalid and not skip_invalid:
        detail = "; ".join(f"line {ln}: {why}" for ln, why in report.invalid[:20])
        raise RecordValidationError(f"{len(report.invalid)} invalid rows ({detail})")
    dataset = Dataset(tuple(records), (INTERCEPT,) + tuple(x_cols), (INTERCEPT,) + tuple(w_cols))
    return dataset, report


# ---------------------------------------------------------------------------
# ground truth


def write_truth(truth, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "w", "g", "r"])
        for x, w, g, r in zip(truth.x, truth.w, truth.g, truth.r):
            out.writerow([_fmt(x), _fmt(w), int(g), int(r)])


def read_truth(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "x": np.array([float(r["x"]) for r in rows]),
        "w": np.array([float(r["w"]) for r in rows]),
        "g": np.array([int(r["g"]) for r in rows]),
        "r": np.array([int(r["r"]) for r in rows]),
    }


# ---------------------------------------------------------------------------
# posterior draws


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_draws(draws, path, metadata: Optional[dict] = None) -> None:
    """Columnar draws CSV (chain, iteration, parameters) plus a JSON metadata file."""
    path = Path(path)
    n_chains, kept, _ = draws.samples.shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["chain", "draw"] + list(draws.names))
        for c in range(n_chains):
            for k in range(kept):
                out.writerow([c, k] + [repr(float(v)) for v in draws.samples[c, k]])
    meta = {
        "names": list(draws.names),
        "p_x": draws.p_x,
        "p_w": draws.p_w,
        "family": AftFamily.parse(draws.family).value,
        "burn_in": draws.burn_in,
        "iterations": draws.iterations,
        "thin": draws.thin,
        "fixed": list(draws.fixed),
        "acceptance": [float(a) for a in np.atleast_1d(draws.acceptance)],
    }
    meta.update(metadata or {})
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def read_draws(path):
    """Inverse of :func:`write_draws`."""
    from .gibbs import PosteriorDraws

    path = Path(path)
    meta = json.loads(meta_path(path).read_text())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    if header[2:] != meta["names"]:
        raise ValueError("draws file columns disagree with its metadata")
    arr = np.array(rows).reshape(-1, len(header)) if rows else np.zeros((0, len(header)))
    chains = arr[:, 0].astype(int)
    n_chains = int(chains.max()) + 1 if chains.size else 0
    samples = arr[:, 2:].reshape(n_chains, -1, len(meta["names"]))
    return PosteriorDraws(
        samples=samples,
        names=tuple(meta["names"]),
        p_x=int(meta["p_x"]),
        p_w=int(meta["p_w"]),
        family=AftFamily.parse(meta["family"]),
        burn_in=int(meta["burn_in"]),
        iterations=int(meta["iterations"]),
        thin=int(meta["thin"]),
        acceptance=np.array(meta.get("acceptance", [])),
        prevalence_counts=None,
        fixed=tuple(meta.get("fixed", ())),
    ), meta


# ---------------------------------------------------------------------------
# curves


def write_curves(curves, path) -> None:
    """Curves as rows of ``t, median, lower, upper, kind`` (one block per curve)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["t", "median", "lower", "upper", "kind", "label"])
        for curve in curves:
            for t, m, lo, hi in zip(curve.grid, curve.median, curve.lower, curve.upper):
                out.writerow([repr(float(t)), repr(float(m)), repr(float(lo)), repr(float(hi)), curve.kind,
                              getattr(curve, "label", "")])
