"""Command-line interface: ``bayespim <subcommand>``.

Exit codes: 0 success (for ``fit``: converged), 2 fit finished without
convergence (artifacts are still written), 1 usage, configuration or data error.
Outputs go to ``--out`` or, failing that, ``$BAYESPIM_OUTPUT_DIR`` or
``./bayespim_output``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__, diagnostics, gibbs, io, nonparametric, posterior_predictive, simgen
from .core_model import AftFamily, KappaPrior, ModelSpec, PriorConfig
from .errors import BayesPimError

log = logging.getLogger("bayespim")

OUTPUT_ENV = "BAYESPIM_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


# ---------------------------------------------------------------------------
# run configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Strict):
    family: Literal["weibull", "exponential", "loglogistic", "lognormal"] = "weibull"
    x_covariates: Optional[List[str]] = None
    w_covariates: Optional[List[str]] = None


class KappaPriorBlock(_Strict):
    type: Literal["uniform", "beta", "point"] = "uniform"
    alpha1: float = Field(1.0, gt=0)
    alpha2: float = Field(1.0, gt=0)
    kappa0: float = Field(1.0, gt=0, le=1)


class PriorBlock(_Strict):
    tau_x: float = Field(1.0, gt=0)
    tau_w: float = Field(1.0, gt=0)
    lam: float = Field(1.0, gt=0)
    kappa: KappaPriorBlock = KappaPriorBlock()


class SamplerBlock(_Strict):
    chains: int = Field(4, ge=1)
    check_every: int = Field(20_000, ge=4)
    max_iters: int = Field(500_000, ge=4)
    thin: int = Field(1, ge=1)
    seed: int = 0
    n_jobs: int = Field(1, ge=1)
    burn_in_fraction: float = Field(0.5, gt=0, lt=1)
    adapt_proposal: bool = True
    proposal_scale: Optional[float] = Field(None, gt=0)
    rhat_threshold: float = Field(1.1, gt=1)
    ess_threshold: float = Field(40.0, gt=0)
    init: Literal["data", "prior"] = "data"
    max_loglik_draws: int = Field(2000, ge=2)


class OutputBlock(_Strict):
    directory: Optional[str] = None
    draws: str = "draws.csv"
    report: str = "report.json"
    summary: str = "summary.txt"


class RunConfig(_Strict):
    """On-disk fit configuration (YAML or JSON); unknown keys are rejected."""

    model: ModelBlock = ModelBlock()
    prior: PriorBlock = PriorBlock()
    sampler: SamplerBlock = SamplerBlock()
    output: OutputBlock = OutputBlock()

    def model_spec(self) -> ModelSpec:
        k = self.prior.kappa
        kappa = KappaPrior(k.type, a=k.alpha1, b=k.alpha2, value=k.kappa0)
        prior = PriorConfig(self.prior.tau_x, self.prior.tau_w, self.prior.lam, kappa)
        return ModelSpec(AftFamily.parse(self.model.family), prior)

    def sampler_config(self, p_x: int) -> gibbs.SamplerConfig:
        s = self.sampler
        cov = None
        if s.proposal_scale is not None:
            dim = p_x + (0 if AftFamily.parse(self.model.family).fixes_sigma else 1)
            cov = s.proposal_scale**2 * np.eye(dim)
        return gibbs.SamplerConfig(
            n_chains=s.chains,
            check_every=s.check_every,
            max_iters=s.max_iters,
            burn_in_fraction=s.burn_in_fraction,
            thin=s.thin,
            proposal_cov=cov,
            adapt_proposal=s.adapt_proposal,
            rhat_threshold=s.rhat_threshold,
            ess_threshold=s.ess_threshold,
            n_jobs=s.n_jobs,
            max_loglik_draws=s.max_loglik_draws,
            init=s.init,
        )


class UsageError(Exception):
    """Bad command-line input (exit code 1)."""


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return RunConfig.model_validate(raw or {})


def _output_dir(arg: Optional[str], config_dir: Optional[str] = None) -> Path:
    out = Path(arg or config_dir or os.environ.get(OUTPUT_ENV) or "bayespim_output")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def format_summary(draws, level: float = 0.95) -> str:
    """Posterior median and credible interval per parameter, two decimals."""
    rows = draws.summary(level)
    width = max(len(n) for n in rows)
    lines = [f"{'parameter':<{width}}  median [{int(level * 100)}% CrI]"]
    for name, (med, lo, hi) in rows.items():
        lines.append(f"{name:<{width}}  {med:.2f} [{lo:.2f}, {hi:.2f}]")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    dataset, report = io.read_dataset(args.data, args.x_cols, args.w_cols, skip_invalid=True)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2))
    if report.invalid and not args.skip_invalid:
        return EXIT_ERROR
    return EXIT_OK


def run_fit(config: RunConfig, data_path, out: Path) -> tuple:
    """Fit and write draws, report, WAIC and summary; returns ``(result, paths)``."""
    dataset, _ = io.read_dataset(data_path, config.model.x_covariates, config.model.w_covariates)
    spec = config.model_spec()
    sampler = config.sampler_config(dataset.p_x)
    result = gibbs.run_sampler(dataset, spec, sampler, seed=config.sampler.seed)
    draws = result.draws
    draws_path = out / config.output.draws
    io.write_draws(
        draws,
        draws_path,
        {"seed": config.sampler.seed, "version": __version__, "config": config.model_dump(), "status": result.status},
    )
    ll = draws.loglik_matrix(dataset, sampler.max_loglik_draws)
    w = diagnostics.waic(ll)
    report = {
        "status": result.status,
        "convergence": result.report.to_dict(),
        "waic": {"waic": w.waic, "lppd": w.lppd, "penalty": w.penalty, "waic_variance": w.waic_variance,
                 "waic_total": w.waic_total, "excluded_units": list(w.excluded_units),
                 "dropped_draws": w.dropped_draws},
        "acceptance": draws.acceptance.tolist(),
    }
    _write_json(out / config.output.report, report)
    (out / config.output.summary).write_text(format_summary(draws))
    return result, {"draws": draws_path, "report": out / config.output.report, "summary": out / config.output.summary}


def cmd_fit(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.sampler.seed = args.seed
    if args.max_iters is not None:
        config.sampler.max_iters = args.max_iters
    if args.check_every is not None:
        config.sampler.check_every = args.check_every
    out = _output_dir(args.out, config.output.directory)
    result, paths = run_fit(config, args.data, out)
    sys.stdout.write(paths["summary"].read_text())
    print(f"status: {result.status}; artifacts in {out}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args) -> int:
    out = _output_dir(args.out)
    if args.design == "sim1":
        cfg = simgen.Sim1Config(
            n=args.n, theta=args.theta, kappa=args.kappa, p_baseline_test=args.p_baseline,
            family=args.family, covariate_law=args.covariates,
            sigma=1.0 if AftFamily.parse(args.family).fixes_sigma else 0.2,
        )
        dataset, truth = simgen.gen_sim1(cfg, args.seed)
    else:
        reference = simgen.reference_dataset() if args.reference is None else io.read_dataset(args.reference)[0]
        pool = simgen.build_donor_pool(reference, n_boot=args.n_boot, seed=args.seed,
                                       censoring_source=args.censoring_source)
        params = simgen.crc_like_config().params
        dataset, truth = simgen.gen_sim2(pool, params, args.kappa, args.n, extended=args.extended,
                                         omega=args.omega, seed=args.seed, family=args.family)
    io.write_dataset(dataset, out / "data.csv")
    io.write_truth(truth, out / "truth.csv")
    meta = {k: v for k, v in truth.metadata.items() if k not in ("donor", "censoring_time")}
    _write_json(out / "simulation.json", {"args": vars(args) | {"func": None}, "metadata": meta,
                                          "type_counts": dataset.type_counts})
    print(json.dumps({"n": len(dataset), "type_counts": dataset.type_counts,
                      "prevalence": truth.prevalence}, default=_jsonable))
    return EXIT_OK


def cmd_npfit(args) -> int:
    dataset, _ = io.read_dataset(args.data)
    recoded = nonparametric.recode_baseline(dataset)
    est = nonparametric.em_misclassified(dataset, args.kappa, tol=args.tol, recoded=recoded)
    out = _output_dir(args.out)
    path = out / "nonparametric.csv"
    cum = np.concatenate([[0.0], np.cumsum(est.masses)])
    times = np.concatenate([[0.0], est.upper])
    curve = posterior_predictive.CifCurve(times, cum, cum, cum, "nonparametric", cum[None, :])
    io.write_curves([curve], path)
    print(json.dumps({"support": len(est.masses), "converged": est.converged, "loglik": est.loglik,
                      "prevalence_atom": float(est.cdf(recoded.baseline_time)), "output": str(path)}))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    draws, meta = io.read_draws(args.draws)
    thresholds = diagnostics.PolicyThresholds(args.rhat_threshold, args.ess_threshold)
    report = diagnostics.assess(draws.samples, draws.names, draws.iterations, 1, thresholds, draws.fixed)
    payload = report.to_dict()
    print(json.dumps(payload, indent=2, default=_jsonable))
    if args.out:
        _write_json(_output_dir(args.out) / "diagnostics.json", payload)
    return EXIT_OK


def _parse_assignments(text: str) -> dict:
    values = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise UsageError(f"expected name=value, got {part!r}")
        name, val = part.split("=", 1)
        values[name.strip()] = float(val)
    return values


def cmd_predict(args) -> int:
    draws, meta = io.read_draws(args.draws)
    names_x = [n[len("beta_x[") : -1] for n in draws.names[: draws.p_x]]
    names_w = [n[len("beta_w[") : -1] for n in draws.names[draws.p_x + 1 : draws.p_x + 1 + draws.p_w]]
    if args.grid_points < 1:
        raise UsageError("the grid needs at least one point")
    dataset = None
    if args.data:
        x_cols = [n for n in names_x if n != io.INTERCEPT]
        w_cols = [n for n in names_w if n != io.INTERCEPT]
        dataset, _ = io.read_dataset(args.data, x_cols, w_cols)
    if args.grid_max is not None:
        grid = np.linspace(0.0, args.grid_max, args.grid_points)
    elif dataset is not None:
        grid = posterior_predictive.default_grid(dataset, args.grid_points)
    else:
        raise UsageError("give --grid-max or --data to define the grid")
    curves = []
    if args.kind in (posterior_predictive.CONDITIONAL, posterior_predictive.MIXTURE_CONDITIONAL):
        if not args.profile:
            raise UsageError(f"kind {args.kind} needs at least one --profile")
        for text in args.profile:
            values = _parse_assignments(text)
            zx = posterior_predictive.covariate_profile(names_x, values)
            zw = posterior_predictive.covariate_profile(names_w, {k: v for k, v in values.items() if k in names_w})
            if args.kind == posterior_predictive.CONDITIONAL:
                c = posterior_predictive.cif_conditional(draws, None, zx, grid)
            else:
                c = posterior_predictive.cif_mixture_conditional(draws, None, zx, grid, w_new=zw)
            curves.append(_labelled(c, text))
    else:
        if dataset is None:
            raise UsageError(f"kind {args.kind} needs --data for the covariate rows")
        if args.profile:
            raise UsageError(f"kind {args.kind} averages over the data; use --fix instead of --profile")
        pk = dataset.packed
        fixed_x = fixed_w = None
        if args.fix:
            values = _parse_assignments(args.fix)
            unknown = set(values) - set(names_x) - set(names_w)
            if unknown:
                raise UsageError(f"unknown covariates: {sorted(unknown)}")
            fixed_x = _fixed(names_x, values)
            fixed_w = _fixed(names_w, values)
        if args.kind == posterior_predictive.MARGINAL:
            c = posterior_predictive.cif_marginal(draws, None, pk.zx, grid, fixed_subset=fixed_x)
        else:
            zw = posterior_predictive.apply_fixed_subset(pk.zw, fixed_w)
            c = posterior_predictive.cif_mixture_marginal(draws, None, pk.zx, grid, w_covariates=zw,
                                                          fixed_subset=fixed_x)
        curves.append(_labelled(c, args.fix or ""))
    out = _output_dir(args.out)
    path = out / f"cif_{args.kind}.csv"
    io.write_curves(curves, path)
    if args.svg:
        render_svg(curves, out / f"cif_{args.kind}.svg")
    print(f"wrote {path}")
    return EXIT_OK


def _fixed(names, values):
    idx = [k for k, n in enumerate(names) if n in values]
    return (idx, [values[names[k]] for k in idx]) if idx else None


def _labelled(curve, label):
    return posterior_predictive.CifCurve(curve.grid, curve.median, curve.lower, curve.upper, curve.kind,
                                         curve.per_draw, label, curve.level)


def render_svg(curves, path) -> None:
    """Static line chart of curve medians with shaded bands."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        line = ax.plot(c.grid, c.median, label=c.label or c.kind)[0]
        ax.fill_between(c.grid, c.lower, c.upper, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("time")
    ax.set_ylabel("cumulative incidence")
    ax.set_ylim(0, 1)
    if any(c.label for c in curves):
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayespim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a dataset file and report screening types")
    p.add_argument("data")
    p.add_argument("--x-cols", nargs="*", default=None)
    p.add_argument("--w-cols", nargs="*", default=None)
    p.add_argument("--skip-invalid", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="run the sampler")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--check-every", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a synthetic cohort with ground truth")
    p.add_argument("--design", choices=("sim1", "sim2"), default="sim1")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--kappa", type=float, default=0.8)
    p.add_argument("--p-baseline", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.11)
    p.add_argument("--family", default="weibull")
    p.add_argument("--covariates", choices=simgen.COVARIATE_LAWS, default="normal")
    p.add_argument("--reference")
    p.add_argument("--extended", action="store_true")
    p.add_argument("--omega", type=float, default=10.0)
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--censoring-source", choices=("all", "censored"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("npfit", help="nonparametric mixture CIF under a known sensitivity")
    p.add_argument("--data", required=True)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_npfit)

    p = sub.add_parser("diagnose", help="R-hat and ESS of a draws file")
    p.add_argument("--draws", required=True)
    p.add_argument("--rhat-threshold", type=float, default=1.1)
    p.add_argument("--ess-threshold", type=float, default=40.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("predict", help="posterior CIF curves as CSV (and SVG)")
    p.add_argument("--draws", required=True)
    p.add_argument("--data")
    p.add_argument("--kind", choices=posterior_predictive.KINDS, default=posterior_predictive.MIXTURE_MARGINAL)
    p.add_argument("--profile", action="append", help="name=value[,name=value] covariate profile")
    p.add_argument("--fix", help="name=value[,...] covariates held fixed in marginal curves")
    p.add_argument("--grid-max", type=float)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
    except (UsageError, BayesPimError, FileNotFoundError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
