"""Command-line front end: describe, fit, cea, compare, simulate.

A run is configured by an optional JSON config file plus flags; flags win.
The resolved configuration is written next to the outputs so every run is
reproducible from its artifacts. All file writes are atomic (temp + rename)
and no command ever modifies its input file.

Exit codes: 0 success, 2 input error, 3 convergence failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .cea import bootstrap_cea, default_threshold_grid, render_plots, summarize
from .comparators import compare_methods
from .contrasts import cea_report, qaly_weights
from .dataset import (
    ColumnMap,
    descriptives,
    load_long,
    mean_impute_covariates,
    pattern_table,
    save_long,
)
from .errors import ConvergenceError, DataError, TrialCeaError
from .mmrm import STRUCTURES, MmrmSpec, fit, wald_ci
from .simulate import SimConfig, apply_mechanism, bias_study, gen_trial

DEFAULTS = {
    "visits": [0.0, 0.25, 0.75],
    "bootstrap": 10_000,
    "seed": 0,
    "k": 25_000.0,
    "k_grid": [0.0, 50_000.0, 500.0],
    "mi": 50,
    "covariates": [],
    "structure": "unstructured",
    "out": "trialcea-out",
    "columns": {},
}


@dataclass
class RunConfig:
    input: str | None = None
    visits: list[float] = field(default_factory=lambda: list(DEFAULTS["visits"]))
    bootstrap: int = DEFAULTS["bootstrap"]
    seed: int = DEFAULTS["seed"]
    k: float = DEFAULTS["k"]
    k_grid: list[float] = field(default_factory=lambda: list(DEFAULTS["k_grid"]))
    mi: int = DEFAULTS["mi"]
    covariates: list[str] = field(default_factory=list)
    structure: str = DEFAULTS["structure"]
    out: str = DEFAULTS["out"]
    columns: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "input": self.input,
            "visits": self.visits,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "k": self.k,
            "k_grid": self.k_grid,
            "mi": self.mi,
            "covariates": self.covariates,
            "structure": self.structure,
            "out": self.out,
            "columns": self.columns,
        }


def _parse_visits(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise DataError(f"cannot parse visit times {text!r}") from None


def _parse_k_grid(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise DataError(f"--k-grid expects lo:hi:step, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise DataError(f"cannot parse --k-grid {text!r}") from None


def _parse_columns(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise DataError(f"--columns expects role=name pairs, got {item!r}")
        role, name = item.split("=", 1)
        out[role.strip()] = name.strip()
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from None
        for key, value in raw.items():
            if not hasattr(cfg, key):
                raise DataError(f"unknown config key {key!r}")
            setattr(cfg, key, value)
    # Flags override the file.
    if getattr(args, "input", None) is not None:
        cfg.input = args.input
    if getattr(args, "visits", None) is not None:
        cfg.visits = _parse_visits(args.visits)
    if getattr(args, "bootstrap", None) is not None:
        cfg.bootstrap = args.bootstrap
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "k", None) is not None:
        cfg.k = args.k
    if getattr(args, "k_grid", None) is not None:
        cfg.k_grid = _parse_k_grid(args.k_grid)
    if getattr(args, "mi", None) is not None:
        cfg.mi = args.mi
    if getattr(args, "covariates", None) is not None:
        cfg.covariates = [c for c in args.covariates.split(",") if c.strip()]
    if getattr(args, "structure", None) is not None:
        cfg.structure = args.structure
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "columns", None) is not None:
        cfg.columns = _parse_columns(args.columns)
    if cfg.structure not in STRUCTURES:
        raise DataError(
            f"unknown covariance structure {cfg.structure!r}; "
            f"expected one of {sorted(STRUCTURES)}"
        )
    return cfg


def _column_map(cfg: RunConfig) -> ColumnMap:
    known = {"id", "arm", "time", "utility", "cost"}
    aliases = {"u": "utility", "c": "cost"}
    kwargs = {}
    for role, name in cfg.columns.items():
        role = aliases.get(role, role)
        if role not in known:
            raise DataError(f"unknown column role {role!r}")
        kwargs[role] = name
    return ColumnMap(covariates=tuple(cfg.covariates), **kwargs)


def _load(cfg: RunConfig):
    if not cfg.input:
        raise DataError("no input file given (use --input or the config file)")
    if not Path(cfg.input).exists():
        raise DataError(f"input file {cfg.input} does not exist")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        data = load_long(cfg.input, visit_times=cfg.visits, columns=_column_map(cfg))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return data


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, payload: dict) -> None:
    _write_text(path, json.dumps(payload, indent=2) + "\n")


def _emit_resolved(cfg: RunConfig, outdir: Path) -> None:
    _write_json(outdir / "resolved_config.json", cfg.to_json_dict())


def _specs(cfg: RunConfig) -> tuple[MmrmSpec, MmrmSpec]:
    structure = STRUCTURES[cfg.structure]()
    covs = tuple(cfg.covariates)
    return (
        MmrmSpec(outcome="utility", covariance=structure, extra_covariates=covs),
        MmrmSpec(outcome="cost", covariance=structure, extra_covariates=covs),
    )


def _prepare_analysis_data(cfg: RunConfig):
    data = _load(cfg)
    if cfg.covariates:
        data = mean_impute_covariates(data, cfg.covariates)
    return data


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_describe(cfg: RunConfig) -> int:
    data = _load(cfg)
    outdir = Path(cfg.out)
    patterns = pattern_table(data)
    desc = descriptives(data)
    _write_text(outdir / "missingness_patterns.csv", patterns.to_delimited())
    _write_json(outdir / "missingness_patterns.json", patterns.to_json_dict())
    _write_text(outdir / "descriptives.csv", desc.to_delimited())
    _write_json(outdir / "descriptives.json", desc.to_json_dict())
    _emit_resolved(cfg, outdir)
    if data.n_subjects == 0:
        print("warning: dataset has no subjects; reports are empty", file=sys.stderr)
    print(f"describe: {data.n_subjects} subjects, reports in {outdir}")
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    data = _prepare_analysis_data(cfg)
    spec_u, spec_c = _specs(cfg)
    outdir = Path(cfg.out)
    lines = ["outcome,coefficient,estimate,se,lower,upper"]
    for spec, name in ((spec_u, "utility"), (spec_c, "cost")):
        fitted = fit(data, spec)
        _write_json(outdir / f"fit_{name}.json", fitted.to_json_dict())
        for row in wald_ci(fitted, 0.95):
            lines.append(
                f"{name},{row.label},{row.estimate!r},{row.se!r},"
                f"{row.lower!r},{row.upper!r}"
            )
    _write_text(outdir / "coefficients.csv", "\n".join(lines) + "\n")
    _emit_resolved(cfg, outdir)
    print(f"fit: coefficient report in {outdir}")
    return 0


def cmd_cea(cfg: RunConfig) -> int:
    data = _prepare_analysis_data(cfg)
    spec_u, spec_c = _specs(cfg)
    w = qaly_weights(cfg.visits)
    outdir = Path(cfg.out)

    fit_u = fit(data, spec_u)
    fit_c = fit(data, spec_c)
    report = cea_report(fit_u, fit_c, w)
    _write_text(outdir / "cea_report.csv", report.to_delimited())
    _write_json(outdir / "cea_report.json", report.to_json_dict())

    draws = bootstrap_cea(
        data, spec_u, spec_c, w, n_boot=cfg.bootstrap, seed=cfg.seed
    )
    if len(cfg.k_grid) != 3:
        raise DataError(f"k_grid must be [lo, hi, step], got {cfg.k_grid}")
    lo, hi, step = cfg.k_grid
    grid = default_threshold_grid(lo, hi, step)
    summary = summarize(draws, thresholds=grid, k_highlight=cfg.k)
    _write_text(outdir / "draws.csv", draws.to_delimited())
    _write_json(outdir / "summary.json", summary.to_json_dict())
    cep_svg, ceac_svg = render_plots(draws, summary, cfg.k)
    _write_text(outdir / "cep.svg", cep_svg)
    _write_text(outdir / "ceac.svg", ceac_svg)
    _emit_resolved(cfg, outdir)
    print(
        f"cea: {draws.n_draws} converged replicates ({draws.n_failed} failed), "
        f"outputs in {outdir}"
    )
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    data = _prepare_analysis_data(cfg)
    w = qaly_weights(cfg.visits)
    comparison = compare_methods(
        data, w, m_imputations=cfg.mi, seed=cfg.seed,
        structure=STRUCTURES[cfg.structure](),
    )
    outdir = Path(cfg.out)
    _write_text(outdir / "method_comparison.csv", comparison.to_delimited())
    _write_json(outdir / "method_comparison.json", comparison.to_json_dict())
    _emit_resolved(cfg, outdir)
    print(f"compare: method comparison in {outdir}")
    return 0


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    path = Path(args.sim_config)
    if not path.exists():
        raise DataError(f"simulation config {path} does not exist")
    try:
        sim = SimConfig.from_json_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad simulation config {path}: {exc}") from None
    outdir = Path(cfg.out)
    did_something = False

    if args.gen_out:
        complete, truth = gen_trial(sim)
        observed = apply_mechanism(complete, sim.mechanism, seed=sim.seed)
        dest = outdir / args.gen_out
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_long(observed, dest)
        _write_json(outdir / "truth.json", truth.to_json_dict())
        print(f"simulate: dataset written to {dest}")
        did_something = True

    if args.bias_sims:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        study = bias_study(
            sim, n_sims=args.bias_sims, methods=methods, mi_m=cfg.mi,
            structure=STRUCTURES[cfg.structure](),
        )
        _write_text(outdir / "bias_study.csv", study.to_delimited())
        print(f"simulate: bias study ({args.bias_sims} sims) in {outdir}")
        did_something = True

    if not did_something:
        raise DataError("simulate: nothing to do (use --gen-out and/or --bias-sims)")
    _emit_resolved(cfg, outdir)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--input", help="long-format delimited input file")
    parser.add_argument("--visits", help="visit times in years, e.g. 0,0.25,0.75")
    parser.add_argument("--bootstrap", type=int, help="bootstrap replicates")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--k", type=float, help="highlighted threshold")
    parser.add_argument("--k-grid", dest="k_grid", help="threshold grid lo:hi:step")
    parser.add_argument("--mi", type=int, help="number of imputations")
    parser.add_argument("--covariates", help="comma-separated covariate columns")
    parser.add_argument(
        "--structure", choices=sorted(STRUCTURES), help="covariance structure"
    )
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--columns", help="column mapping, e.g. id=pid,arm=trt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trialcea",
        description="Trial-based cost-effectiveness analysis under MAR",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("describe", "missingness patterns and observed descriptives"),
        ("fit", "fit both outcome models and report coefficients"),
        ("cea", "bootstrap cost-effectiveness analysis with plots"),
        ("compare", "complete-case vs multiple-imputation vs mixed model"),
        ("simulate", "generate synthetic trials / run a bias study"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_shared(p)
        if name == "simulate":
            p.add_argument("--sim-config", required=True,
                           help="JSON file with the generative model")
            p.add_argument("--gen-out", help="file name for a generated dataset")
            p.add_argument("--bias-sims", type=int,
                           help="number of simulations for a bias study")
            p.add_argument("--methods", default="CCA,LMM,MI",
                           help="methods for the bias study")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "describe":
            return cmd_describe(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "cea":
            return cmd_cea(cfg)
        if args.command == "compare":
            return cmd_compare(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        raise DataError(f"unknown command {args.command!r}")
    except DataError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"error[convergence]: {exc}", file=sys.stderr)
        return 3
    except TrialCeaError as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 4


def console_main() -> None:
    sys.exit(main())
