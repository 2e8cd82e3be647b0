"""Command-line interface for batch analyses.

Stages exchange files: datasets are CSV plus a JSON column-role schema,
fitted models are JSON, scores and weights are CSV. Exit codes: 0 success,
1 usage error, 2 data or specification error, 3 numerical failure. Errors are
reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from latentps import __version__
from latentps.balance import balance_table
from latentps.data import FLOAT_FORMAT, ModelSpec, default_model_spec, load_dataset, write_dataset
from latentps.dgp import ScenarioConfig, expand_grid, simulate, simulate_schema_dataset
from latentps.errors import DataError, NumericalError, SpecError
from latentps.experiments import reproduce_figure, write_csv
from latentps.propensity import ate_weights, att_weights, fit_glm_binary, propensity_scores, ps_design
from latentps.scores import ProxyScores, compute_proxy, ifs_eap, read_scores, scores_frame
from latentps.sem.fit import (
    FittedSEM,
    fit_joint,
    fit_linear_joint,
    fit_measurement_only,
    load_model,
    save_model,
)

log = logging.getLogger("latentps")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="base random seed")
    p.add_argument("--workers", type=int, default=1, help="processes for replicates and bootstrap")
    p.add_argument("--out", type=Path, default=None, help="output file or directory")
    p.add_argument("--config", type=Path, default=None, help="JSON configuration file")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="latentps", description="Propensity-score analysis with latent confounders.")
    parser.add_argument("--version", action="version", version=f"latentps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p, required=True):
        p.add_argument("--data", type=Path, required=required, help="dataset CSV")
        p.add_argument("--schema", type=Path, required=required, help="column-role JSON")

    p = sub.add_parser("simulate", parents=[common], help="simulate scenario datasets")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--schema-example", action="store_true",
                   help="write one synthetic dataset with two ordinal latent blocks and categorical covariates")
    p.add_argument("--n", type=int, default=None, help="sample size override")

    p = sub.add_parser("fit", parents=[common], help="fit a model and save it as JSON")
    data_args(p)
    p.add_argument("--spec", type=Path, default=None, help="model specification JSON")
    p.add_argument("--kind", choices=("joint", "measurement", "linear"), default="joint")
    p.add_argument("--link", choices=("logit", "probit"), default="logit")
    p.add_argument("--block", default=None, help="block to fit (measurement models)")

    p = sub.add_parser("scores", parents=[common], help="compute proxy scores")
    data_args(p)
    p.add_argument("--model", type=Path, default=None, help="fitted joint model JSON (for iFS)")
    p.add_argument("--strategies", default="iFS,summary", help="comma-separated strategies")
    p.add_argument("--spec", type=Path, default=None)

    p = sub.add_parser("ps", parents=[common], help="propensity scores and weights")
    data_args(p)
    p.add_argument("--scores", type=Path, required=True, help="scores CSV")
    p.add_argument("--strategy", default="iFS")
    p.add_argument("--link", choices=("logit", "probit"), default="logit")
    p.add_argument("--kind", choices=("ate", "att"), default="ate")
    p.add_argument("--truncate", type=float, default=None,
                   help="cap weights at this quantile of their distribution (off by default)")

    p = sub.add_parser("balance", parents=[common], help="covariate balance table")
    data_args(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--strategies", default="summary,iFS", help="strategies whose weights are compared")
    p.add_argument("--kind", choices=("ate", "att"), default="att")
    p.add_argument("--link", choices=("logit", "probit"), default="logit")
    p.add_argument("--pooled-sd", action="store_true", help="pooled SD in the SMD denominator")

    p = sub.add_parser("estimate", parents=[common], help="effect on the exposed with bootstrap CIs")
    data_args(p)
    p.add_argument("--outcome", required=True)
    p.add_argument("--spec", type=Path, default=None)
    p.add_argument("--B", type=int, default=500, help="bootstrap replicates (0 to skip)")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("reproduce", parents=[common], help="write the CSV series of a figure")
    p.add_argument("--figure", type=int, required=True, choices=(2, 3, 4, 5, 6))
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--m-reps", type=int, default=2000)

    p = sub.add_parser("validate", parents=[common], help="Monte Carlo theorem and corollary suites")
    p.add_argument("--reps", type=int, default=500)
    return parser


# Subcommands ------------------------------------------------------------------

def _out(args, default) -> Path:
    return args.out if args.out is not None else Path(default)


def _spec(path, data, link="logit") -> ModelSpec:
    if path is None:
        return default_model_spec(data, link)
    try:
        return ModelSpec.from_dict(json.loads(Path(path).read_text()))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc


def _scenarios(args) -> list:
    if args.config is None:
        return [ScenarioConfig()]
    try:
        doc = json.loads(args.config.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from exc
    try:
        return expand_grid(doc)
    except TypeError as exc:
        raise DataError(f"invalid config: {exc}") from exc


def _with_seed(cfg: ScenarioConfig, args) -> ScenarioConfig:
    from dataclasses import replace
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "n", None):
        changes["n"] = args.n
    return replace(cfg, **changes) if changes else cfg


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def cmd_simulate(args):
    outdir = _out(args, "simulated")
    outdir.mkdir(parents=True, exist_ok=True)
    if args.schema_example:
        frame, schema = simulate_schema_dataset(n=args.n or 417, seed=2024 if args.seed is None else args.seed)
        frame.to_csv(outdir / "schema_example.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        (outdir / "schema_example.json").write_text(json.dumps(schema, indent=2) + "\n")
        print(outdir / "schema_example.csv")
        return EXIT_OK
    for cfg in _scenarios(args):
        cfg = _with_seed(cfg, args)
        stem = _safe(cfg.scenario_id)
        (outdir / f"{stem}_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        for rep in range(args.reps):
            sim = simulate(cfg, rep)
            write_dataset(sim.data, outdir / f"{stem}_rep{rep}.csv", outdir / f"{stem}_schema.json")
            pd.DataFrame({"id": sim.data.unit_id, "x": sim.x}).to_csv(
                outdir / f"{stem}_rep{rep}_latent.csv", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    print(outdir)
    return EXIT_OK


def cmd_fit(args):
    data = load_dataset(args.data, args.schema)
    spec = _spec(args.spec, data, args.link)
    if args.kind == "joint":
        model = fit_joint(data, spec)
    elif args.kind == "linear":
        model = fit_linear_joint(data, spec)
    else:
        b = data.block_names.index(args.block) if args.block else 0
        block = spec.latent_blocks[b]
        model = fit_measurement_only(data.w_blocks[b], block)
    out = _out(args, "model.json")
    save_model(model, out)
    print(out)
    return EXIT_OK


def cmd_scores(args):
    data = load_dataset(args.data, args.schema)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    spec = _spec(args.spec, data)
    scores = []
    for s in strategies:
        if s == "iFS":
            if args.model is None:
                raise DataError("iFS scores need --model (a fitted joint model)")
            model = load_model(args.model)
            if not isinstance(model, FittedSEM):
                raise DataError("--model must be a joint model")
            scores.append(ifs_eap(model, data))
        else:
            scores.append(compute_proxy(s, data, spec)[0])
    out = _out(args, "scores.csv")
    write_csv(scores_frame(scores, data.unit_id), out)
    print(out)
    return EXIT_OK


def _proxy(path, strategy) -> ProxyScores:
    table = read_scores(path)
    if strategy not in table:
        raise DataError(f"scores file has no strategy {strategy!r}; found {sorted(table)}")
    return table[strategy]


def _weights(data, proxy, link, kind, truncate=None):
    design = ps_design(data.z, proxy.values)
    e = propensity_scores(fit_glm_binary(design, data.a, link), design, link)
    q = ate_weights(e, data.a) if kind == "ate" else att_weights(e, data.a)
    if truncate is not None:
        if not 0 < truncate <= 1:
            raise DataError("--truncate must lie in (0, 1]")
        q = np.minimum(q, np.quantile(q, truncate))
    return e, q


def cmd_ps(args):
    data = load_dataset(args.data, args.schema)
    proxy = _proxy(args.scores, args.strategy)
    if proxy.n != data.n:
        raise DataError("scores and data have different numbers of units")
    e, q = _weights(data, proxy, args.link, args.kind, args.truncate)
    out = _out(args, "weights.csv")
    write_csv(pd.DataFrame({"unit_id": data.unit_id, "strategy": args.strategy, "a": data.a, "ps": e,
                            "weight": q}), out)
    print(out)
    return EXIT_OK


def cmd_balance(args):
    data = load_dataset(args.data, args.schema)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    proxies = [_proxy(args.scores, s) for s in strategies]
    weights = {s: _weights(data, p, args.link, args.kind)[1] for s, p in zip(strategies, proxies)}
    table = balance_table(data, proxies, weights, pooled=args.pooled_sd)
    out = _out(args, "balance.csv")
    write_csv(table, out)
    print(out)
    return EXIT_OK


def cmd_estimate(args):
    from latentps.estimators import analyze_acee
    from latentps.sem.fit import model_to_dict

    data = load_dataset(args.data, args.schema)
    spec = _spec(args.spec, data)
    res = analyze_acee(data, args.outcome, spec, B=args.B, level=args.level,
                       seed=0 if args.seed is None else args.seed, workers=args.workers)
    outdir = _out(args, "estimate")
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(res.balance, outdir / "balance.csv")
    write_csv(res.estimates, outdir / "estimates.csv")
    (outdir / "model.json").write_text(json.dumps(model_to_dict(res.model), indent=2) + "\n")
    if res.bootstrap is not None:
        np.savetxt(outdir / "bootstrap_replicates.csv", res.bootstrap.replicates, delimiter=",", fmt="%.12g")
    print(outdir)
    return EXIT_OK


def cmd_reproduce(args):
    kwargs = {"reps": args.reps, "m_reps": args.m_reps, "workers": args.workers}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    for path in reproduce_figure(args.figure, _out(args, f"figure{args.figure}"), **kwargs):
        print(path)
    return EXIT_OK


def cmd_validate(args):
    from latentps.validation import run_all, write_reports

    cfg = _with_seed(_scenarios(args)[0], args)
    reports = run_all(cfg, args.reps, workers=args.workers)
    for path in write_reports(reports, _out(args, "validation")):
        print(path)
    failed = [f"{r.name}:{k}" for r in reports for k, v in r.summary.items() if not v["passed"]]
    if failed:
        print(json.dumps({"validation": "failed", "checks": failed}), file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "scores": cmd_scores, "ps": cmd_ps, "balance": cmd_balance,
    "estimate": cmd_estimate, "reproduce": cmd_reproduce, "validate": cmd_validate,
}


def _report(kind, exc):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def run_cli(argv=None) -> int:
    """Run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _report("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except (DataError, SpecError, FileNotFoundError) as exc:
        _report("data", exc)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _report("numerical", exc)
        return EXIT_NUMERIC


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
