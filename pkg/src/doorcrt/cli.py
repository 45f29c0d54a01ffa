"""Command-line entry point: ``doorcrt analyze | simulate | oracle``.

Exit status is 0 on success, 1 on invalid input, and 2 when a report was
written but some requested method could not be computed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .io import ScenarioError, file_digest, load_scenarios
from .kernel import TrialValidationError
from .report import AnalysisConfig, json_safe, analyze_file
from .simulation import DEFAULT_PROPS, ORACLE_DRAWS, MethodOC, make_model, run_scenario, true_door_oracle

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2
SIM_FORMAT = "doorcrt-simulation/1"


class _Parser(argparse.ArgumentParser):
    # Usage errors are input errors; keep status 2 for partial reports.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _probability(text: str) -> float:
    x = float(text)
    if not 0.0 < x < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return x


def _props(text: str) -> tuple:
    return tuple(float(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="doorcrt", description="DOOR probabilities for cluster randomized trials")
    p.add_argument("--version", action="version", version=f"doorcrt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="estimate and test DOOR probabilities for one trial CSV")
    a.add_argument("data", help="CSV with columns cluster_id,subject_id,arm,door_rank")
    a.add_argument("--alpha", type=_probability, default=0.05)
    a.add_argument("--sided", choices=("two_sided", "one_sided_greater"), default="two_sided")
    a.add_argument("--small-sample", choices=("auto", "on", "off"), default="auto",
                   help="small-sample corrections (auto: on when fewer than 15 clusters)")
    a.add_argument("--methods", default="auto",
                   help="'auto' or comma-separated estimators, e.g. ivw,ssw_type2,between/ss")
    a.add_argument("--k-levels", type=int, default=None, help="number of DOOR levels (default: max rank)")
    a.add_argument("--format", choices=("table", "csv", "json"), default="table",
                   help="format printed to stdout")
    a.add_argument("--out", help="also write the report here (.csv gives CSV, otherwise JSON)")

    s = sub.add_parser("simulate", help="operating characteristics over a scenario grid")
    s.add_argument("scenario", help="YAML scenario file")
    s.add_argument("--replicates", type=int, default=None, help="override the file's replicates")
    s.add_argument("--seed", type=int, default=None, help="override the file's seed")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="simulation", help="output prefix for <out>.csv and <out>.json")
    s.add_argument("--format", choices=("table", "csv", "json"), default="table",
                   help="format printed to stdout")

    o = sub.add_parser("oracle", help="Monte Carlo true D_w and D_b for a latent model")
    o.add_argument("--beta", type=float, default=0.1)
    o.add_argument("--rho-c", type=float, default=0.1)
    o.add_argument("--control-props", type=_props, default=DEFAULT_PROPS,
                   help="comma-separated control-arm level proportions")
    o.add_argument("--draws", type=int, default=ORACLE_DRAWS)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return p


def cmd_analyze(args) -> int:
    methods = "auto" if args.methods == "auto" else tuple(m.strip() for m in args.methods.split(","))
    config = AnalysisConfig(args.alpha, args.sided, args.small_sample, methods, args.k_levels)
    report = analyze_file(args.data, config)
    sys.stdout.write(report.render(args.format))
    if args.out:
        fmt = "csv" if Path(args.out).suffix.lower() == ".csv" else "json"
        Path(args.out).write_text(report.render(fmt), encoding="utf-8")
    for u in report.unavailable:
        print(f"warning: {u.method} unavailable ({u.code}): {u.message}. {u.hint}", file=sys.stderr)
    return EXIT_PARTIAL if report.partial else EXIT_OK


_CELL_FIELDS = ("cell", "design", "n", "m", "beta", "rho_c", "seed", "alpha", "sided",
                "truth_within", "truth_between")
_OC_FIELDS = tuple(f.name for f in fields(MethodOC))


def _csv_value(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario, args.replicates, args.seed)
    rows, cells = [], []
    for i, sc in enumerate(scenarios, start=1):
        oc = run_scenario(sc, workers=args.workers)
        cell = dict(zip(_CELL_FIELDS, (i, sc.design, sc.n_clusters, sc.cluster_size, sc.model.beta,
                                       sc.model.rho_c, sc.seed, sc.alpha, sc.sided,
                                       oc.truth_within, oc.truth_between)))
        results = [asdict(m) for m in oc.methods]
        cells.append({**cell, "replicates": sc.replicates, "control_props": list(sc.model.control_props),
                      "methods": results})
        rows.extend({**cell, **r} for r in results)
        print(f"cell {i}/{len(scenarios)}: {sc.design} n={sc.n_clusters} m={sc.cluster_size} "
              f"beta={sc.model.beta} rho_c={sc.model.rho_c}", file=sys.stderr)

    header = _CELL_FIELDS + _OC_FIELDS
    out = Path(args.out)
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_csv_value(r[k]) for k in header])
    summary = {"format": SIM_FORMAT,
               "provenance": {"software": f"doorcrt {__version__}",
                              "scenario_digest": file_digest(args.scenario),
                              "replicates_override": args.replicates, "seed_override": args.seed},
               "cells": cells}
    text = json.dumps(json_safe(summary), indent=2, sort_keys=True) + "\n"
    out.with_suffix(".json").write_text(text, encoding="utf-8")

    if args.format == "json":
        sys.stdout.write(text)
    elif args.format == "csv":
        sys.stdout.write(out.with_suffix(".csv").read_text(encoding="utf-8"))
    else:
        sys.stdout.write(_sim_table(rows))
    return EXIT_OK


def _sim_table(rows) -> str:
    def f(x, spec=".4f"):
        return "" if isinstance(x, float) and math.isnan(x) else format(x, spec)

    lines = [f"{'cell':>4} {'design':<10}{'n':>5}{'m':>5}{'rho_c':>7}{'beta':>6}  {'method':<34}"
             f"{'avail':>6}{'bias':>9}{'SD':>8}{'SE':>8}{'CP':>7}{'reject':>8}"]
    for r in rows:
        lines.append(f"{r['cell']:>4} {r['design']:<10}{r['n']:>5}{r['m']:>5}{r['rho_c']:>7.3g}"
                     f"{r['beta']:>6.3g}  {r['method']:<34}{f(r['availability'], '.2f'):>6}"
                     f"{f(r['bias']):>9}{f(r['sd']):>8}{f(r['mean_se']):>8}{f(r['coverage_95'], '.3f'):>7}"
                     f"{f(r['rejection_rate'], '.4f'):>8}")
    return "\n".join(lines) + "\n"


def cmd_oracle(args) -> int:
    model = make_model(args.beta, args.rho_c, args.control_props)
    if args.draws < 1:
        raise ValueError("draws must be >= 1")
    res = {ctx: true_door_oracle(model, ctx, args.draws, args.seed) for ctx in ("within", "between")}
    if args.format == "json":
        doc = {"beta": model.beta, "rho_c": model.rho_c, "control_props": list(model.control_props),
               "draws": args.draws, "seed": args.seed,
               "D_w": res["within"].value, "D_w_mcse": res["within"].mcse,
               "D_b": res["between"].value, "D_b_mcse": res["between"].mcse}
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv":
        print("quantity,value,mcse,draws")
        print(f"D_w,{res['within'].value!r},{res['within'].mcse!r},{args.draws}")
        print(f"D_b,{res['between'].value!r},{res['between'].mcse!r},{args.draws}")
    else:
        print(f"beta = {model.beta}, rho_c = {model.rho_c}, {args.draws} draws")
        print(f"D_w = {res['within'].value:.5f}  (MC SE {res['within'].mcse:.5f})")
        print(f"D_b = {res['between'].value:.5f}  (MC SE {res['between'].mcse:.5f})")
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "oracle": cmd_oracle}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except (TrialValidationError, ScenarioError, ValueError, OSError) as exc:
        print(f"doorcrt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
