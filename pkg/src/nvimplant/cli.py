"""Command line entry point: ``nvimplant run|report|fit|plan``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import bundled_scenarios, load_scenario
from .errors import ConfigError, NVImplantError
from .fitkit import fit_decay, fit_dips, fit_edge, fit_tof_peaks, identify_mass, peak_centers
from .pipeline import emit_report, run_scenario
from .planner import LatticeSpec, lattice_population, neighbor_prob, required_dose

OUTPUT_ROOT_ENV = "NVIMPLANT_OUTPUT_ROOT"


def _cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.config)
    except ConfigError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        scenario = scenario.model_copy(update={"master_seed": args.seed})
    out = args.output or scenario.output_dir or Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / scenario.name
    code = run_scenario(scenario, out, workers=args.workers)
    print(f"artifacts in {out} (exit {code})")
    if code == 0:
        print((Path(out) / "report.txt").read_text(), end="")
    return code


def _cmd_report(args) -> int:
    try:
        path, warnings = emit_report(args.dir)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(path.read_text(), end="")
    return 0


def _cmd_fit(args) -> int:
    if args.kind == "edge":
        fit = fit_edge(io.read_scan(args.csv))
    elif args.kind == "tof":
        fit = fit_tof_peaks(io.read_histogram(args.csv), n_peaks=args.peaks)
        peaks = []
        for c in peak_centers(fit):
            try:
                sp, resid = identify_mass(c, args.energy_ev, args.length_m)
                peaks.append({"center_s": c, "species": sp.label, "residual_amu": resid})
            except NVImplantError as exc:
                peaks.append({"center_s": c, "species": None, "error": str(exc)})
        fit.extra["peaks"] = peaks
    elif args.kind == "odmr":
        fit = fit_dips(io.read_odmr(args.csv))
    else:
        fit = fit_decay(io.read_hahn(args.csv), fix_stretch=not args.free_stretch)
    print(fit.to_json())
    return 0


def _cmd_plan(args) -> int:
    if args.query == "neighbor":
        result = {"p": args.p, "k": args.k, "probability": neighbor_prob(args.p, args.k)}
    elif args.query == "dose":
        result = {"target": args.target, "yield": args.yield_, "atoms_per_ion": args.atoms_per_ion,
                  "ions_per_site": required_dose(args.target, args.yield_, args.atoms_per_ion)}
    else:
        occ, stats = lattice_population(LatticeSpec(args.rows, args.cols, args.p), np.random.default_rng(args.seed))
        result = {"rows": args.rows, "cols": args.cols, "p": args.p, "seed": args.seed, **stats.to_dict()}
        if args.out:
            io.write_matrix(args.out, occ.astype(int), {"p": args.p, "seed": args.seed})
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvimplant", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file or a bundled scenario "
                                     f"({', '.join(bundled_scenarios())})")
    run.add_argument("config")
    run.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<name> or runs/<name>)")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--seed", type=int, default=None, help="override master_seed")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="summarize an artifact directory")
    rep.add_argument("dir")
    rep.set_defaults(func=_cmd_report)

    fit = sub.add_parser("fit", help="fit a CSV produced by this tool or with the same headers")
    fit.add_argument("kind", choices=["edge", "tof", "odmr", "hahn"])
    fit.add_argument("csv")
    fit.add_argument("--energy-ev", type=float, default=5900.0)
    fit.add_argument("--length-m", type=float, default=0.428)
    fit.add_argument("--peaks", type=int, default=None, help="number of TOF peaks to keep")
    fit.add_argument("--free-stretch", action="store_true", help="fit the Hahn stretch exponent")
    fit.set_defaults(func=_cmd_fit)

    plan = sub.add_parser("plan", help="lattice planning queries")
    psub = plan.add_subparsers(dest="query", required=True)
    nb = psub.add_parser("neighbor")
    nb.add_argument("p", type=float)
    nb.add_argument("k", type=int, nargs="?", default=4)
    dose = psub.add_parser("dose")
    dose.add_argument("target", type=float)
    dose.add_argument("yield_", metavar="yield", type=float)
    dose.add_argument("--atoms-per-ion", type=int, default=1)
    lat = psub.add_parser("lattice")
    lat.add_argument("rows", type=int)
    lat.add_argument("cols", type=int)
    lat.add_argument("p", type=float)
    lat.add_argument("--seed", type=int, default=0)
    lat.add_argument("--out", help="write the occupancy grid as CSV")
    plan.set_defaults(func=_cmd_plan)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NVImplantError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
