"""Command-line front end: simulate | match | bias | diagnose."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

from . import __version__, estimators, matching, population, simulation, theory
from .matching import MatchConfig, MatchingError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_DEGENERATE = 3

_WITHOUT_REPLACEMENT = frozenset({"auto", "exact", "banded"})


class ConfigError(Exception):
    pass


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        with open(p) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}:1: top level must be a JSON object")
    for section in ("population", "simulation"):
        if section not in cfg:
            raise ConfigError(f"{path}: missing [{section}] section")
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"{path}: [{section}] must be an object")
    cfg.setdefault("matching", {})
    cfg.setdefault("output", {})
    return cfg


def _need(section: dict, name: str, key: str):
    if key not in section:
        raise ConfigError(f"[{name}] is missing required key {key!r}")
    return section[key]


def _build_sim_config(cfg: dict, args) -> tuple[simulation.SimConfig, object]:
    pop = cfg["population"]
    simc = cfg["simulation"]
    mat = cfg["matching"]

    kind = pop.get("kind", "prognostic")
    if kind == "prognostic":
        a_values = args.a if args.a else _need(pop, "population", "a_values")
        if any(a < 1 / 3 for a in a_values):
            raise ConfigError("[population] prognostic a_values must be >= 1/3")
        spec_factory = population.make_prognostic_spec
    elif kind == "categorical":
        a_values = [math.nan]
        params = {k: pop[k] for k in ("mass_a", "p_in_a", "p_out", "mu0_in",
                                      "mu0_out", "mu1_in", "mu1_out",
                                      "noise_sd") if k in pop}
        spec_factory = _categorical_factory(params)
    else:
        raise ConfigError(f"[population] kind must be 'prognostic' or "
                          f"'categorical', got {kind!r} (custom populations "
                          "are built through the Python API)")

    n_values = args.n if args.n else _need(simc, "simulation", "n_values")
    reps = args.reps if args.reps is not None else _need(simc, "simulation", "reps")
    seed = args.seed if args.seed is not None else simc.get("master_seed", 0)
    method = args.method or mat.get("method", "banded")

    try:
        mcfg = MatchConfig(
            band=args.band if args.band is not None else mat.get("band", matching.DEFAULT_BAND),
            capacity=args.capacity if args.capacity is not None else mat.get("capacity", 1),
            caliper=args.caliper if args.caliper is not None else mat.get("caliper"),
        )
        sim_config = simulation.SimConfig(
            a_values=tuple(float(a) for a in a_values),
            n_values=tuple(int(n) for n in n_values),
            reps=int(reps),
            master_seed=int(seed),
            match_method=method,
            match_config=mcfg,
            spec_kind=kind,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if method not in ("auto", "exact", "banded", "replacement", "capacitated"):
        raise ConfigError(f"[matching] unknown method {method!r}")
    return sim_config, spec_factory


class _categorical_factory:
    """Picklable a-independent factory for categorical populations."""

    def __init__(self, params):
        self.params = params

    def __call__(self, a):
        return population.make_categorical_spec(**self.params)


def cmd_simulate(args) -> int:
    try:
        cfg = _load_config(args.config)
        sim_config, spec_factory = _build_sim_config(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out_dir or cfg["output"].get("dir", "matchbias-out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    fmt = args.format or cfg["output"].get("format", "csv")

    cells = []
    started = time.perf_counter()
    try:
        rows = simulation.run_table(
            sim_config, spec_factory,
            on_cell=lambda row, secs: cells.append(
                {"a": row.a, "n": row.n, "seconds": round(secs, 3)}))
    except ValueError as exc:  # bad population parameters surface here
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - started

    csv_path = out_dir / "table.csv"
    md_path = out_dir / "table.md"
    simulation.rows_to_csv(rows, csv_path)
    md_path.write_text(simulation.rows_to_markdown(rows))
    manifest = {
        "run_id": f"{int(time.time())}-{sim_config.master_seed}",
        "tool": "matchbias",
        "version": __version__,
        "master_seed": sim_config.master_seed,
        "config": cfg,
        "files": [csv_path.name, md_path.name],
        "wall_clock_s": round(wall, 3),
        "cells": cells,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    if fmt == "md":
        print(simulation.rows_to_markdown(rows), end="")
    else:
        print(simulation.CSV_HEADER)
        for r in rows:
            print(f"{r.a!r},{r.n},{r.asymp_bias!r},{r.emp_bias!r},"
                  f"{r.emp_se!r},{r.reps_done},{r.degenerate_count}")
    failed = [r for r in rows if r.reps_done == 0 or r.note]
    if failed:
        for r in failed:
            print(f"cell (a={r.a:g}, n={r.n}) incomplete: {r.note}",
                  file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _read_id_column(path) -> list[str]:
    with open(path, newline="") as fh:
        return [row["id"] for row in csv.DictReader(fh)]


def cmd_match(args) -> int:
    try:
        smp = population.sample_from_csv(args.input)
        unit_ids = _read_id_column(args.input)
    except (OSError, ValueError, KeyError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    method = "replacement" if args.with_replacement else (args.method or "auto")
    try:
        cfg = MatchConfig(
            band=args.band if args.band is not None else matching.DEFAULT_BAND,
            capacity=1 if args.capacity is None else args.capacity,
            caliper=args.caliper)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if method in _WITHOUT_REPLACEMENT and smp.n1 > smp.n0:
        print(f"cannot match without replacement: {smp.n1} treated exceed "
              f"{smp.n0} controls, so some treated unit would be left "
              "unmatched; the ATT matching estimator is defined to be zero "
              "in this case. Rerun with --with-replacement to allow "
              "controls to be reused.", file=sys.stderr)
        return EXIT_DEGENERATE
    try:
        m = matching.match_scores(smp.treated_scores, smp.control_scores,
                                  method, cfg)
    except MatchingError as exc:
        print(f"degenerate matching problem: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE

    dropped: set[int] = set()
    if args.caliper is not None:
        m, dropped = matching.apply_caliper(
            m, smp.treated_scores, smp.control_scores, args.caliper)

    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    # pairs.csv carries the input file's id column, not subset positions
    treated_ids = [unit_ids[i] for i in smp.treated_idx]
    control_ids = [unit_ids[i] for i in smp.control_idx]
    with open(out_dir / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["treated_id", "control_id", "gap"])
        for i, j in sorted(m.pairs.items()):
            gap = abs(float(smp.treated_scores[i]) - float(smp.control_scores[j]))
            writer.writerow([treated_ids[i], control_ids[j], repr(gap)])
    summary = matching.matching_summary(m, cfg)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        fh.write("method,band,capacity,total_cost\r\n")
        fh.write(f"{summary['method']},{summary['band']},"
                 f"{summary['capacity']},{summary['total_cost']!r}\r\n")

    crossing = matching.has_crossing(m, smp.treated_scores, smp.control_scores) \
        if m.injective else None
    fraction, count = estimators.diagnose_overlap(smp)
    print(f"method={m.method} pairs={len(m.pairs)} total_cost={m.total_cost:.6g}")
    print(f"crossing_matches={'n/a' if crossing is None else crossing}")
    print(f"overlap: {fraction:.4f} of units have score >= 0.5 (count={count})")
    if args.caliper is not None:
        ids = ",".join(treated_ids[i] for i in sorted(dropped))
        print(f"caliper dropped {len(dropped)} treated units: [{ids}]")
    return EXIT_OK


def cmd_bias(args) -> int:
    if args.uniform_propensity is not None:
        spec = population.make_uniform_propensity_spec(args.uniform_propensity)
        ps = theory.pstar(spec, args.tol)
        report = theory.asymptotic_bias_propensity(spec, args.tol)
        print(f"p* = {ps.pstar:.6f} (defaulted={ps.defaulted}, "
              f"tail treated fraction={ps.tail_treated_prob:.6f}, "
              f"left_closed={ps.left_closed})")
        print(theory.format_bias_report(report))
        return EXIT_OK
    if not args.prognostic or args.a is None:
        print("bias: give either --prognostic --a A or --uniform-propensity HI",
              file=sys.stderr)
        return EXIT_CONFIG
    a = args.a
    closed = None
    try:
        closed = theory.prognostic_bias_closed_form(a)
    except ValueError as exc:
        if args.closed_form:
            print(f"closed form unavailable: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    if args.closed_form:
        print(f"closed-form bias(a={a:g}) = {closed:.6f}")
        return EXIT_OK
    try:
        spec = population.make_prognostic_spec(a)
    except ValueError as exc:
        print(f"invalid population: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = theory.asymptotic_bias_score(spec, args.tol)
    b = theory.prognostic_sstar_lower(a) if closed is not None else math.nan
    closed_text = f"{closed:.6f}" if closed is not None else "n/a"
    print(f"a = {a:g}   upper-region threshold b = {b:.6f}")
    print(f"bias: closed-form = {closed_text}   numeric = {report.bias:.6f}")
    print(theory.format_bias_report(report))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    try:
        smp = population.sample_from_csv(args.input)
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fraction, count = estimators.diagnose_overlap(smp, args.threshold)
    print(f"units with score >= {args.threshold:g}: {count} of {smp.n} "
          f"(fraction {fraction:.6f})")
    verdict = "rejected" if count > 0 else "not rejected"
    print(f"hypothesis 'no mass at or above the threshold': {verdict}")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matchbias",
        description="Matching without replacement on scalar scores: "
                    "simulation lab, matcher, and bias calculator.")
    parser.add_argument("--version", action="version",
                        version=f"matchbias {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo table from a config")
    sim.add_argument("--config", required=True, help="JSON config file")
    sim.add_argument("--out-dir", help="output directory")
    sim.add_argument("--seed", type=int, help="override master seed")
    sim.add_argument("--reps", type=int, help="override replication count")
    sim.add_argument("--n", type=int, nargs="+", help="override sample sizes")
    sim.add_argument("--a", type=float, nargs="+", help="override a grid")
    sim.add_argument("--method",
                     choices=["auto", "exact", "banded", "replacement",
                              "capacitated"])
    sim.add_argument("--band", type=int)
    sim.add_argument("--capacity", type=int)
    sim.add_argument("--caliper", type=float)
    sim.add_argument("--format", choices=["csv", "md"])
    sim.set_defaults(func=cmd_simulate)

    mat = sub.add_parser("match", help="match a CSV of units (id,w,s[,y])")
    mat.add_argument("input", help="input CSV")
    mat.add_argument("--method",
                     choices=["auto", "exact", "banded", "replacement",
                              "capacitated"])
    mat.add_argument("--with-replacement", action="store_true",
                     help="shorthand for --method replacement")
    mat.add_argument("--band", type=int)
    mat.add_argument("--capacity", type=int)
    mat.add_argument("--caliper", type=float)
    mat.add_argument("--out-dir")
    mat.set_defaults(func=cmd_match)

    bias = sub.add_parser("bias", help="theoretical bias reports")
    bias.add_argument("--prognostic", action="store_true",
                      help="prognostic-score example population")
    bias.add_argument("--a", type=float, help="prognostic parameter")
    bias.add_argument("--closed-form", action="store_true",
                      help="closed form only (requires 1/3 <= a <= 1)")
    bias.add_argument("--uniform-propensity", type=float, metavar="HI",
                      help="population with propensity Uniform[0, HI]")
    bias.add_argument("--tol", type=float, default=1e-8)
    bias.set_defaults(func=cmd_bias)

    diag = sub.add_parser("diagnose", help="overlap diagnostic on a CSV")
    diag.add_argument("input", help="input CSV")
    diag.add_argument("--threshold", type=float, default=0.5)
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
