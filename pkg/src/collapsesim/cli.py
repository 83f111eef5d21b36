"""Command-line interface: ``collapsesim rates | evolve | sweep | trajectories | validate | plot``.

Exit codes: 0 success, 1 validation failure (bad config or a failed check),
2 numerical failure, 3 I/O failure.  Outputs go to ``--out`` (written
atomically, so a failing command never leaves a partial file) or stdout.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .config import ScenarioConfig, load_config
from .entanglement import Bipartition, first_order_pq, negativity
from .evolution import evolve_exact
from .generators import build_tables
from .io import atomic_write, csv_text, read_csv, svg_line_chart
from .model import DP, ModelError, NumericalError, ValidationError, bmv_scenario
from .trajectories import compare_to_master, run_ensemble, run_trajectory, write_trajectory_dump
from .validate import FAULTS, ValidationSettings, report_dict, run_validation, summary_lines

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class CheckFailed(Exception):
    """A command ran but its own verdict is a failure."""


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


def _bipartition(cfg: ScenarioConfig, system) -> Bipartition:
    return Bipartition.of(system, cfg["bipartition"])


# --------------------------------------------------------------------------
# commands

def cmd_rates(cfg: ScenarioConfig, args) -> None:
    tables = cfg.tables()
    d = tables.dim
    rows = [(x, y, tables.Gamma[x, y], tables.Theta[x, y], tables.C[x, y]) for x in range(d) for y in range(d)]
    _emit(csv_text(["x_index", "y_index", "gamma", "theta", "c"], rows), args.out)


def cmd_evolve(cfg: ScenarioConfig, args) -> None:
    sc = cfg.scenario()
    tables = cfg.tables()
    t_max = cfg["time"]["t_max"] or 5 / tables.gamma_max
    times = np.linspace(0.0, t_max, cfg["time"]["n_points"])
    states = evolve_exact(sc.rho0, tables, times).states
    bp = _bipartition(cfg, sc.system)
    d = tables.dim
    header = ["t"] + [f"coherence_0_{y}" for y in range(1, d)] + ["negativity"]
    first_order = cfg.model == "dp-monitoring" and cfg["kappa"] == 2.0
    if first_order:
        header.append("negativity_first_order")
    rows = []
    for t, rho in zip(times, states):
        row = [t, *np.abs(rho[0, 1:]), negativity(rho, sc.system, bp).negativity]
        if first_order:
            r = cfg.raw
            row.append(first_order_pq(r["m"], r["a"], r["d"], r["sigma"], t, sc.constants).n_approx)
        rows.append(row)
    _emit(csv_text(header, rows), args.out)


def cmd_sweep(cfg: ScenarioConfig, args) -> None:
    if not isinstance(cfg.kernel, DP):
        raise ValidationError("sweep needs a DP model (p and q are defined for the Coulomb kernel)")
    param = cfg["sweep"]["param"]
    dt = cfg["sweep"]["dt"]
    constants = cfg.constants
    rows = []
    for value in cfg.sweep_values():
        r = dict(cfg.raw, **{param: float(value)})
        system, rho0 = bmv_scenario(r["m"], r["a"], r["d"], r["sigma"])
        tables = build_tables(system, cfg.kernel, constants, cfg.model)
        pq = first_order_pq(r["m"], r["a"], r["d"], r["sigma"], dt, constants)
        state = evolve_exact(rho0, tables, [0.0, dt], validate=False).states[-1]
        n_exact = negativity(state, system, _bipartition(cfg, system)).negativity
        ratio = abs(pq.q) / abs(pq.p) if pq.p != 0 else float("nan")
        rows.append((float(value), pq.p, pq.q, pq.n_approx, n_exact, pq.n_large_sigma, ratio))
    header = [param, "p", "q", "n_approx", "n_exact", "n_large_sigma", "abs_q_over_p"]
    _emit(csv_text(header, rows), args.out)


def cmd_trajectories(cfg: ScenarioConfig, args) -> None:
    sc = cfg.scenario()
    tr = cfg["trajectories"]
    with_backaction = tr["with_backaction"]
    target = sc.averaged(with_backaction)
    dt = tr["dt"] or 1e-3 / max(target.gamma_max, sc.monitoring().gamma_max)
    t_max = tr["t_max"] or 2 / target.gamma_max
    checkpoints = np.linspace(0.0, t_max, tr["checkpoints"] + 1)[1:]
    small = tr["n_traj"] < 100
    if small:
        print(f"warning: n_traj={tr['n_traj']} < 100; error bands are unreliable", file=sys.stderr)
    summary = run_ensemble(sc, tr["n_traj"], tr["master_seed"], with_backaction, checkpoints=checkpoints,
                           dt=dt, threads=cfg["threads"], allow_small=small)
    cmp = compare_to_master(summary, target, sc.rho0)
    rows = []
    for j, t in enumerate(summary.times):
        rows.append((t, cmp.max_abs_deviation[j], float(summary.stderr_real[j].max()),
                     float(summary.stderr_imag[j].max()), cmp.max_z[j]))
    text = csv_text(["t", "max_abs_deviation", "max_stderr_real", "max_stderr_imag", "max_deviation_in_se"], rows)
    report = {
        "passed": cmp.passed, "n_se": cmp.n_se, "trajectories": summary.trajectory_count,
        "aborted": summary.aborted, "master_seed": summary.master_seed, "dt": summary.dt,
        "with_backaction": with_backaction, "reference": target.tag,
        "max_deviation_in_se": float(cmp.max_z.max()),
    }
    if args.report:
        atomic_write(args.report, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.dump:
        n_steps = int(round(t_max / dt))
        record = run_trajectory(sc, tr["master_seed"], 0, n_steps, dt, with_backaction)
        write_trajectory_dump(args.dump, record, cfg.raw)
    _emit(text, args.out)
    verdict = "PASS" if cmp.passed else "FAIL"
    print(f"{verdict}: max deviation {report['max_deviation_in_se']:.2f} SE (tol {cmp.n_se:g}), "
          f"{summary.trajectory_count} trajectories, {summary.aborted} aborted", file=sys.stderr)
    if not cmp.passed:
        raise CheckFailed("ensemble mean deviates from the master equation")


def cmd_validate(cfg: ScenarioConfig, args) -> None:
    settings = ValidationSettings(n_traj=1000 if args.quick else cfg["trajectories"]["n_traj"],
                                  master_seed=args.seed if args.seed is not None else 12345,
                                  threads=cfg["threads"], inject_fault=args.inject_fault)
    results = run_validation(settings)
    _emit(json.dumps(report_dict(results, settings), indent=2, sort_keys=True) + "\n", args.out)
    for line in summary_lines(results):
        print(line, file=sys.stderr)
    if not all(r.passed for r in results):
        raise CheckFailed("validation checks failed")


def cmd_plot(_: ScenarioConfig, args) -> None:
    header, data = read_csv(args.csv)
    x_col = args.x or header[0]
    if x_col not in header:
        raise ValidationError(f"column {x_col!r} not in {header}")
    y_cols = args.y.split(",") if args.y else [h for h in header if h != x_col]
    missing = [c for c in y_cols if c not in header]
    if missing:
        raise ValidationError(f"columns {missing} not in {header}")
    x = data[:, header.index(x_col)]
    ys = {c: data[:, header.index(c)] for c in y_cols}
    svg = svg_line_chart(x, ys, x_col, log_x=args.log_x, title=args.title or "")
    if args.out is None:
        raise ValidationError("plot needs --out")
    atomic_write(args.out, svg)


COMMANDS = {
    "rates": cmd_rates,
    "evolve": cmd_evolve,
    "sweep": cmd_sweep,
    "trajectories": cmd_trajectories,
    "validate": cmd_validate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON scenario config")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")

    parser = argparse.ArgumentParser(prog="collapsesim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("rates", parents=[common], help="Gamma, Theta and C tables as CSV")
    sub.add_parser("evolve", parents=[common], help="exact evolution with coherences and negativity")
    sub.add_parser("sweep", parents=[common], help="p, q and negativities over a parameter grid")
    p = sub.add_parser("trajectories", parents=[common], help="ensemble of stochastic trajectories vs master equation")
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--dump", help="write the raw record of trajectory 0 here")
    p = sub.add_parser("validate", parents=[common], help="run the oracle suite")
    p.add_argument("--quick", action="store_true", help="1000 trajectories per ensemble check")
    p.add_argument("--inject-fault", choices=FAULTS, help="deliberately corrupt a table to see checks fail")
    p = sub.add_parser("plot", parents=[common], help="SVG line chart from a CSV produced here")
    p.add_argument("csv")
    p.add_argument("--x", help="x column (default: first)")
    p.add_argument("--y", help="comma-separated y columns (default: all others)")
    p.add_argument("--log-x", action="store_true")
    p.add_argument("--title")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ValidationError("--seed must be an unsigned 64-bit integer")
            overrides["trajectories"] = {"master_seed": args.seed}
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = load_config(args.config, overrides=overrides)
        COMMANDS[args.command](cfg, args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ModelError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
