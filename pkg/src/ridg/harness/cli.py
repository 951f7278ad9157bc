"""Command-line entry point: ``ridg <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, Instability, NonConvergence, RidgError
from ..law import get_problem
from ..mesh import build_mesh
from ..metrics import (CSV_COLUMNS, MetricsRecord, convergence_order, dof_count, efom, mesh_label,
                       records_to_csv)
from ..parallel import run_parallel, scaling_study, write_instrumentation
from ..predictor import NewtonConfig
from ..stepper import SchemeConfig, run
from .bench import bench_assembly
from .config import RunConfig, apply_env, load_config

__all__ = ["main", "build_parser", "UsageError"]

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    """Bad command line; carries the usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    """``"50,70,120"`` or an inclusive range ``"2..6"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value manifest; flags override it")
    p.add_argument("--problem")
    p.add_argument("--scheme", choices=("ridg", "rkdg"))
    p.add_argument("--mdeg", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--mesh", help="cells per axis, e.g. 50 or 60,60")
    p.add_argument("--final-time", type=float)
    p.add_argument("--newton-tol", type=float)
    p.add_argument("--newton-max-iter", type=int)
    p.add_argument("--backend")
    p.add_argument("--tasks", help="tasks per axis, e.g. 2 or 2,2")
    p.add_argument("--threads", type=int)
    p.add_argument("--output", help="output directory (default: RIDG_OUTPUT_DIR or .)")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, help="stop after this many steps")
    p.add_argument("--emit-plots", action="store_true", help="also write gnuplot data files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ridg", description="RIDG and SSP-RKDG solvers, studies and benchmarks")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="a single simulation")
    _add_run_options(p)

    p = sub.add_parser("convergence", help="error and order over a mesh sequence")
    _add_run_options(p)
    p.add_argument("--meshes", type=_int_list, required=True, help="cells per axis, e.g. 50,70,120")

    p = sub.add_parser("scaling", help="strong scaling over task counts")
    _add_run_options(p)
    p.add_argument("--task-counts", type=_int_list, required=True, help="total task counts, e.g. 1,4,9,36")

    p = sub.add_parser("stability", help="stable or unstable at each CFL number")
    _add_run_options(p)
    p.add_argument("--nus", type=_float_list, required=True, help="CFL numbers, e.g. 0.1,0.5,0.9")

    p = sub.add_parser("bench-assembly", help="Jacobian assembly timing per backend")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--orders", type=_int_list, default=[2, 3, 4, 5], help="Mdeg+1 values, e.g. 2..6")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--backends", default="quadrature,qqf")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="output directory (default: RIDG_OUTPUT_DIR or .)")
    p.add_argument("--emit-plots", action="store_true")
    return parser


_CFG_KEYS = ("problem", "scheme", "mdeg", "nu", "mesh", "final_time", "newton_tol", "newton_max_iter",
             "backend", "tasks", "threads", "output", "seed")


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _CFG_KEYS if getattr(args, k, None) is not None}
    cfg = apply_env(load_config(args.config, None))
    # command-line flags take precedence over both file and environment
    return load_config(None, {**_as_values(cfg), **overrides})


def _as_values(cfg: RunConfig) -> dict:
    return {k: getattr(cfg, k) for k in _CFG_KEYS}


def _scheme(cfg: RunConfig) -> SchemeConfig:
    return SchemeConfig(cfg.scheme, cfg.mdeg, cfg.nu,
                        NewtonConfig(cfg.newton_tol, cfg.newton_max_iter), backend=cfg.backend)


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _record(cfg: RunConfig, cells, steps, runtime, error, tasks=1, threads=1) -> MetricsRecord:
    d = len(cells)
    theta = (cfg.mdeg + 1) ** d
    n_el = int(np.prod(cells))
    return MetricsRecord(scheme=cfg.scheme, Mdeg=cfg.mdeg, nu=cfg.nu, mesh=mesh_label(cells),
                         dof=dof_count(theta, n_el), efom=str(efom(theta, n_el, d)), error=error,
                         runtime_s=runtime, tasks=tasks, cores=tasks * threads)


def _simulate(cfg: RunConfig, cells, max_steps=None):
    problem = get_problem(cfg.problem, cfg.final_time)
    mesh = build_mesh(problem.dim, cells)
    scheme = _scheme(cfg)
    grid = cfg.task_grid()
    if all(p == 1 for p in grid):
        return run(problem, scheme, mesh, max_steps=max_steps, threads=cfg.threads), mesh
    return run_parallel(problem, scheme, mesh, grid, cfg.threads, max_steps=max_steps), mesh


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _plot_cells(path: str, Q: np.ndarray, mesh) -> None:
    """Cell centers and cell averages, one row per cell."""
    centers = mesh.cell_centers()
    avg = Q.reshape(mesh.n_elements, -1)[:, 0]
    np.savetxt(path, np.column_stack([centers, avg]), header="cell centers (x1..xd), cell average")


def cmd_run(args, out) -> int:
    cfg = _config(args)
    res, mesh = _simulate(cfg, cfg.mesh_cells(), args.max_steps)
    rec = _record(cfg, mesh.cells_per_axis, res.steps, res.runtime_s, res.error,
                  int(np.prod(cfg.task_grid())), cfg.threads)
    d = _outdir(cfg.output)
    _write(os.path.join(d, "run.csv"), records_to_csv([rec]))
    if args.emit_plots:
        _plot_cells(os.path.join(d, "run_cells.dat"), res.state.Q, mesh)
    err = "n/a" if res.error is None else f"{res.error:.3e}"
    print(f"{cfg.scheme} Mdeg={cfg.mdeg} nu={cfg.nu} mesh={rec.mesh}: {res.steps} steps to t={res.state.t:g}, "
          f"error {err}, runtime {res.runtime_s:.3f}s", file=out)
    return EXIT_OK


def cmd_convergence(args, out) -> int:
    cfg = _config(args)
    records, prev = [], None
    for n in args.meshes:
        cells = (n,) * cfg.dim
        res, mesh = _simulate(cfg, cells, args.max_steps)
        rec = _record(cfg, cells, res.steps, res.runtime_s, res.error, int(np.prod(cfg.task_grid())), cfg.threads)
        if prev is not None and res.error and prev[1]:
            rec.order = convergence_order(prev[1], prev[0], res.error, mesh.h[0])
        prev = (mesh.h[0], res.error)
        records.append(rec)
        order = "--" if rec.order is None else f"{rec.order:.2f}"
        err = "n/a" if res.error is None else f"{res.error:.3e}"
        print(f"mesh {rec.mesh:>10}  dof {rec.dof:>8}  error {err}  order {order}  runtime {res.runtime_s:.3f}s",
              file=out)
    d = _outdir(cfg.output)
    _write(os.path.join(d, "convergence.csv"), records_to_csv(records))
    if args.emit_plots:
        rows = [(1.0 / int(r.mesh.split("x")[0]), r.error) for r in records if r.error]
        np.savetxt(os.path.join(d, "convergence.dat"), np.array(rows), header="h error")
    return EXIT_OK


def cmd_scaling(args, out) -> int:
    cfg = _config(args)
    problem = get_problem(cfg.problem, cfg.final_time)
    mesh = build_mesh(problem.dim, cfg.mesh_cells())
    d = _outdir(cfg.output)
    counters = {}

    def keep(n, res):
        counters[n] = res.counters
        per = res.counters[0].messages_per_step
        print(f"tasks {n:>4}: runtime {res.runtime_s:.3f}s, {res.steps} steps, "
              f"messages/step/task {per[0] if per else 0}", file=out)

    records = scaling_study(problem, _scheme(cfg), mesh, args.task_counts, cfg.threads,
                            max_steps=args.max_steps, on_result=keep)
    _write(os.path.join(d, "scaling.csv"), records_to_csv(records))
    for n, cs in counters.items():
        write_instrumentation(os.path.join(d, f"scaling_instrumentation_{n}.csv"), cs)
    for r in records:
        eff = "—" if r.efficiency_pct is None else f"{r.efficiency_pct:.1f}%"
        print(f"tasks {r.tasks:>4}: speedup {r.speedup:.2f}x efficiency {eff} comms {r.comms}", file=out)
    if args.emit_plots:
        np.savetxt(os.path.join(d, "scaling.dat"), np.array([(r.tasks, r.runtime_s, r.speedup) for r in records]),
                   header="tasks runtime_s speedup")
    return EXIT_OK


def cmd_stability(args, out) -> int:
    cfg = _config(args)
    cols = list(CSV_COLUMNS) + ["status"]
    rows, status_all = [], []
    for nu in args.nus:
        c = replace(cfg, nu=nu)
        try:
            res, mesh = _simulate(c, c.mesh_cells(), args.max_steps)
            rec = _record(c, mesh.cells_per_axis, res.steps, res.runtime_s, res.error,
                          int(np.prod(c.task_grid())), c.threads)
            status = "stable"
        except Instability as exc:
            rec = _record(c, c.mesh_cells(), exc.step, None, None)
            status = f"unstable at step {exc.step}"
        row = rec.row()
        row["status"] = status
        rows.append(row)
        status_all.append((nu, status))
        print(f"nu={nu:g}: {status}", file=out)
    d = _outdir(cfg.output)
    with open(os.path.join(d, "stability.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if args.emit_plots:
        np.savetxt(os.path.join(d, "stability.dat"),
                   np.array([(nu, 1.0 if s == "stable" else 0.0) for nu, s in status_all]), header="nu stable")
    return EXIT_OK


def cmd_bench(args, out) -> int:
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    for b in backends:
        if b not in ("qqf", "quadrature", "perturbation"):
            raise ConfigError("backends", f"unknown backend {b!r}")
    if args.dim not in (1, 2, 3):
        raise ConfigError("dim", f"must be 1, 2 or 3, got {args.dim}")
    if args.repetitions < 5:
        raise ConfigError("repetitions", f"must be >= 5, got {args.repetitions}")
    if len(args.orders) < 2 or min(args.orders) < 2:
        raise ConfigError("orders", "need at least two orders, each Mdeg+1 >= 2")
    res = bench_assembly(args.dim, args.orders, args.repetitions, backends, args.seed)
    out_dir = _outdir(args.output or os.environ.get("RIDG_OUTPUT_DIR") or ".")
    lines = ["order,backend,median_us"]
    lines += [f"{t.order},{t.backend},{t.median_s * 1e6:.1f}" for t in res.timings]
    _write(os.path.join(out_dir, "bench_assembly.csv"), "\n".join(lines) + "\n")
    header = "order " + " ".join(f"{b:>14}" for b in backends)
    print(f"median block-row assembly time (us), dim={args.dim}", file=out)
    print(header, file=out)
    for m in args.orders:
        print(f"{m:>5} " + " ".join(f"{res.median(b, m) * 1e6:>14.1f}" for b in backends), file=out)
    for b, e in res.exponents.items():
        print(f"fitted exponent {b}: {e:.2f}", file=out)
    if "qqf" in res.exponents and "quadrature" in res.exponents:
        print(f"exponent gap (quadrature - qqf): {res.exponents['quadrature'] - res.exponents['qqf']:.2f}", file=out)
    if args.emit_plots:
        np.savetxt(os.path.join(out_dir, "bench_assembly.dat"),
                   np.array([[m] + [res.median(b, m) for b in backends] for m in args.orders]),
                   header="order " + " ".join(backends))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "convergence": cmd_convergence,
    "scaling": cmd_scaling,
    "stability": cmd_stability,
    "bench-assembly": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (Instability, NonConvergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RidgError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
