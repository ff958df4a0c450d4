"""
Command line entry point: ``hygrohom <command> --config run.json``.

Exit codes: 0 success, 1 configuration or assumption failure, 2 solver
failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cell import build_tables, effective_tensor
from .errors import AssumptionViolation, ConfigurationError, HygrohomError, OutputError, SolverError
from .fem import StructuredGrid
from .io import FieldSnapshot, RunConfig, emit_snapshot, parse_config, write_csv
from .lab import EpsilonSweepConfig, check_apriori_bounds, run_epsilon_sweep, translation_estimate
from .microstructure import MesoTiling, volume_fraction
from .solver import MacroProvider, MesoProvider, StepReport, run_simulation

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_USAGE = 0, 1, 2, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hygrohom", description="Meso-scale and homogenised heat/moisture transport with hydration memory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides the config)")
        return p

    add("validate", "check the material laws against the structural assumptions")
    p = add("cell", "effective tensors and contrast tables")
    p.add_argument("--contrast", type=float, help="also solve the cell problem at this cement/aggregate contrast")
    add("meso", "run the eps-periodic two-phase problem")
    add("macro", "run the homogenised problem")
    add("converge", "eps-sweep comparing meso and homogenised runs")
    p = add("translate", "time-translation functionals of a run")
    p.add_argument("--mode", choices=("meso", "macro"), default="meso")
    p.add_argument("--taus", type=int, nargs="+", default=[1, 2, 4, 8], help="shifts in multiples of h")
    return parser


def _outdir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def write_manifest(out: Path, cfg: RunConfig, command: str, summary: dict) -> Path:
    manifest = {
        "command": command,
        "config": str(cfg.source) if cfg.source else None,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "raster_sha256_prefix": cfg.raster.digest(),
        "versions": {"hygrohom": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "invariants": summary,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _report_rows(reports):
    fields = [f for f in StepReport.CSV_FIELDS if f != "wall_time"]
    return fields, [[getattr(r, f) for f in fields] for r in reports]


def _summary(traj, cfg: RunConfig) -> dict:
    mon = check_apriori_bounds(traj, cfg.laws, cfg.constants)
    reps = traj.reports
    return {
        "steps": traj.n_steps,
        "max_principle_ok": all(r.max_principle_ok for r in reps),
        "memory_ok": all(r.memory_ok for r in reps),
        "max_mass_balance_defect": max((r.mass_balance_defect for r in reps), default=0.0),
        "max_pressure_iterations": max((r.iterations for r in reps), default=0),
        "apriori": {ch.name: {"passed": ch.passed, "margin": ch.margin} for ch in mon.checks},
    }


def _macro_provider(cfg: RunConfig, resolution: int | None = None):
    t_a, t_l = build_tables(cfg.raster, cfg.laws, cfg.cell_resolution)
    n = resolution or cfg.resolution
    return MacroProvider(StructuredGrid(n, n), t_a, t_l, volume_fraction(cfg.raster), cfg.laws, cfg.constants)


def _provider(cfg: RunConfig, mode: str):
    if mode == "meso":
        return MesoProvider(MesoTiling(cfg.epsilon, cfg.raster, cfg.resolution), cfg.laws, cfg.constants)
    return _macro_provider(cfg)


def _simulate(cfg: RunConfig, mode: str, out: Path):
    provider = _provider(cfg, mode)
    traj = run_simulation((cfg.p0, cfg.theta0), provider, cfg.step, cfg.n_steps)
    grid = provider.grid
    ext = "csv" if cfg.output_format == "csv" else "vtk"
    for i in range(0, traj.n_steps + 1):
        if i % cfg.output_every and i != traj.n_steps:
            continue
        for name, series in (("p", traj.p), ("theta", traj.theta), ("r", traj.r)):
            snap = FieldSnapshot.from_grid(grid, i * cfg.step.h, name, series[i])
            emit_snapshot(snap, out / f"{mode}_{name}_{i:05d}.{ext}", cfg.output_format)
    header, rows = _report_rows(traj.reports)
    write_csv(out / f"{mode}_steps.csv", header, rows)
    return traj


def cmd_validate(cfg: RunConfig, args) -> int:
    print(cfg.validation)
    print("all assumption checks passed")
    return EXIT_OK


def cmd_cell(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    t_a, t_l = build_tables(cfg.raster, cfg.laws, cfg.cell_resolution)
    t_a.save(out / "table_hydraulic.json")
    t_l.save(out / "table_thermal.json")
    t_a.to_csv(out / "table_hydraulic.csv")
    t_l.to_csv(out / "table_thermal.csv")
    summary = {"hydraulic_nodes": len(t_a.nodes), "thermal_nodes": len(t_l.nodes),
               "cement_fraction": volume_fraction(cfg.raster)}
    if args.contrast is not None:
        if not args.contrast > 0.0:
            raise ConfigurationError("--contrast must be positive")
        A = effective_tensor(cfg.raster, (args.contrast, 1.0), cfg.cell_resolution)
        print(f"effective tensor at contrast {args.contrast:g} (cement/aggregate, unit aggregate):")
        for row in A:
            print("  " + "  ".join(format(v, ".10e") for v in row))
        write_csv(out / "effective_tensor.csv", ["contrast", "k11", "k12", "k21", "k22"],
                  [[float(args.contrast), *map(float, A.ravel())]])
        summary["symmetry_defect"] = float(abs(A[0, 1] - A[1, 0]))
    write_manifest(out, cfg, "cell", summary)
    return EXIT_OK


def _cmd_run(mode):
    def run(cfg: RunConfig, args) -> int:
        out = _outdir(cfg, args)
        t0 = time.perf_counter()
        traj = _simulate(cfg, mode, out)
        summary = _summary(traj, cfg)
        write_manifest(out, cfg, mode, summary)
        print(f"{mode}: {traj.n_steps} steps in {time.perf_counter() - t0:.2f} s; "
              f"max principle {'ok' if summary['max_principle_ok'] else 'VIOLATED'}; "
              f"outputs in {out}")
        return EXIT_OK
    return run


def cmd_converge(cfg: RunConfig, args) -> int:
    if not cfg.sweep:
        raise ConfigurationError("converge needs a 'sweep' section", pointer="/sweep")
    out = _outdir(cfg, args)
    sweep = EpsilonSweepConfig(cfg.sweep["epsilons"], cfg.sweep["resolutions"], cfg.raster, cfg.laws,
                               cfg.constants, cfg.step, cfg.n_steps, (cfg.p0, cfg.theta0),
                               cfg.sweep.get("macro_resolution"), cfg.cell_resolution)
    rep = run_epsilon_sweep(sweep)
    rep.to_csv(out / "epsilon_sweep.csv")
    for e, ep, et, er in zip(rep.epsilons, rep.error_p, rep.error_theta, rep.error_r):
        print(f"eps={e:<10g} |p-p0|={ep:.4e} |theta-theta0|={et:.4e} |r-r0|={er:.4e}")
    write_manifest(out, cfg, "converge", {"final_ratio_p": rep.final_ratio("p"),
                                          "final_ratio_theta": rep.final_ratio("theta"),
                                          "decreasing": rep.decreasing})
    return EXIT_OK


def cmd_translate(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    traj = _simulate(cfg, args.mode, out)
    rep = translation_estimate(traj, [k * cfg.step.h for k in args.taus], cfg.laws)
    rep.to_csv(out / "translation.csv")
    for tau, a, b, c in zip(rep.taus, rep.E_p, rep.E_theta, rep.E_r):
        print(f"tau={tau:<10g} E_p/tau={a / tau:.4e} E_theta/tau={b / tau:.4e} E_r/tau={c / tau:.4e}")
    summary = _summary(traj, cfg)
    summary.update({f"band_{k}": rep.band(k) for k in ("p", "theta", "r")})
    write_manifest(out, cfg, "translate", summary)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "cell": cmd_cell,
    "meso": _cmd_run("meso"),
    "macro": _cmd_run("macro"),
    "converge": cmd_converge,
    "translate": cmd_translate,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = parse_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except AssumptionViolation as exc:
        print(exc.report, file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigurationError, OutputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except HygrohomError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
