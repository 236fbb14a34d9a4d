"""Command-line front end.

``ccmpc simulate``  closed-loop run(s) with CSV, manifest and figure output
``ccmpc validate``  invariant suites with a pass/fail table
``ccmpc sweep``     re-run the optimized controller over a grid of one parameter

Exit codes: 0 success, 1 validation failure, 2 configuration error,
3 solver failure. Errors are also reported as one JSON record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import OUTPUT_ENV, RunConfig
from .powertrain import VARIANTS, run_mpc, summarize
from .report import SUMMARY_COLUMNS, SWEEP_COLUMNS, plot_runs, plot_sweep, write_csv, write_log, write_manifest
from .stacked import ConfigurationError
from .uncertainty import mc_margin
from .validate import SUITES, run_suites

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
DEFAULT_OUT = "ccmpc_out"
SWEEP_PARAMS = ("delta_bar",)


class SolverFailure(RuntimeError):
    pass


def _error(kind: str, message: str, code: int) -> int:
    record = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def _load(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def _out_dir(args, cfg: RunConfig) -> Path:
    """``--out`` first, then the environment override, then the config, then the default."""
    if args.out:
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.output_dir or DEFAULT_OUT)


def _run(cfg: RunConfig, variant: str, seed: int):
    return run_mpc(variant, cfg.powertrain, cfg.spec_maps, cfg.scenarios, cfg.plant, seed, cfg.solver)


def _limit(cfg: RunConfig) -> float:
    p = cfg.powertrain
    return p.delta_bar + mc_margin(p.delta_bar, p.samples)


def cmd_simulate(args) -> int:
    cfg = _load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    cfg = cfg.with_seed(seed)
    out = _out_dir(args, cfg)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    logs, summary = {}, []
    for variant in variants:
        log = _run(cfg, variant, seed)
        logs[variant] = log
        summary.append(summarize(log, cfg.powertrain))
        write_log(log, out / variant if args.variant == "all" else out)
        print(f"{variant}: {len(log)} steps in {log.runtime:.1f} s, "
              f"max joint violation {summary[-1]['max_joint_violation']:.4f}, "
              f"degraded steps {summary[-1]['degraded_steps']}")
    if args.variant == "all":
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    write_manifest(out / "manifest.json", cfg.to_dict(), [seed], variants, __version__)
    if not args.no_plots:
        plot_runs(logs, out, cfg.powertrain.delta_bar, _limit(cfg))
    print(f"wrote {out}")
    degraded = sum(s["degraded_steps"] for s in summary)
    if degraded:
        raise SolverFailure(f"{degraded} step(s) ended without an optimal solve")
    return EXIT_OK


def cmd_validate(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    checks = run_suites(names)
    width = max(len(c.name) for c in checks)
    for c in checks:
        mark = "PASS" if c.passed else "FAIL"
        print(f"{mark}  {c.suite:<12} {c.name:<{width}}  value={c.value:.3e}  threshold={c.threshold:.3e}"
              + (f"  {c.detail}" if c.detail else ""))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigurationError(f"unsupported sweep parameter {args.param!r}")
    cfg = _load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = _out_dir(args, cfg)
    values = sorted(args.values)
    rows = []
    prev = None
    for value in values:
        try:
            pc = replace(cfg.powertrain, delta_bar=value)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        run_cfg = replace(cfg, powertrain=pc)
        log = _run(run_cfg, "optimized", seed)
        s = summarize(log, pc)
        first = float(log.rows[0]["objective"])
        limit = value + mc_margin(value, pc.samples)
        rows.append({
            "delta_bar": value, "seed": seed, "first_step_objective": first, "cost": s["cost"],
            "max_joint_violation": s["max_joint_violation"], "violation_limit": limit,
            "min_soc_margin": s["min_soc_margin"], "degraded_steps": s["degraded_steps"],
            "convexity_certified": bool(all(log.column("convexity_certified"))),
            "objective_monotone": prev is None or first <= prev + 1e-8 * max(1.0, abs(prev)),
            "violation_ok": s["max_joint_violation"] <= limit,
        })
        prev = first
        print(f"delta_bar={value:g}: first-step objective {first:.6g}, "
              f"max joint violation {s['max_joint_violation']:.4f} (limit {limit:.4f})")
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    write_manifest(out / "manifest.json", cfg.to_dict(), [seed], ["optimized"], __version__,
                   {"sweep": {"param": args.param, "values": values}})
    if not args.no_plots:
        plot_sweep(rows, out)
    print(f"wrote {out}")
    if any(r["degraded_steps"] for r in rows):
        raise SolverFailure("a sweep run ended without an optimal solve")
    ok = all(r["objective_monotone"] and r["violation_ok"] and r["convexity_certified"] for r in rows)
    return EXIT_OK if ok else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccmpc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the closed-loop powertrain experiment")
    s.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    s.add_argument("--variant", choices=VARIANTS + ("all",), default="optimized")
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, the config, or ./{DEFAULT_OUT})")
    s.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="run invariant suites")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.set_defaults(func=cmd_validate)

    w = sub.add_parser("sweep", help="re-run the optimized controller over a parameter grid")
    w.add_argument("--param", default="delta_bar", help="parameter to sweep (delta_bar)")
    w.add_argument("--values", type=float, nargs="+", required=True)
    w.add_argument("--config")
    w.add_argument("--seed", type=int)
    w.add_argument("--out")
    w.add_argument("--no-plots", action="store_true")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        return _error("configuration", str(exc), EXIT_CONFIG)
    except SolverFailure as exc:
        return _error("solver", str(exc), EXIT_SOLVER)


if __name__ == "__main__":
    sys.exit(main())
