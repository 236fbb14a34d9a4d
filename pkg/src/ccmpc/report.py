"""CSV, manifest and figure output for closed-loop runs.

Column orders are fixed (see ``COLUMNS``) and floats are written with
``repr`` so that identical runs give byte-identical files. Wall-clock
quantities are kept out of every file for the same reason.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .powertrain import MPCLog

COLUMNS = {
    "trajectory": (
        "step", "time", "tau_ds", "speed", "soc", "tau_cmd", "tau_mot", "tau_brk",
        "v_req_true", "v_req_mean", "v_req_std", "soc_target", "soc_margin", "engine_limit",
        "stage_cost_physical", "stage_cost_transformed",
    ),
    "risk": ("step", "time", "risk_engine", "risk_soc", "risk_motor", "risk_total", "lambda", "n_chance"),
    "violation": ("step", "time", "viol_engine", "viol_soc", "viol_motor", "viol_joint"),
    "solver": (
        "step", "status", "degraded", "iterations", "phase1_iterations", "kkt_residual",
        "objective", "quad_objective", "uniform_objective", "hessian_pd", "convexity_certified",
        "clamped",
    ),
}
SUMMARY_COLUMNS = (
    "seed", "variant", "cost", "tracking_cost", "max_joint_violation", "mean_joint_violation",
    "violation_limit", "min_soc_margin", "mean_soc_margin", "mean_tau_cmd", "mean_tau_mot", "degraded_steps",
)
SWEEP_COLUMNS = (
    "delta_bar", "seed", "first_step_objective", "cost", "max_joint_violation", "violation_limit",
    "min_soc_margin", "degraded_steps", "convexity_certified", "objective_monotone", "violation_ok",
)


def fmt(value) -> str:
    """Locale-independent, round-trip exact text for one cell."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])
    return path


def write_log(log: MPCLog, out_dir) -> list[Path]:
    """The four per-run CSV files."""
    out_dir = Path(out_dir)
    return [write_csv(out_dir / f"{name}.csv", cols, log.rows) for name, cols in COLUMNS.items()]


def write_manifest(path, config: dict, seeds, variants, version: str, extra: dict | None = None) -> Path:
    manifest = {
        "software": "ccmpc",
        "version": version,
        "seeds": list(seeds),
        "variants": list(variants),
        "config": config,
        "guarantee": "conditional on the shifted previous plan (state-dependent input bounds)",
        "objective_excludes_constant": True,
        "files": {name: list(cols) for name, cols in COLUMNS.items()},
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# Figures
# ----------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_runs(logs: dict, out_dir, delta_bar: float, limit: float) -> list[Path]:
    """Trajectory, risk and violation figures for one or more variants."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    first = next(iter(logs.values()))
    t = first.column("time")

    fig, ax = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    mean, std = first.column("v_req_mean"), first.column("v_req_std")
    ax[0].fill_between(t, mean - std, mean + std, color="0.85", label="request mean +/- 1 std")
    ax[0].plot(t, first.column("v_req_true"), "k--", lw=1, label="true request")
    for name, log in logs.items():
        ax[0].plot(t, log.column("speed"), label=name)
        ax[1].plot(t, log.column("soc"), label=name)
        ax[2].plot(t, log.column("tau_ds"), label=name)
    ax[1].plot(t, first.column("soc_target"), "k--", lw=1, label="SoC target")
    ax[2].plot(t, first.column("engine_limit"), "k--", lw=1, label="engine-torque limit")
    ax[0].set_ylabel("speed [km/h]")
    ax[1].set_ylabel("SoC [Ah]")
    ax[2].set_ylabel("drive-shaft torque [Nm]")
    ax[2].set_xlabel("time [s]")
    for a in ax:
        a.legend(fontsize=7)
    fig.tight_layout()
    paths.append(_save(fig, out_dir / "trajectory.png", plt))

    opt = logs.get("optimized")
    if opt is not None:
        fig, ax = plt.subplots(figsize=(8, 4))
        for g in ("engine", "soc", "motor"):
            ax.plot(t, opt.column(f"risk_{g}"), label=g)
        ax.plot(t, opt.column("risk_total"), "k", lw=1, label="total")
        ax.axhline(delta_bar, color="r", ls=":", lw=1, label="allowable risk")
        ax.set_yscale("log")
        ax.set_xlabel("time [s]")
        ax.set_ylabel("allocated risk")
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths.append(_save(fig, out_dir / "risk.png", plt))

    fig, ax = plt.subplots(figsize=(8, 4))
    for name, log in logs.items():
        ax.plot(t, log.column("viol_joint"), label=name)
    ax.axhline(delta_bar, color="r", ls=":", lw=1, label="allowable risk")
    ax.axhline(limit, color="r", ls="--", lw=1, label="allowable risk + MC margin")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("joint empirical violation")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(_save(fig, out_dir / "violation.png", plt))
    return paths


def plot_sweep(rows: list, out_dir) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
    db = [r["delta_bar"] for r in rows]
    ax[0].plot(db, [r["first_step_objective"] for r in rows], "o-")
    ax[0].set_xscale("log")
    ax[0].set_xlabel("allowable risk")
    ax[0].set_ylabel("first-step objective")
    ax[1].plot(db, [r["max_joint_violation"] for r in rows], "o-", label="max joint violation")
    ax[1].plot(db, [r["violation_limit"] for r in rows], "r--", label="limit")
    ax[1].set_xscale("log")
    ax[1].set_xlabel("allowable risk")
    ax[1].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, Path(out_dir) / "sweep.png", plt)


def _save(fig, path, plt) -> Path:
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
