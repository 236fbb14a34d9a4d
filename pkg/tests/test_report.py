import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from ccmpc.powertrain import PowertrainConfig, run_mpc
from ccmpc.report import COLUMNS, fmt, plot_runs, plot_sweep, write_csv, write_log, write_manifest


@pytest.mark.parametrize("value,text", [
    (True, "true"), (np.bool_(False), "false"), (3, "3"), (np.int64(-2), "-2"),
    (0.1, "0.1"), (np.float64(1e-17), "1e-17"), (math.inf, "inf"), (-math.inf, "-inf"),
    (math.nan, "nan"), ("optimal", "optimal"),
])
def test_fmt(value, text):
    assert fmt(value) == text


def test_float_round_trip():
    rng = np.random.default_rng(0)
    for x in rng.normal(scale=1e3, size=200):
        assert float(fmt(x)) == x


def test_write_csv_order(tmp_path):
    p = write_csv(tmp_path / "x" / "t.csv", ("b", "a"), [{"a": 1, "b": 2.5, "c": 0}])
    with p.open() as fh:
        assert list(csv.reader(fh)) == [["b", "a"], ["2.5", "1"]]


@pytest.fixture(scope="module")
def log():
    return run_mpc("optimized", replace(PowertrainConfig(), steps=3, samples=64), seed=2)


def test_log_files(tmp_path, log):
    paths = write_log(log, tmp_path)
    assert [p.name for p in paths] == [f"{n}.csv" for n in COLUMNS]
    for p, cols in zip(paths, COLUMNS.values()):
        rows = list(csv.reader(p.open()))
        assert tuple(rows[0]) == cols and len(rows) == 4


def test_manifest(tmp_path):
    p = write_manifest(tmp_path / "m.json", {"seed": 1}, [1], ["optimized"], "0.0", {"note": "x"})
    m = json.loads(p.read_text())
    assert m["config"] == {"seed": 1} and m["note"] == "x"
    assert m["files"]["risk"] == list(COLUMNS["risk"])
    assert m["objective_excludes_constant"] is True


def test_plots(tmp_path, log):
    paths = plot_runs({"optimized": log}, tmp_path, 0.012, 0.03)
    assert [p.name for p in paths] == ["trajectory.png", "risk.png", "violation.png"]
    assert all(p.read_bytes()[:4] == b"\x89PNG" for p in paths)
    rows = [{"delta_bar": d, "first_step_objective": 1.0 / d, "max_joint_violation": d / 2,
             "violation_limit": d} for d in (0.01, 0.1)]
    assert plot_sweep(rows, tmp_path).exists()
