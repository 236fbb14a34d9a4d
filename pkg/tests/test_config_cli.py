import json

import pytest

from ccmpc.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, main
from ccmpc.config import OUTPUT_ENV, RunConfig
from ccmpc.report import COLUMNS, SUMMARY_COLUMNS, SWEEP_COLUMNS
from ccmpc.stacked import ConfigurationError

SHORT = {"seed": 4, "powertrain": {"steps": 3, "samples": 64}}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestSchema:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("data", [
        {"bogus": 1},
        {"powertrain": {"horizon_steps": 10}},
        {"solver": {"polish": "yes"}},
        {"solver": {"polishing": True}},
        {"powertrain": {"delta_bar": 1.5}},
        {"seed": "zero"},
    ])
    def test_rejected(self, data):
        with pytest.raises(ConfigurationError):
            RunConfig.from_dict(data)

    def test_polish_flag_accepted(self):
        assert RunConfig.from_dict({"solver": {"polish": False}}).solver.polish is False

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            RunConfig.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "absent.json")


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        code = main(["simulate", "--config", _write(tmp_path, {"nope": 1}), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["error"] == "configuration" and record["exit_code"] == EXIT_CONFIG

    def test_bad_arguments(self):
        assert main(["simulate", "--variant", "robust"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_unsupported_sweep_param(self, tmp_path):
        assert main(["sweep", "--param", "horizon", "--values", "1", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_solver_failure(self, tmp_path, capsys):
        data = dict(SHORT, solver={"max_newton": 2})
        code = main(["simulate", "--config", _write(tmp_path, data), "--out", str(tmp_path / "o"), "--no-plots"])
        assert code == EXIT_SOLVER
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "solver"

    def test_validate_suite(self, capsys):
        assert main(["validate", "--suite", "convexity"]) == EXIT_OK
        assert "checks passed" in capsys.readouterr().out

    def test_validation_exit_code_constant(self):
        assert (EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_SOLVER) == (0, 1, 2, 3)


class TestSimulate:
    def test_outputs_and_determinism(self, tmp_path):
        cfg = _write(tmp_path, SHORT)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", cfg, "--out", str(a), "--no-plots"]) == EXIT_OK
        assert main(["simulate", "--config", cfg, "--out", str(b), "--no-plots"]) == EXIT_OK
        for name, cols in COLUMNS.items():
            text = (a / f"{name}.csv").read_bytes()
            assert text == (b / f"{name}.csv").read_bytes()
            lines = text.decode().splitlines()
            assert lines[0].split(",") == list(cols) and len(lines) == 4
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seeds"] == [4] and manifest["variants"] == ["optimized"]

    def test_manifest_reproduces_run(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", _write(tmp_path, SHORT), "--out", str(a), "--no-plots"]) == EXIT_OK
        cfg = json.loads((a / "manifest.json").read_text())["config"]
        assert main(["simulate", "--config", _write(tmp_path, cfg, "again.json"), "--out", str(b),
                     "--no-plots"]) == EXIT_OK
        for name in COLUMNS:
            assert (a / f"{name}.csv").read_bytes() == (b / f"{name}.csv").read_bytes()

    def test_all_variants_and_plots(self, tmp_path):
        out = tmp_path / "all"
        assert main(["simulate", "--config", _write(tmp_path, SHORT), "--variant", "all", "--out", str(out)]) == 0
        for v in ("deterministic", "uniform", "optimized"):
            assert all((out / v / f"{n}.csv").exists() for n in COLUMNS)
        header = (out / "summary.csv").read_text().splitlines()[0]
        assert header.split(",") == list(SUMMARY_COLUMNS)
        assert all((out / f).stat().st_size > 0 for f in ("trajectory.png", "risk.png", "violation.png"))

    def test_output_dir_priority(self, tmp_path, monkeypatch):
        data = dict(SHORT, output_dir=str(tmp_path / "from_config"))
        cfg = _write(tmp_path, data)
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from_env"))
        assert main(["simulate", "--config", cfg, "--no-plots"]) == EXIT_OK
        assert (tmp_path / "from_env" / "risk.csv").exists()
        assert main(["simulate", "--config", cfg, "--no-plots", "--out", str(tmp_path / "flag")]) == EXIT_OK
        assert (tmp_path / "flag" / "risk.csv").exists()
        monkeypatch.delenv(OUTPUT_ENV)
        assert main(["simulate", "--config", cfg, "--no-plots"]) == EXIT_OK
        assert (tmp_path / "from_config" / "risk.csv").exists()


def test_sweep(tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", "--values", "0.05", "0.004", "0.012", "--config", _write(tmp_path, SHORT),
                 "--out", str(out)])
    assert code == EXIT_OK
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].split(",") == list(SWEEP_COLUMNS)
    assert [float(r.split(",")[0]) for r in lines[1:]] == [0.004, 0.012, 0.05]
    assert all(r.split(",")[SWEEP_COLUMNS.index("objective_monotone")] == "true" for r in lines[1:])
    assert (out / "sweep.png").exists()
