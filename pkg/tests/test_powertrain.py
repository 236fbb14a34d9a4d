from dataclasses import replace

import numpy as np
import pytest

from ccmpc.ipm import OPTIMAL
from ccmpc.powertrain import (
    PlantParams,
    PowertrainConfig,
    PowertrainSpecMaps,
    SpeedScenarioModel,
    build_powertrain_problem,
    constraint_groups,
    physical_spec,
    run_mpc,
    sample_speed_profiles,
    summarize,
    to_internal,
    true_speed_profile,
)
from ccmpc.solver import solve, solve_deterministic
from ccmpc.stacked import ConfigurationError
from ccmpc.uncertainty import ScenarioSet


@pytest.fixture(scope="module")
def setup():
    cfg = PowertrainConfig()
    maps = PowertrainSpecMaps()
    plant = PlantParams().build()
    scen = sample_speed_profiles(SpeedScenarioModel(), 0, cfg.horizon, 60.0, cfg.samples, seed=3, v_next=60.25)
    built = build_powertrain_problem(cfg, maps, plant, to_internal(cfg.x0), scen)
    return cfg, maps, plant, scen, built


class TestScenarios:
    def test_one_euler_step(self):
        s = sample_speed_profiles(SpeedScenarioModel(std_accel=(0.0,) * 6), 0, 1, 60.0, 3, seed=0)
        np.testing.assert_allclose(s.samples[:, 1, 0], 60.25)

    def test_zero_std_equals_mean_profile(self):
        m = SpeedScenarioModel(std_accel=(0.0,) * 6)
        s = sample_speed_profiles(m, 0, 40, m.v0, 5, seed=1)
        for k in range(5):
            np.testing.assert_allclose(s.samples[k, :, 0], m.mean_profile(40), atol=1e-12)

    def test_mc_mean(self):
        m = SpeedScenarioModel()
        S = 10_000
        s = sample_speed_profiles(m, 10, 30, m.mean_profile(10)[10], S, seed=2).samples[:, :, 0]
        ref = m.mean_profile(40)[10:41]
        # per-sample spread grows along the window; compare at every step with its own sigma
        sigma = s.std(axis=0, ddof=1)
        ok = np.abs(s.mean(axis=0) - ref) <= 3 * sigma / np.sqrt(S) + 1e-12
        assert ok.all()

    def test_next_speed_is_known(self):
        s = sample_speed_profiles(SpeedScenarioModel(), 5, 10, 61.0, 50, seed=3, v_next=61.3)
        assert np.all(s.samples[:, 1, 0] == 61.3)
        assert np.ptp(s.samples[:, 2, 0]) > 0

    def test_intervals_of_twenty_steps(self):
        m = SpeedScenarioModel()
        iv = m.interval(np.arange(120))
        assert [int(np.sum(iv == i)) for i in range(6)] == [20] * 6

    def test_true_profile_reproducible(self):
        m = SpeedScenarioModel()
        np.testing.assert_array_equal(true_speed_profile(m, 7, 50), true_speed_profile(m, 7, 50))
        assert not np.array_equal(true_speed_profile(m, 7, 50), true_speed_profile(m, 8, 50))


class TestSpec:
    def test_motor_power_row(self):
        spec = physical_spec(PowertrainConfig(), PowertrainSpecMaps())
        th = np.array([60.0])
        assert spec.v_hi(th)[1] == pytest.approx(150.0)
        assert spec.v_lo(th)[1] == pytest.approx(-150.0)

    def test_torque_box_binds_at_low_speed(self):
        spec = physical_spec(PowertrainConfig(), PowertrainSpecMaps())
        assert spec.v_hi(np.array([30.0]))[1] == pytest.approx(200.0)

    def test_speed_floor(self):
        spec = physical_spec(PowertrainConfig(), PowertrainSpecMaps())
        assert spec.v_hi(np.array([0.0]))[1] == pytest.approx(200.0)

    def test_bad_config(self):
        with pytest.raises(ConfigurationError):
            PowertrainConfig(soc_lo=50.0)
        with pytest.raises(ConfigurationError):
            PowertrainSpecMaps(engine_speeds=(0.0, 0.0), engine_torques=(1.0, 2.0))
        with pytest.raises(ConfigurationError):
            PowertrainSpecMaps(soc_targets=(10.0, 30.0, 24.0)).check(PowertrainConfig())


class TestProblem:
    def test_chance_rows_are_the_three_families(self, setup):
        cfg, _, _, _, built = setup
        p = built.problem
        groups = constraint_groups(p.index)
        N = cfg.horizon
        engine = set(groups["engine"])
        soc_soft = set(p.index.channel_rows("soft", 2))
        motor = set(groups["motor"])
        assert set(p.chance_rows) == engine | soc_soft | motor
        assert len(engine) == N and len(soc_soft) == N and len(motor) == 2 * N

    def test_hessian_and_certificate(self, setup):
        p = setup[4].problem
        assert np.linalg.eigvalsh(p.H).min() > 0
        assert p.convexity_certified

    def test_zero_variance_problem_matches_deterministic(self, setup):
        cfg, maps, plant, scen, _ = setup
        mean = np.broadcast_to(scen.samples.mean(axis=0), scen.samples.shape).copy()
        p = build_powertrain_problem(cfg, maps, plant, to_internal(cfg.x0), ScenarioSet(mean)).problem
        a, b = solve(p), solve_deterministic(p)
        assert a.status == b.status == OPTIMAL
        assert np.max(np.abs(a.v_hat - b.v_hat)) <= 1e-5

    def test_first_step_budget(self, setup):
        p = setup[4].problem
        sol = solve(p)
        assert sol.status == OPTIMAL
        assert abs(sol.delta.sum() - 0.012) <= 1e-6 and sol.lam > 0

    def test_plan_execution_consistency(self, setup):
        cfg, _, plant, scen, built = setup
        p = built.problem
        sol = solve(p)
        x0 = to_internal(cfg.x0)
        u0 = plant.psi.inverse(sol.v_hat[:3], x0)
        theta0 = scen.samples[0, 0]
        x1 = plant.step(x0, u0, theta0)
        xi1 = plant.core.A @ p.xi0 + plant.core.B @ sol.v_hat[:3] + plant.core.c(theta0)
        assert np.max(np.abs(plant.phi(x1) - xi1)) <= 1e-8


@pytest.fixture(scope="module")
def logs():
    cfg = replace(PowertrainConfig(), steps=8, samples=256)
    return cfg, {v: run_mpc(v, cfg, seed=5) for v in ("deterministic", "uniform", "optimized")}


class TestClosedLoopShort:
    def test_lengths_and_status(self, logs):
        cfg, out = logs
        for log in out.values():
            assert len(log) == cfg.steps
            assert not any(log.column("degraded"))

    def test_optimized_budget(self, logs):
        log = logs[1]["optimized"]
        assert np.max(np.abs(log.column("risk_total") - 0.012)) <= 1e-6
        assert np.all(log.column("lambda") > 0)
        assert np.all(log.column("objective") <= log.column("uniform_objective")
                      + 1e-8 * np.abs(log.column("uniform_objective")))

    def test_same_true_profile(self, logs):
        out = logs[1]
        np.testing.assert_array_equal(out["optimized"].column("v_req_true"), out["uniform"].column("v_req_true"))

    def test_summary(self, logs):
        cfg, out = logs
        s = summarize(out["optimized"], cfg)
        assert s["degraded_steps"] == 0 and s["variant"] == "optimized"
        assert s["violation_limit"] == pytest.approx(0.012 + 3 * np.sqrt(0.012 * 0.988 / 256))

    def test_deterministic_and_optimized_coincide_without_noise(self):
        cfg = replace(PowertrainConfig(), steps=4, samples=16)
        sm = SpeedScenarioModel(std_accel=(0.0,) * 6)
        a = run_mpc("optimized", cfg, scenario_model=sm, seed=1)
        b = run_mpc("deterministic", cfg, scenario_model=sm, seed=1)
        for col in ("tau_cmd", "tau_mot", "tau_brk"):
            np.testing.assert_allclose(a.column(col), b.column(col), atol=1e-4)

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            run_mpc("robust")
