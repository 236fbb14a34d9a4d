"""Hybrid-powertrain receding-horizon example.

State ``x = [tau_ds, V, S]`` (drive-shaft engine torque in Nm, speed in km/h,
state of charge in Ah); input ``u = [tau_cmd, tau_mot, tau_brk]`` in Nm; the
uncertain parameter is the requested speed ``theta = V_req``.

The SoC regeneration target is a soft *lower* bound while the optimiser only
knows soft upper bounds, so the plant is modelled internally on
``[tau_ds, V, -S]``. With an odd ``Phi`` this is the same plant; everything
reported to the outside is converted back to ``S``.

The exactly linearizable plant is synthetic: a turbo-lag first-order engine,
a speed integrator with drag and a charge integrator, wrapped in mild cubic
state and input transforms and a speed-dependent motor efficiency.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .exlin import CubicMap, ExlinModel, InputMap, resolve_input_bounds, sigmoid_scale
from .ipm import OPTIMAL, SolverConfig
from .solver import assemble, solve, solve_deterministic, solve_fixed_risk, warm_shift
from .stacked import (
    ConfigurationError,
    LinearModel,
    SpecBundle,
    Weights,
    index_map,
    simulate,
    stack_dynamics,
)
from .uncertainty import DistributionMode, RiskBudget, ScenarioSet, empirical_violation, mc_margin

logger = logging.getLogger(__name__)

VARIANTS = ("deterministic", "uniform", "optimized")
GROUPS = ("engine", "soc", "motor")
SIGN = np.array([1.0, 1.0, -1.0])  # physical state <-> internal coordinates


@dataclass(frozen=True)
class PowertrainConfig:
    """Simulation settings; defaults are the reference experiment."""

    dt: float = 0.1
    horizon: int = 10
    steps: int = 120
    x0: tuple = (10.0, 60.0, 30.0)
    soc_ref: float = 30.0
    w_req: float = 10.0
    w_eng: float = 1e-3
    w_mot: float = 5e-5
    w_brk: float = 1e-2
    w_soc: float = 10.0
    w_delta: float = 1e-6
    soc_lo: float = 20.0
    soc_hi: float = 40.0
    mot_lo: float = -200.0
    mot_hi: float = 200.0
    power_lo: float = -9000.0
    power_hi: float = 9000.0
    brk_hi: float = 50.0
    delta_bar: float = 0.012
    samples: int = 1024
    speed_floor: float = 1.0
    mode: str = "mv"

    def __post_init__(self):
        if not (self.soc_lo < self.soc_hi and self.mot_lo < self.mot_hi and self.power_lo < self.power_hi):
            raise ConfigurationError("bounds must be ordered")
        if self.brk_hi <= 0 or self.speed_floor <= 0:
            raise ConfigurationError("brake bound and speed floor must be positive")
        if self.horizon < 1 or self.steps < 1 or self.samples < 2:
            raise ConfigurationError("horizon, steps and samples must be positive")
        if not 0.0 < self.delta_bar < 1.0:
            raise ConfigurationError("delta_bar must lie in (0, 1)")


@dataclass(frozen=True)
class SpeedScenarioModel:
    """Piecewise-constant Gaussian requested acceleration in km/h/s."""

    mean_accel: tuple = (2.5, 0.0, -2.5, 1.2, -1.2, 2.4)
    std_accel: tuple = (0.15,) * 6
    v0: float = 60.0
    steps: int = 120
    dt: float = 0.1

    def __post_init__(self):
        if len(self.mean_accel) != len(self.std_accel) or not self.mean_accel:
            raise ConfigurationError("need one mean and one std per interval")
        if any(s < 0 for s in self.std_accel):
            raise ConfigurationError("acceleration std must be nonnegative")

    @property
    def n_intervals(self) -> int:
        return len(self.mean_accel)

    def interval(self, step) -> np.ndarray:
        """Interval index of each step; steps past the run stay in the last interval."""
        step = np.asarray(step)
        idx = (step * self.n_intervals) // self.steps
        return np.clip(idx, 0, self.n_intervals - 1)

    def mean_profile(self, length: int | None = None) -> np.ndarray:
        length = self.steps if length is None else length
        a = np.asarray(self.mean_accel)[self.interval(np.arange(length))]
        return self.v0 + np.concatenate([[0.0], np.cumsum(a * self.dt)])

    def std_profile(self, length: int | None = None) -> np.ndarray:
        """Prior standard deviation of the requested speed at each step."""
        length = self.steps if length is None else length
        iv = self.interval(np.arange(length))
        counts = np.zeros((length + 1, self.n_intervals))
        for k in range(length):
            counts[k + 1] = counts[k]
            counts[k + 1, iv[k]] += 1
        var = (counts * self.dt) ** 2 @ np.asarray(self.std_accel) ** 2
        return np.sqrt(var)

    def draw_accel(self, rng, size: int) -> np.ndarray:
        mean = np.asarray(self.mean_accel)
        std = np.asarray(self.std_accel)
        return mean + std * rng.standard_normal((size, self.n_intervals))


def step_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key) pair."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def sample_speed_profiles(model: SpeedScenarioModel, start: int, length: int, v_start: float,
                          S: int, seed: int | None = None, v_next: float | None = None,
                          rng=None) -> ScenarioSet:
    """Requested-speed scenarios over steps ``start .. start + length``.

    Each sample draws one acceleration per interval and Euler-integrates from
    ``v_start``. When ``v_next`` is given the speed one step ahead is known and
    integration continues from it.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    acc = model.draw_accel(rng, S)
    steps = start + np.arange(length)
    a = acc[:, model.interval(steps)]
    v = np.empty((S, length + 1))
    v[:, 0] = v_start
    v[:, 1:] = v_start + np.cumsum(a * model.dt, axis=1)
    if v_next is not None and length >= 1:
        v[:, 1] = v_next
        v[:, 2:] = v_next + np.cumsum(a[:, 1:] * model.dt, axis=1)
    return ScenarioSet(v[..., None], seed=seed)


def true_speed_profile(model: SpeedScenarioModel, seed: int, length: int) -> np.ndarray:
    """The single realised requested-speed trajectory of a run."""
    return sample_speed_profiles(model, 0, length, model.v0, 1, rng=step_rng(seed, 0)).samples[0, :, 0]


@dataclass(frozen=True)
class PowertrainSpecMaps:
    """Speed-dependent limits as monotone lookup tables (linear interpolation, flat ends).

    The defaults are illustrative: an engine-torque ceiling that rises with
    speed and a regeneration target around the reference SoC that drops with
    speed (more kinetic energy left to recover).
    """

    engine_speeds: tuple = (0.0, 40.0, 60.0, 80.0, 120.0)
    engine_torques: tuple = (30.0, 40.0, 55.0, 70.0, 100.0)
    soc_speeds: tuple = (0.0, 60.0, 120.0)
    soc_targets: tuple = (36.0, 30.0, 24.0)

    def __post_init__(self):
        for xs, ys in ((self.engine_speeds, self.engine_torques), (self.soc_speeds, self.soc_targets)):
            if len(xs) != len(ys) or len(xs) < 1:
                raise ConfigurationError("lookup tables need matching nonempty columns")
            if np.any(np.diff(xs) <= 0):
                raise ConfigurationError("lookup speeds must be strictly increasing")
        d = np.diff(self.engine_torques)
        if not (np.all(d >= 0) or np.all(d <= 0)):
            raise ConfigurationError("engine-torque table must be monotone")
        d = np.diff(self.soc_targets)
        if not (np.all(d >= 0) or np.all(d <= 0)):
            raise ConfigurationError("SoC target table must be monotone")

    def engine_limit(self, v):
        return np.interp(v, self.engine_speeds, self.engine_torques)

    def soc_target(self, v):
        return np.interp(v, self.soc_speeds, self.soc_targets)

    def check(self, config: PowertrainConfig) -> None:
        if min(self.soc_targets) < config.soc_lo or max(self.soc_targets) > config.soc_hi:
            raise ConfigurationError("SoC target must stay inside the SoC bounds")


@dataclass(frozen=True)
class PlantParams:
    """Parameters of the synthetic exactly linearizable plant (internal coordinates)."""

    phi_a: tuple = (1.0, 1.0, 3.0)
    phi_b: tuple = (1e-6, 1e-6, 3e-5)
    psi_d: tuple = (1e-7, 1e-7, 1e-7)
    psi_weights: tuple = ((0.0, 0.01, 0.0), (0.0, 0.02, 0.0), (0.0, 0.0, 0.0))
    psi_bias: tuple = (-0.6, -1.2, 0.0)
    psi_amplitude: tuple = (0.1, 0.1, 0.0)
    engine_lag: float = 0.8
    drag: float = 0.998
    torque_gain: float = 0.0025
    charge_gain: float = 3e-3
    bias: tuple = (0.0, 0.0, 6e-3)

    def build(self) -> ExlinModel:
        lag, g = self.engine_lag, self.torque_gain
        A = np.array([[lag, 0.0, 0.0], [g, self.drag, 0.0], [0.0, 0.0, 1.0]])
        B = np.array([[1.0 - lag, 0.0, 0.0], [0.0, g, -g], [0.0, self.charge_gain, 0.0]])
        c = np.asarray(self.bias, dtype=float)
        core = LinearModel(A, B, bias=lambda theta: np.broadcast_to(c, np.shape(theta)[:-1] + (3,)),
                           bias_depends_on_theta=False)
        phi = CubicMap(self.phi_a, self.phi_b)
        psi = InputMap(CubicMap(np.ones(3), self.psi_d),
                       sigmoid_scale(self.psi_weights, self.psi_bias, self.psi_amplitude))
        return ExlinModel(phi, psi, core)


def to_internal(x) -> np.ndarray:
    return np.asarray(x, dtype=float) * SIGN


to_physical = to_internal


def physical_spec(config: PowertrainConfig, maps: PowertrainSpecMaps) -> SpecBundle:
    """Constraint set in (internal) x/u coordinates as functions of the requested speed."""
    inf = np.inf
    floor = config.speed_floor

    def _v(theta):
        return np.asarray(theta, dtype=float)[..., 0]

    def stack(*cols):
        cols = np.broadcast_arrays(*[np.asarray(c, dtype=float) for c in cols])
        return np.stack(cols, axis=-1)

    def xi_req(theta):
        v = _v(theta)
        return stack(0.0 * v, v, 0.0 * v)

    def xi_lo(theta):
        v = _v(theta)
        return stack(-inf + 0 * v, -inf, -config.soc_hi)

    def xi_hi(theta):
        v = _v(theta)
        return stack(maps.engine_limit(v), inf, -config.soc_lo)

    def soft_hi(theta):
        v = _v(theta)
        return stack(inf + 0 * v, inf, -maps.soc_target(v))

    def v_lo(theta):
        v = np.maximum(_v(theta), floor)
        return stack(0.0 * v, np.maximum(config.mot_lo, config.power_lo / v), 0.0)

    def v_hi(theta):
        v = np.maximum(_v(theta), floor)
        return stack(inf + 0 * v, np.minimum(config.mot_hi, config.power_hi / v), config.brk_hi)

    flags = {
        "xi_req": True,
        "state_lo": [False, False, False],
        "state_hi": [True, False, False],
        "input_lo": [False, True, False],
        "input_hi": [False, True, False],
        "soft": [False, False, True],
    }
    return SpecBundle(3, 3, xi_req=xi_req, xi_lo=xi_lo, xi_hi=xi_hi, v_lo=v_lo, v_hi=v_hi,
                      xi_soft_hi=soft_hi, theta_dependent=flags)


def constraint_groups(index) -> dict:
    """Rows of the three constraint families in the stacked constraint vector."""
    return {
        "engine": index.channel_rows("state_hi", 0),
        "soc": np.concatenate([index.channel_rows("soft", 2), index.channel_rows("state_lo", 2),
                               index.channel_rows("state_hi", 2)]),
        "motor": np.concatenate([index.channel_rows("input_lo", 1), index.channel_rows("input_hi", 1)]),
    }


def weights_for(config: PowertrainConfig) -> Weights:
    return Weights(
        tracking=np.array([0.0, config.w_req, 0.0]),
        input=np.array([config.w_eng, config.w_mot, config.w_brk]),
        soft=np.array([1.0, 1.0, config.w_soc]),
        risk=config.w_delta,
    )


@dataclass
class PowertrainProblem:
    problem: object
    spec: SpecBundle
    clamped: int


def build_powertrain_problem(config: PowertrainConfig, maps: PowertrainSpecMaps, plant: ExlinModel,
                             x_internal, scenarios: ScenarioSet, prev_xi_plan=None,
                             mode: DistributionMode | None = None) -> PowertrainProblem:
    """Assemble one receding-horizon problem in transformed coordinates.

    ``theta`` is the requested speed (one scalar per step). Input bounds are
    resolved at the measured state for the first step and along the shifted
    previous plan afterwards.
    """
    N = config.horizon
    if scenarios.horizon != N:
        raise ConfigurationError(f"scenario horizon {scenarios.horizon} != {N}")
    clamped = int(np.sum(scenarios.samples < config.speed_floor))
    spec_x = physical_spec(config, maps)
    spec = resolve_input_bounds(spec_x, plant.phi, plant.psi, x_internal, prev_xi_plan, N=N)
    stacked = stack_dynamics(plant.core, N)
    mode = mode or DistributionMode(config.mode)
    xi0 = plant.phi.forward(np.asarray(x_internal, dtype=float))
    groups = constraint_groups(index_map(stacked))
    problem = assemble(stacked, spec, plant.core, scenarios, mode, weights_for(config), xi0,
                       RiskBudget(config.delta_bar), groups=groups)
    return PowertrainProblem(problem, spec, clamped)


@dataclass
class MPCLog:
    """Per-step record of one closed-loop run."""

    variant: str
    seed: int
    rows: list = field(default_factory=list)
    runtime: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


def _group_risk(problem, delta) -> dict:
    out = {g: 0.0 for g in GROUPS}
    if len(delta) == 0:
        return out
    full = np.zeros(problem.index.n_rows)
    full[problem.chance_rows] = delta
    for g in GROUPS:
        out[g] = float(full[problem.groups[g]].sum())
    return out


def run_mpc(variant: str, config: PowertrainConfig = PowertrainConfig(),
            maps: PowertrainSpecMaps = PowertrainSpecMaps(),
            scenario_model: SpeedScenarioModel = SpeedScenarioModel(),
            plant_params: PlantParams = PlantParams(), seed: int = 0,
            solver_config: SolverConfig = SolverConfig(), compare_uniform: bool = True,
            keep_problems: bool = False) -> MPCLog:
    """Closed-loop simulation of one controller variant.

    At each step fresh scenarios are drawn (next-step speed known), the
    problem is assembled and solved, the first input is recovered through
    ``Psi^-1`` and applied to the plant. The committed plan is then scored
    against the same scenarios. For the optimized variant the uniform
    allocation is also solved on the same problem so the two objectives can be
    compared step by step.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    maps.check(config)
    plant = plant_params.build()
    N = config.horizon
    v_true = true_speed_profile(scenario_model, seed, config.steps + N + 1)
    v_mean = scenario_model.mean_profile(config.steps + 1)
    v_std = scenario_model.std_profile(config.steps + 1)
    x = to_internal(config.x0)
    log = MPCLog(variant, seed)
    prev_sol = prev_plan = None
    problems = []
    t_start = time.perf_counter()
    for t in range(config.steps):
        scen = sample_speed_profiles(scenario_model, t, N, v_true[t], config.samples,
                                     rng=step_rng(seed, 1, t), v_next=v_true[t + 1])
        built = build_powertrain_problem(config, maps, plant, x, scen, prev_plan)
        problem = built.problem
        warm = warm_shift(prev_sol, problem.index, config.delta_bar) if prev_sol is not None else None
        if variant == "deterministic":
            sol = solve_deterministic(problem, solver_config, warm)
        elif variant == "uniform":
            sol = solve_fixed_risk(problem, None, solver_config, warm)
        else:
            sol = solve(problem, solver_config, warm)
        degraded = sol.status != OPTIMAL
        if degraded:
            logger.warning("step %d (%s): solver status %s", t, variant, sol.status)
            if warm is not None:
                sol.v_hat = warm.z[:problem.n_v_vars]
        uniform_obj = np.nan
        if variant == "optimized" and compare_uniform and problem.n_c:
            uni = solve_fixed_risk(problem, None, solver_config, warm)
            uniform_obj = uni.objective if uni.status == OPTIMAL else np.nan

        xi0 = problem.xi0
        v0 = sol.v_hat[:3]
        u0 = plant.psi.inverse(v0, x)
        x_next = plant.step(x, u0, [v_true[t]])
        y = problem.y(sol.z)
        viol = empirical_violation(y, problem.X_samples, problem.groups)
        risk = _group_risk(problem, sol.delta)
        xi_plan = simulate(plant.core, xi0, sol.v_hat, scen.samples[0])
        prev_plan = xi_plan
        prev_sol = sol
        if keep_problems:
            problems.append((problem, sol))

        xp, up = to_physical(x), u0
        target = float(maps.soc_target(v_true[t]))
        row = {
            "step": t, "time": t * config.dt,
            "tau_ds": xp[0], "speed": xp[1], "soc": xp[2],
            "tau_cmd": up[0], "tau_mot": up[1], "tau_brk": up[2],
            "v_req_true": v_true[t], "v_req_mean": v_mean[t], "v_req_std": v_std[t],
            "soc_target": target, "soc_margin": xp[2] - target,
            "engine_limit": float(maps.engine_limit(v_true[t])),
            "stage_cost_physical": config.w_req * (xp[1] - v_true[t]) ** 2,
            "stage_cost_transformed": config.w_req * float(
                (plant.phi.forward(x)[1] - plant.phi.forward(np.array([0.0, v_true[t], 0.0]))[1]) ** 2),
            "risk_engine": risk["engine"], "risk_soc": risk["soc"], "risk_motor": risk["motor"],
            "risk_total": float(np.sum(sol.delta)),
            "viol_engine": viol["engine"], "viol_soc": viol["soc"], "viol_motor": viol["motor"],
            "viol_joint": viol["joint"],
            "status": sol.status, "degraded": degraded, "iterations": sol.iterations,
            "phase1_iterations": sol.phase1_iterations, "kkt_residual": sol.kkt_residual,
            "objective": sol.objective, "quad_objective": sol.quad_objective,
            "uniform_objective": uniform_obj, "lambda": sol.lam, "n_chance": problem.n_c,
            "clamped": built.clamped, "hessian_pd": sol.hessian_pd,
            "convexity_certified": problem.convexity_certified,
        }
        log.rows.append(row)
        x = x_next
    log.runtime = time.perf_counter() - t_start
    if keep_problems:
        log.problems = problems
    return log


def summarize(log: MPCLog, config: PowertrainConfig) -> dict:
    viol = log.column("viol_joint")
    margin = log.column("soc_margin")
    return {
        "seed": log.seed,
        "variant": log.variant,
        "cost": float(np.sum(log.column("quad_objective"))),
        "tracking_cost": float(np.sum(log.column("stage_cost_physical"))),
        "max_joint_violation": float(viol.max()),
        "mean_joint_violation": float(viol.mean()),
        "violation_limit": config.delta_bar + mc_margin(config.delta_bar, config.samples),
        "min_soc_margin": float(margin.min()),
        "mean_soc_margin": float(margin.mean()),
        "mean_tau_cmd": float(np.mean(log.column("tau_cmd"))),
        "mean_tau_mot": float(np.mean(log.column("tau_mot"))),
        "degraded_steps": int(np.sum(log.column("degraded"))),
        "runtime_s": log.runtime,
    }


def compare_controllers(config: PowertrainConfig = PowertrainConfig(), seeds=(0,),
                        maps: PowertrainSpecMaps = PowertrainSpecMaps(),
                        scenario_model: SpeedScenarioModel = SpeedScenarioModel(),
                        plant_params: PlantParams = PlantParams(),
                        solver_config: SolverConfig = SolverConfig()) -> tuple[list, dict]:
    """Run the three variants on the same requested-speed draws.

    Returns the summary rows and the logs keyed by ``(variant, seed)``.
    """
    rows, logs = [], {}
    for seed in seeds:
        for variant in VARIANTS:
            log = run_mpc(variant, config, maps, scenario_model, plant_params, seed, solver_config)
            logs[(variant, seed)] = log
            rows.append(summarize(log, config))
    return rows, logs


def config_dict(config: PowertrainConfig, maps: PowertrainSpecMaps, scenario_model: SpeedScenarioModel,
                plant_params: PlantParams) -> dict:
    return {
        "powertrain": asdict(config),
        "spec_maps": asdict(maps),
        "scenarios": asdict(scenario_model),
        "plant": asdict(plant_params),
    }
