"""The thirteen acceptance criteria, each printing one PASS/FAIL line.

The closed-loop criteria share one full-length run per variant (module
fixture). Run with ``pytest tests/test_acceptance.py -v`` to see the lines.
"""

import math

import numpy as np
import pytest

from ccmpc.exlin import CubicMap
from ccmpc.instances import random_instance, scalar_chance_instance, zero_variance
from ccmpc.ipm import OPTIMAL
from ccmpc.powertrain import PowertrainConfig, run_mpc
from ccmpc.solver import WarmStart, kkt_report, solve, solve_deterministic
from ccmpc.stacked import LinearModel, stack_bias, stack_dynamics
from ccmpc.uncertainty import (
    BD,
    CDF,
    MV,
    Gaussian,
    Tightening,
    TruncatedLognormal,
    Uniform,
    delta_conv,
    psi,
)
from ccmpc.validate import random_exlin
from oracles import mc_sigma, step_by_step

DELTA_BAR = 0.012
S_MC = 100_000


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {name} ({detail})")
        return ok

    return emit


@pytest.fixture(scope="module")
def closed_loop():
    cfg = PowertrainConfig()
    opt = run_mpc("optimized", cfg, seed=0, keep_problems=True)
    det = run_mpc("deterministic", cfg, seed=0)
    return cfg, opt, det


def test_c01_budget_tightness(closed_loop, report):
    cfg, opt, _ = closed_loop
    status = opt.column("status")
    gap = np.abs(opt.column("risk_total") - DELTA_BAR)[status == OPTIMAL]
    ok = len(gap) == cfg.steps == 120 and gap.max() <= 1e-6 and opt.runtime <= 300.0
    assert report(1, "budget tightness over the 120-step run", ok,
                  f"optimal {len(gap)}/{cfg.steps}, max gap {gap.max():.2e} <= 1e-6, "
                  f"runtime {opt.runtime:.1f} s <= 300 s")


def test_c02_lambda_positive(closed_loop, report):
    _, opt, _ = closed_loop
    mask = (opt.column("status") == OPTIMAL) & (opt.column("n_chance") > 0)
    lam = opt.column("lambda")[mask]
    ok = mask.sum() > 0 and lam.min() > 0
    assert report(2, "budget multiplier positive", ok, f"{mask.sum()} solves, min lambda {lam.min():.3e}")


def _grid_values(kind):
    if kind == CDF:
        t, hi = Tightening(CDF, np.zeros(1), np.zeros(1), (Gaussian(),)), delta_conv(CDF, Gaussian())
    elif kind == BD:
        # scale (U - L)/sqrt(2) with U - L = 2
        t, hi = Tightening(BD, np.zeros(1), np.full(1, math.sqrt(2.0))), delta_conv(BD)
    else:
        t, hi = Tightening(MV, np.zeros(1), np.ones(1)), delta_conv(MV)
    grid = np.linspace(1e-6, hi, 1000)
    return grid, np.array([float(np.ravel(t.value(d))[0]) for d in grid])


def test_c03_psi_convexity(report):
    worst = {}
    for kind, expect_hi in ((MV, 0.75), (BD, math.exp(-0.5)), (CDF, 0.5)):
        grid, vals = _grid_values(kind)
        assert grid[-1] == pytest.approx(expect_hi, abs=1e-12)
        d2 = vals[:-2] - 2.0 * vals[1:-1] + vals[2:]
        worst[kind] = float(np.min(d2 + 1e-8 * (1 + np.abs(vals[1:-1]))))
    ok = min(worst.values()) >= 0
    assert report(3, "psi convex on (1e-6, delta_conv]", ok,
                  ", ".join(f"{k} margin {v:.2e}" for k, v in worst.items()))


def _coverage_bound(kind, law, d):
    if kind == MV:
        return law.mean + math.sqrt(law.var * (1 - d) / d)
    if kind == BD:
        lo, hi = law.support
        return law.mean + (hi - lo) * math.sqrt(math.log(1 / d) / 2)
    return float(law.isf(d))


def test_c04_concentration_coverage(report):
    laws = {"gaussian": Gaussian(1.0, 2.0), "uniform": Uniform(0.0, 1.0),
            "truncated_lognormal": TruncatedLognormal(0.0, 0.5, 4.0)}
    rng = np.random.default_rng(40)
    fails, n, tight_worst = [], 0, 0.0
    for name, law in laws.items():
        x = law.sample(rng, S_MC)
        kinds = (MV, BD, CDF) if np.all(np.isfinite(law.support)) else (MV, CDF)
        for kind in kinds:
            for d in (0.01, 0.1, 0.3):
                b = _coverage_bound(kind, law, d)
                moments = ({"mean": law.mean, "var": law.var} if kind == MV else
                           {"mean": law.mean, "lower": law.support[0], "upper": law.support[1]}
                           if kind == BD else law)
                assert psi(kind, moments, d) == pytest.approx(b, rel=1e-9, abs=1e-12)
                cov = float(np.mean(x <= b))
                sig = mc_sigma(1 - d, S_MC)
                n += 1
                if cov < 1 - d - 3 * sig:
                    fails.append(f"{kind}/{name}/{d}")
                if kind == CDF:
                    tight_worst = max(tight_worst, abs(cov - (1 - d)) / (3 * sig))
                    if abs(cov - (1 - d)) > 3 * sig:
                        fails.append(f"tight {name}/{d}")
    ok = not fails
    assert report(4, "concentration coverage", ok,
                  f"{n} cases, failures {fails or 'none'}, CDF |cov-(1-d)|/3sigma max {tight_worst:.2f}")


def test_c05_boole_composition(report):
    rng = np.random.default_rng(50)
    worst = np.inf
    for trial in range(3):
        laws = [Gaussian(rng.normal(), rng.uniform(0.5, 2)) if j % 2 else Uniform(-1.0, rng.uniform(0.5, 3))
                for j in range(20)]
        deltas = rng.dirichlet(np.ones(20)) * 0.1
        X = np.column_stack([law.sample(rng, S_MC) for law in laws])
        y = np.array([_coverage_bound(MV, law, d) for law, d in zip(laws, deltas)])
        cov = float(np.mean(np.all(X <= y, axis=1)))
        need = 1 - deltas.sum() - 3 * mc_sigma(1 - deltas.sum(), S_MC)
        worst = min(worst, cov - need)
    ok = worst >= 0
    assert report(5, "Boole composition on 20-row instances", ok, f"min coverage slack {worst:.4f}")


def test_c06_joint_chance_closed_loop(closed_loop, report):
    cfg, opt, det = closed_loop
    limit = DELTA_BAR + 3 * math.sqrt(DELTA_BAR * (1 - DELTA_BAR) / cfg.samples)
    vo, vd = opt.column("viol_joint").max(), det.column("viol_joint").max()
    ok = cfg.samples == 1024 and vo <= limit and vd > 10 * DELTA_BAR
    assert report(6, "joint chance satisfaction in closed loop", ok,
                  f"optimized max {vo:.4f} <= {limit:.4f}, deterministic max {vd:.4f} > 0.12")


def test_c07_conservatism_ordering(closed_loop, report):
    _, opt, _ = closed_loop
    obj, uni = opt.column("objective"), opt.column("uniform_objective")
    # an infeasible uniform allocation has objective +inf
    uni = np.where(np.isnan(uni), np.inf, uni)
    finite = np.isfinite(uni)
    excess = (obj - uni)[finite] / np.maximum(1.0, np.abs(uni[finite]))
    ok = np.all(obj <= uni + 1e-8 * np.abs(np.where(finite, uni, 0.0)))
    assert report(7, "optimized objective <= uniform allocation", ok,
                  f"{finite.sum()} finite comparisons, max relative excess {excess.max():.2e}, "
                  f"uniform infeasible at {np.sum(~finite)} steps")


def test_c08_stacking_oracle(report):
    rng = np.random.default_rng(80)
    worst = 0.0
    for _ in range(100):
        n, m, N = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 12))
        A = rng.normal(size=(n, n))
        A *= 0.95 / max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
        C = rng.normal(size=(n, 1))
        model = LinearModel(A, rng.normal(size=(n, m)), bias=lambda th, C=C: np.asarray(th)[..., :1] @ C.T)
        s = stack_dynamics(model, N)
        xi0, v, theta = rng.normal(size=n), rng.normal(size=N * m), rng.normal(size=(N + 1, 1))
        ref = step_by_step(A, model.B, [theta[k] @ C.T for k in range(N)], xi0, v.reshape(N, m))
        worst = max(worst, float(np.max(np.abs(s.A_hat @ xi0 + s.B_hat @ v + stack_bias(model, theta, N) - ref))))
    assert report(8, "stacking vs stepwise simulation, 100 systems", worst <= 1e-10, f"max error {worst:.2e}")


@pytest.fixture(scope="module")
def instances():
    rng = np.random.default_rng(90)
    return [random_instance(rng, n_xi=1 + i % 3, n_v=1 + i % 3, N=3 + i % 4) for i in range(10)]


def test_c09_degeneracy(instances, report):
    worst = 0.0
    for inst in instances:
        p = inst.problem(scenarios=zero_variance(inst))
        a, b = solve(p), solve_deterministic(p)
        assert a.status == b.status == OPTIMAL
        worst = max(worst, float(np.max(np.abs(a.v_hat - b.v_hat))))
    assert report(9, "zero variance equals deterministic", worst <= 1e-5, f"max |dv| {worst:.2e}")


def test_c10_partial_uniqueness(instances, report):
    rng = np.random.default_rng(100)
    worst, statuses = 0.0, []
    for inst in instances:
        p = inst.problem(risk_weight=0.0)
        plans = []
        for _ in range(10):
            d = np.full(p.index.n_rows, np.nan)
            d[p.chance_rows] = rng.dirichlet(np.ones(p.n_c)) * p.budget.delta_bar
            sol = solve(p, warm=WarmStart(rng.normal(scale=2.0, size=p.n_z), d))
            statuses.append(sol.status)
            plans.append(sol.v_hat)
        plans = np.array(plans)
        worst = max(worst, float(np.max(plans.max(axis=0) - plans.min(axis=0))))
    ok = all(s == OPTIMAL for s in statuses) and worst <= 1e-5
    assert report(10, "v_hat unique without risk regularizer", ok, f"100 solves, max spread {worst:.2e}")


def test_c11_continuity_probe(closed_loop, report):
    _, opt, _ = closed_loop
    ratios, probed, changed = [], 0, False
    for problem, sol in opt.problems[5::11]:
        if probed == 10:
            break
        if sol.status != OPTIMAL or problem.n_c == 0:
            continue
        rep = kkt_report(problem, sol, probe=1e-4)
        if not rep.licq_ok or rep.lipschitz_ratio is None:
            continue
        probed += 1
        ratios.append(rep.lipschitz_ratio)
        changed |= rep.status_changed
    ok = probed == 10 and max(ratios) <= 1e3 and not changed
    assert report(11, "local Lipschitz probe at 10 powertrain steps", ok,
                  f"probed {probed}, max ratio {max(ratios):.2f} <= 1e3, status change {changed}")


def test_c12_exlin_conjugacy(report):
    rng = np.random.default_rng(120)
    conj = rt = 0.0
    N = 10
    for _ in range(100):
        m = random_exlin(rng)
        x0 = rng.normal(size=m.n_x)
        u = rng.normal(size=(N, m.n_u))
        theta = rng.normal(size=(N + 1, 1))
        # nonlinear rollout written out step by step, independent of the library rollout
        x, xs, vs = x0.copy(), [], []
        for k in range(N):
            v = m.psi(u[k], x)
            vs.append(v)
            x = m.phi.inverse(m.core.A @ m.phi(x) + m.core.B @ v + m.core.c(theta[k]))
            xs.append(x)
        lin = step_by_step(m.core.A, m.core.B, [m.core.c(theta[k]) for k in range(N)], m.phi(x0), np.array(vs))
        conj = max(conj, float(np.max(np.abs(m.phi(np.array(xs)).ravel() - lin))))
        pts = rng.normal(scale=3.0, size=(50, m.n_x))
        rt = max(rt, float(np.max(np.abs(m.phi.inverse(m.phi(pts)) - pts))))
        for xk in pts[:5]:
            uu = rng.normal(scale=3.0, size=m.n_u)
            rt = max(rt, float(np.max(np.abs(m.psi.inverse(m.psi(uu, xk), xk) - uu))))
    rt = max(rt, abs(float(CubicMap([1.0], [1.0]).inverse(np.array([2.0]))[0]) - 1.0))
    ok = conj <= 1e-8 and rt <= 1e-9
    assert report(12, "exlin conjugacy and inversion", ok, f"conjugacy {conj:.2e} <= 1e-8, round trip {rt:.2e} <= 1e-9")


def test_c13_analytic_instance(report):
    sol = solve(scalar_chance_instance())
    err_d, err_v = abs(float(sol.delta[0]) - 0.5), abs(float(sol.v_hat[0]) - 1.0)
    ok = sol.status == OPTIMAL and err_d <= 1e-6 and err_v <= 1e-6
    assert report(13, "analytic 1-D instance", ok, f"delta* {sol.delta[0]:.9f}, v* {sol.v_hat[0]:.9f}")
