"""Invariant suites run by ``ccmpc validate``.

Each check returns a :class:`Check`; a suite passes when all of its checks do.
The suites are deterministic (fixed seeds) so a failure is reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import solver
from .exlin import CubicMap, ExlinModel, InputMap, rollout_nonlinear, sigmoid_scale
from .instances import random_instance, scalar_chance_instance, zero_variance
from .solver import OPTIMAL, WarmStart
from .stacked import LinearModel, simulate
from .uncertainty import (
    BD,
    CDF,
    MV,
    Gaussian,
    Tightening,
    TruncatedLognormal,
    Uniform,
    delta_conv,
    empirical_violation,
    mc_margin,
    verify_boole,
    verify_inequality_oracles,
)

SUITES = ("inequalities", "convexity", "solver", "exlin")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


# ----------------------------------------------------------------------
# Concentration inequalities
# ----------------------------------------------------------------------

COVERAGE_DELTAS = (0.01, 0.1, 0.3)


def coverage_laws() -> dict:
    return {
        "gaussian": Gaussian(1.0, 2.0),
        "uniform": Uniform(0.0, 1.0),
        "truncated_lognormal": TruncatedLognormal(0.0, 0.5, 4.0),
    }


def check_inequalities(n_samples: int = 100_000, seed: int = 0) -> list[Check]:
    out = []
    rng = np.random.default_rng(seed)
    for name, law in coverage_laws().items():
        kinds = [MV, CDF] + ([BD] if np.all(np.isfinite(law.support)) else [])
        for kind in kinds:
            for rec in verify_inequality_oracles(kind, law, COVERAGE_DELTAS, n_samples, rng):
                # worst-case slack: coverage minus the required level
                need = 1.0 - rec.delta - rec.margin
                detail = f"coverage={rec.coverage:.5f}"
                if kind == CDF:
                    detail += f" |cov-(1-d)|={abs(rec.coverage - 1 + rec.delta):.2e} <= {rec.margin:.2e}"
                out.append(Check("inequalities", f"{kind}/{name}/delta={rec.delta:g}", rec.passed,
                                 rec.coverage, need, detail))
    laws = [Gaussian(0.1 * j, 1.0 + 0.05 * j) for j in range(10)] + [Uniform(-1.0, 1.0 + j) for j in range(10)]
    deltas = np.full(20, 0.1 / 20)
    for kind in (MV, CDF):
        rec = verify_boole(laws, deltas, kind, n_samples, rng)
        out.append(Check("inequalities", f"boole/{kind}/20 rows", rec.passed, rec.coverage,
                         1.0 - rec.delta - rec.margin))
    out.append(_check_boole_dependent(n_samples, rng))
    # a plan at a known quantile is violated with the nominal frequency
    x = rng.standard_normal((n_samples, 1))
    p = empirical_violation(np.array([Gaussian().isf(0.1)]), x)["joint"]
    m = mc_margin(0.1, n_samples)
    out.append(Check("inequalities", "empirical violation at 0.9 quantile", abs(p - 0.1) <= m,
                     abs(p - 0.1), m))
    return out


def _check_boole_dependent(n_samples, rng) -> Check:
    """Union bound with strongly correlated rows (common shock)."""
    n = 20
    shock = rng.standard_normal((n_samples, 1))
    X = 0.8 * shock + 0.6 * rng.standard_normal((n_samples, n))
    deltas = np.full(n, 0.005)
    tight = Tightening(MV, np.zeros(n), np.ones(n))
    y = tight.value(deltas)
    cov = float(np.mean(np.all(X <= y, axis=1)))
    need = 1.0 - deltas.sum() - mc_margin(1.0 - deltas.sum(), n_samples)
    return Check("inequalities", "boole/mv/20 correlated rows", cov >= need, cov, need)


# ----------------------------------------------------------------------
# Convexity of the tightening
# ----------------------------------------------------------------------


def psi_grid(kind: str, n: int = 1000, lo: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """``psi`` for unit moments on an evenly spaced grid over ``(lo, delta_conv]``."""
    if kind == CDF:
        tight = Tightening(CDF, np.zeros(1), np.zeros(1), (Gaussian(),))
        hi = delta_conv(CDF, Gaussian())
    elif kind == BD:
        tight = Tightening(BD, np.zeros(1), np.full(1, math.sqrt(2.0)))
        hi = delta_conv(BD)
    else:
        tight = Tightening(MV, np.zeros(1), np.ones(1))
        hi = delta_conv(MV)
    grid = np.linspace(lo, hi, n)
    vals = np.array([float(np.ravel(tight.value(d))[0]) for d in grid])
    return grid, vals


def second_difference_margin(vals: np.ndarray) -> float:
    """``min_i (psi_{i-1} - 2 psi_i + psi_{i+1}) + 1e-8 (1 + |psi_i|)``; convex grids give >= 0."""
    d2 = vals[:-2] - 2.0 * vals[1:-1] + vals[2:]
    return float(np.min(d2 + 1e-8 * (1.0 + np.abs(vals[1:-1]))))


def check_convexity() -> list[Check]:
    out = []
    for kind in (MV, BD, CDF):
        grid, vals = psi_grid(kind)
        margin = second_difference_margin(vals)
        out.append(Check("convexity", f"{kind}: second differences on (1e-6, {grid[-1]:.5f}]",
                         margin >= 0.0, margin, 0.0))
        steps = np.diff(vals)
        strict = kind != CDF
        mono = bool(np.all(steps < 0) if strict else np.all(steps <= 0))
        out.append(Check("convexity", f"{kind}: decreasing in delta", mono, float(np.max(steps)), 0.0))
        # same test on a log grid, where the small-delta end is resolved
        lg = np.geomspace(1e-9, grid[-1], 1000)
        lv = _psi_values(kind, lg)
        slopes = np.diff(lv) / np.diff(lg)
        ok = bool(np.all(np.diff(slopes) >= -1e-8 * (1.0 + np.abs(slopes[1:]))))
        out.append(Check("convexity", f"{kind}: slopes nondecreasing on a log grid", ok,
                         float(np.min(np.diff(slopes))), 0.0))
    return out


def _psi_values(kind, deltas):
    if kind == CDF:
        return np.array([float(Gaussian().isf(d)) for d in deltas])
    if kind == BD:
        return Tightening(BD, np.zeros(1), np.full(1, math.sqrt(2.0))).value(deltas)
    return Tightening(MV, np.zeros(1), np.ones(1)).value(deltas)


# ----------------------------------------------------------------------
# Solver invariants
# ----------------------------------------------------------------------


def check_solver(n_instances: int = 10, seed: int = 0) -> list[Check]:
    out = []
    p = scalar_chance_instance()
    s = solver.solve(p)
    err = max(abs(float(s.delta[0]) - 0.5), abs(float(s.v_hat[0]) - 1.0))
    out.append(Check("solver", "analytic 1-D instance (delta=0.5, v=1)", s.status == OPTIMAL and err <= 1e-6,
                     err, 1e-6))

    gaps, lams, stat, spreads, degen, fixed, uni, mono = [], [], [], [], [], [], [], []
    statuses = []
    rng = np.random.default_rng(seed)
    for i in range(n_instances):
        n_xi = 1 + i % 3
        inst = random_instance(rng, n_xi=n_xi, n_v=n_xi, N=3 + i % 4)
        prob = inst.problem()
        sol = solver.solve(prob)
        statuses.append(sol.status)
        gaps.append(abs(sol.delta.sum() - prob.budget.delta_bar))
        lams.append(sol.lam)
        stat.append(solver.kkt_report(prob, sol, probe=0.0).stationarity)
        fx = solver.solve_fixed_risk(prob, sol.delta)
        fixed.append(abs(fx.quad_objective - sol.quad_objective) / max(1.0, abs(sol.quad_objective)))
        un = solver.solve_fixed_risk(prob)
        # an infeasible uniform allocation has objective +inf
        if un.status == OPTIMAL:
            uni.append((sol.objective - un.objective) / max(1.0, abs(un.objective)))

        p0 = inst.problem(risk_weight=0.0)
        vs = []
        for _ in range(10):
            z0 = rng.normal(size=p0.n_z)
            d0 = np.full(p0.index.n_rows, np.nan)
            d0[p0.chance_rows] = rng.dirichlet(np.ones(p0.n_c)) * p0.budget.delta_bar
            vs.append(solver.solve(p0, warm=WarmStart(z0, d0)).v_hat)
        vs = np.array(vs)
        spreads.append(float(np.max(vs.max(axis=0) - vs.min(axis=0))))

        zv = zero_variance(inst)
        pz = inst.problem(scenarios=zv)
        degen.append(float(np.max(np.abs(solver.solve(pz).v_hat - solver.solve_deterministic(pz).v_hat))))

        objs = [solver.solve(inst.problem(delta_bar=db, risk_weight=0.0)).quad_objective
                for db in (0.02, 0.05, 0.1, 0.2)]
        mono.append(float(np.max(np.diff(objs)) / max(1.0, abs(objs[0]))))

    n_opt = sum(st == OPTIMAL for st in statuses)
    out += [
        Check("solver", "all random instances optimal", n_opt == n_instances, n_opt, n_instances),
        Check("solver", "budget tightness |1'delta - delta_bar|", max(gaps) <= 1e-6, max(gaps), 1e-6),
        Check("solver", "budget multiplier lambda > 0", min(lams) > 0, min(lams), 0.0),
        Check("solver", "stationarity residual", max(stat) <= 1e-5, max(stat), 1e-5),
        Check("solver", "fixed at optimal allocation reproduces objective", max(fixed) <= 1e-6,
              max(fixed), 1e-6),
        Check("solver", "joint objective <= uniform objective", max(uni, default=0.0) <= 1e-8,
              max(uni, default=0.0), 1e-8),
        Check("solver", "partial uniqueness (w_delta=0, 10 starts)", max(spreads) <= 1e-5,
              max(spreads), 1e-5),
        Check("solver", "degeneracy equivalence (zero variance)", max(degen) <= 1e-5, max(degen), 1e-5),
        Check("solver", "objective nonincreasing in delta_bar", max(mono) <= 1e-8, max(mono), 1e-8),
    ]
    return out


# ----------------------------------------------------------------------
# Exact linearization
# ----------------------------------------------------------------------


def random_exlin(rng: np.random.Generator, n_x: int = 3, n_u: int = 2) -> ExlinModel:
    phi = CubicMap(rng.uniform(0.5, 2.0, n_x), rng.uniform(0.0, 0.5, n_x))
    scale = sigmoid_scale(rng.normal(size=(n_u, n_x)), rng.normal(size=n_u), rng.uniform(0.0, 1.0, n_u))
    psi = InputMap(CubicMap(np.ones(n_u), rng.uniform(0.0, 0.3, n_u)), scale)
    A = rng.normal(size=(n_x, n_x))
    A *= 0.9 / max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
    B = 0.5 * rng.normal(size=(n_x, n_u))
    cb = 0.1 * rng.normal(size=n_x)
    core = LinearModel(A, B, bias=lambda th: np.asarray(th)[..., :1] * cb)
    return ExlinModel(phi, psi, core)


def conjugacy_error(model: ExlinModel, x0, u, theta) -> float:
    """``max_k |Phi(x_k) - xi_k|`` between the nonlinear and the linear rollout."""
    n = model.n_x
    xs = rollout_nonlinear(model, x0, u, theta).reshape(-1, n)
    prev = np.vstack([x0, xs[:-1]])
    v = np.concatenate([model.psi.forward(uk, xk) for uk, xk in zip(u.reshape(-1, model.n_u), prev)])
    xi = simulate(model.core, model.phi.forward(x0), v, theta).reshape(-1, n)
    return float(np.max(np.abs(model.phi.forward(xs) - xi)))


def check_exlin(n_instances: int = 100, N: int = 10, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    conj, rt_phi, rt_psi, origin = 0.0, 0.0, 0.0, 0.0
    box_ok = True
    for _ in range(n_instances):
        m = random_exlin(rng)
        x0 = rng.normal(size=m.n_x)
        u = rng.normal(size=N * m.n_u)
        theta = rng.normal(size=(N + 1, 1))
        conj = max(conj, conjugacy_error(m, x0, u, theta))
        x = rng.normal(scale=3.0, size=(100, m.n_x))
        rt_phi = max(rt_phi, float(np.max(np.abs(m.phi.inverse(m.phi.forward(x)) - x))))
        uu = rng.normal(scale=3.0, size=m.n_u)
        for xk in x[:10]:
            rt_psi = max(rt_psi, float(np.max(np.abs(m.psi.inverse(m.psi.forward(uu, xk), xk) - uu))))
            origin = max(origin, float(np.max(np.abs(m.psi.forward(np.zeros(m.n_u), xk)))))
        origin = max(origin, float(np.max(np.abs(m.phi.forward(np.zeros(m.n_x))))))
        lo, hi = np.sort(rng.normal(size=(2, m.n_x)), axis=0)
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        mapped = np.all((m.phi.forward(x) >= m.phi.forward(lo)) & (m.phi.forward(x) <= m.phi.forward(hi)), axis=1)
        box_ok &= bool(np.array_equal(inside, mapped))
    cubic = CubicMap(1.0, 1.0)
    err = max(abs(float(cubic.forward(1.0)) - 2.0), abs(float(cubic.inverse(2.0)) - 1.0))
    return [
        Check("exlin", f"conjugacy over N={N} ({n_instances} models)", conj <= 1e-8, conj, 1e-8),
        Check("exlin", "Phi round trip", rt_phi <= 1e-9, rt_phi, 1e-9),
        Check("exlin", "Psi round trip", rt_psi <= 1e-9, rt_psi, 1e-9),
        Check("exlin", "origin preserved", origin == 0.0, origin, 0.0),
        Check("exlin", "box membership equivalent in both coordinates", box_ok, float(box_ok), 1.0),
        Check("exlin", "x + x^3: forward(1) = 2, inverse(2) = 1", err <= 1e-9, err, 1e-9),
    ]


RUNNERS = {
    "inequalities": check_inequalities,
    "convexity": check_convexity,
    "solver": check_solver,
    "exlin": check_exlin,
}


def run_suites(names) -> list[Check]:
    out = []
    for name in names:
        out.extend(RUNNERS[name]())
    return out
