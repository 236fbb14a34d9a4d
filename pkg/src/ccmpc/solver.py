"""Joint optimisation of inputs, soft-constraint slacks and risk allocation.

Decision vector ``x = [v_hat; gamma_hat; delta]``. The problem solved is::

    minimize   0.5 z'Hz + g'z + w_delta * sum_j r(delta_j)
    subject to psi_j(delta_j) <= y_j(z)        for chance rows
               X_j <= y_j(z)                   for parameter-independent rows
               gamma_hat >= 0,  delta_j >= eps,  sum(delta) <= delta_bar

with ``z = [v_hat; gamma_hat]`` and ``y(z) = G z + F xi0``. Internally the
risk levels are replaced by the standardised tightenings ``kappa_j`` (see
:func:`_joint_program`), which keeps Newton's method well conditioned when
risk levels span several orders of magnitude. Two baselines
share the machinery: the nominal QP (constraints at the mean parameter
trajectory) and the fixed-allocation QP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ipm
from .ipm import INFEASIBLE, MAX_ITER, OPTIMAL, SmoothProgram, SolverConfig
from .stacked import (
    ConfigurationError,
    ConstraintIndexMap,
    LinearModel,
    SpecBundle,
    StackedSystem,
    Weights,
    build_objective,
    build_offset,
    index_map,
    lhs_matrix,
)
from .uncertainty import (
    CDF,
    DistributionMode,
    MomentSummary,
    RiskBudget,
    ScenarioSet,
    Tightening,
    estimate_moments,
    make_tightening,
    uniform_allocation,
)

logger = logging.getLogger(__name__)

__all__ = [
    "InverseRegularizer",
    "RiskProblem",
    "Solution",
    "SolverConfig",
    "assemble",
    "solve",
    "solve_deterministic",
    "solve_fixed_risk",
    "kkt_report",
    "warm_shift",
    "OPTIMAL",
    "INFEASIBLE",
    "MAX_ITER",
]


class InverseRegularizer:
    """``r(delta) = sum_j weight / delta_j``: strictly convex, decreasing, blows up at 0."""

    def __init__(self, weight: float):
        self.weight = float(weight)

    def value(self, d):
        return self.weight / d

    def grad(self, d):
        return -self.weight / d ** 2

    def hess(self, d):
        return 2.0 * self.weight / d ** 3


@dataclass(frozen=True)
class RiskProblem:
    """Assembled data for one receding-horizon solve."""

    stacked: StackedSystem
    index: ConstraintIndexMap
    xi0: np.ndarray
    G: np.ndarray
    F: np.ndarray
    H: np.ndarray
    g: np.ndarray
    g_nominal: np.ndarray
    g_xi0: np.ndarray
    chance_rows: np.ndarray
    tightening: Tightening
    det_rows: np.ndarray
    det_offset: np.ndarray
    nominal_offset: np.ndarray
    budget: RiskBudget
    risk_weight: float
    regularizer: object = None
    moments: MomentSummary | None = None
    X_samples: np.ndarray | None = None
    groups: dict = field(default_factory=dict)
    convexity_certified: bool = True

    @property
    def n_z(self) -> int:
        return self.G.shape[1]

    @property
    def n_v_vars(self) -> int:
        return self.stacked.N * self.stacked.n_v

    @property
    def n_c(self) -> int:
        return len(self.chance_rows)

    @property
    def e(self) -> np.ndarray:
        return self.F @ self.xi0

    def y(self, z) -> np.ndarray:
        return self.G @ z + self.e

    def quad(self, z, nominal: bool = False) -> float:
        g = self.g_nominal if nominal else self.g
        return float(0.5 * z @ self.H @ z + g @ z)

    def regularizer_value(self, delta) -> float:
        if self.regularizer is None or len(delta) == 0:
            return 0.0
        return float(np.sum(self.regularizer.value(np.asarray(delta))))

    def with_xi0(self, xi0) -> "RiskProblem":
        """Same problem for a different initial state (used by the continuity probe)."""
        xi0 = np.asarray(xi0, dtype=float)
        dg = self.g_xi0 @ (xi0 - self.xi0)
        return replace(self, xi0=xi0, g=self.g + dg, g_nominal=self.g_nominal + dg)


@dataclass
class Solution:
    v_hat: np.ndarray
    gamma_hat: np.ndarray
    delta: np.ndarray
    mu: np.ndarray
    lam: float
    objective: float
    quad_objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    phase1_iterations: int = 0
    hessian_pd: bool = True
    excess: float = 0.0
    y: np.ndarray | None = None
    chance_rows: np.ndarray | None = None
    n_xi: int = 0
    lam_all: np.ndarray | None = None

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.v_hat, self.gamma_hat])

    def delta_full(self, n_rows: int) -> np.ndarray:
        out = np.full(n_rows, np.nan)
        if self.chance_rows is not None and len(self.delta):
            out[self.chance_rows] = self.delta
        return out

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "objective": self.objective,
            "quad_objective": self.quad_objective,
            "kkt_residual": self.kkt_residual,
            "lambda": self.lam,
            "delta_sum": float(np.sum(self.delta)),
            "iterations": self.iterations,
            "phase1_iterations": self.phase1_iterations,
            "v_hat": self.v_hat.tolist(),
            "gamma_hat": self.gamma_hat.tolist(),
            "delta": self.delta.tolist(),
        }


def assemble(stacked: StackedSystem, spec: SpecBundle, model: LinearModel, scenarios: ScenarioSet,
             mode: DistributionMode, weights: Weights, xi0, budget: RiskBudget,
             groups: dict | None = None, regularizer=None) -> RiskProblem:
    """Build the joint problem from sampled parameter trajectories.

    Chance rows are the unpruned rows that depend on the parameter; the others
    become hard linear rows at their constant value. In exact-quantile mode a
    chance row with zero spread is also treated as hard.
    """
    xi0 = np.asarray(xi0, dtype=float)
    samples = scenarios.samples
    idx = index_map(stacked)
    X = build_offset(spec, model, samples, idx)
    idx = idx.with_pruned(X)
    dep = idx.theta_dependent(spec, model)
    moments = estimate_moments(X, dep)
    active = idx.active
    chance = active & dep
    if mode.kind == CDF:
        chance &= moments.var > 0
    chance_rows = np.flatnonzero(chance)
    det_rows = np.flatnonzero(active & ~chance)
    tight = make_tightening(mode, moments, chance_rows)
    if len(chance_rows):
        budget.check(len(chance_rows))

    obj = build_objective(stacked, spec, model, samples, weights, xi0)
    mean_traj = scenarios.mean_trajectory()
    obj_nom = build_objective(stacked, spec, model, mean_traj, weights, xi0)
    nominal_offset = build_offset(spec, model, mean_traj, idx)
    G, F = lhs_matrix(stacked)
    N, n, m = stacked.N, stacked.n_xi, stacked.n_v
    W = np.diag(np.tile(np.broadcast_to(weights.tracking, (n,)), N))
    g_xi0 = np.vstack([2.0 * stacked.B_hat.T @ W @ stacked.A_hat, np.zeros((N * n, n))])

    certified = True
    if len(chance_rows):
        certified = bool(budget.delta_bar <= np.min(tight.delta_conv()))
        if not certified:
            logger.warning("total risk %.4g exceeds the convexity threshold; no convexity certificate",
                           budget.delta_bar)
    if regularizer is None and weights.risk > 0:
        regularizer = InverseRegularizer(weights.risk)
    if groups:
        groups = {k: np.intersect1d(np.asarray(v, dtype=int), np.flatnonzero(active)) for k, v in groups.items()}
    return RiskProblem(
        stacked=stacked, index=idx, xi0=xi0, G=G, F=F, H=obj.H, g=obj.g, g_nominal=obj_nom.g,
        g_xi0=g_xi0, chance_rows=chance_rows, tightening=tight, det_rows=det_rows,
        det_offset=moments.mean[det_rows], nominal_offset=nominal_offset, budget=budget,
        risk_weight=weights.risk, regularizer=regularizer, moments=moments, X_samples=X,
        groups=groups or {}, convexity_certified=certified,
    )


# ----------------------------------------------------------------------
# Program construction
# ----------------------------------------------------------------------


def _linear_rows(problem: RiskProblem, rows, offset, n_extra):
    """Rows ``offset_j - y_j(z) <= 0`` as ``C x - b``."""
    C = np.zeros((len(rows), problem.n_z + n_extra))
    C[:, :problem.n_z] = -problem.G[rows]
    b = problem.e[rows] - offset
    return C, b


def _gamma_rows(problem: RiskProblem, n_extra):
    nv, nz = problem.n_v_vars, problem.n_z
    C = np.zeros((nz - nv, nz + n_extra))
    C[:, nv:nz] = -np.eye(nz - nv)
    return C, np.zeros(nz - nv)


def _qp_program(problem: RiskProblem, rows, offset, nominal=False):
    Cs, bs = _linear_rows(problem, rows, offset, 0)
    Cg, bg = _gamma_rows(problem, 0)
    C = np.vstack([Cs, Cg])
    b = np.concatenate([bs, bg])
    g = problem.g_nominal if nominal else problem.g
    prog = SmoothProgram(problem.H.copy(), g.copy(), C, b)
    return prog, np.ones(len(b), dtype=bool), len(rows)


class _BudgetTerms:
    """Risk levels ``delta_j(kappa_j)`` summed into the budget row."""

    def __init__(self, tightening: Tightening):
        self.tightening = tightening

    def value(self, kappa):
        return self.tightening.risk(kappa)[0]

    def derivatives(self, kappa):
        _, d1, d2 = self.tightening.risk(kappa)
        return d1, d2


class _KappaRegularizer:
    """A risk regulariser composed with ``delta(kappa)``."""

    def __init__(self, reg, tightening: Tightening):
        self.reg, self.tightening = reg, tightening

    def value(self, kappa):
        return self.reg.value(self.tightening.risk(kappa)[0])

    def grad(self, kappa):
        d, d1, _ = self.tightening.risk(kappa)
        return self.reg.grad(d) * d1

    def hess(self, kappa):
        d, d1, d2 = self.tightening.risk(kappa)
        return self.reg.hess(d) * d1 * d1 + self.reg.grad(d) * d2


def _joint_program(problem: RiskProblem):
    """Joint program in ``x = [z; kappa]`` with ``kappa_j`` the standardised tightening.

    ``psi_j(delta_j) = offset_j + slope_j * kappa_j`` makes every chance row
    linear; the budget becomes ``sum_j delta_j(kappa_j) <= delta_bar`` with
    each ``delta_j`` convex and decreasing on ``kappa_j >= kappa_conv_j``.
    Row order: chance, parameter-independent, slack sign, risk floor,
    convexity domain, budget.
    """
    nz, nc = problem.n_z, problem.n_c
    n = nz + nc
    tight = problem.tightening
    eps = problem.budget.epsilon_floor
    Cc, bc = _linear_rows(problem, problem.chance_rows, tight.offset, nc)
    Cc[:, nz:] = np.diag(tight.slope)
    Cd, bd = _linear_rows(problem, problem.det_rows, problem.det_offset, nc)
    Cg, bg = _gamma_rows(problem, nc)
    Cf = np.zeros((nc, n))
    Cf[:, nz:] = np.eye(nc)
    bf = tight.kappa(np.full(nc, eps))
    Cv = np.zeros((nc, n))
    Cv[:, nz:] = -np.eye(nc)
    bv = -tight.kappa(tight.delta_conv())
    Cb = np.zeros((1, n))
    bb = np.array([problem.budget.delta_bar])
    C = np.vstack([Cc, Cd, Cg, Cf, Cv, Cb])
    b = np.concatenate([bc, bd, bg, bf, bv, bb])
    P = np.zeros((n, n))
    P[:nz, :nz] = problem.H
    q = np.concatenate([problem.g, np.zeros(nc)])
    kappa_idx = np.arange(nz, n)
    if problem.regularizer is not None:
        reg_idx, reg = kappa_idx, _KappaRegularizer(problem.regularizer, tight)
    else:
        reg_idx, reg = np.zeros(0, dtype=int), None
    prog = SmoothProgram(P, q, C, b, nl_rows=np.full(nc, len(b) - 1), nl_var=kappa_idx,
                         nl=_BudgetTerms(tight), reg_idx=reg_idx, reg=reg)
    n_rows = nc + len(problem.det_rows) + (nz - problem.n_v_vars)
    relax = np.zeros(len(b), dtype=bool)
    relax[:n_rows] = True
    return prog, relax


def _interior_delta(problem: RiskProblem, delta=None) -> np.ndarray:
    """A risk allocation strictly inside the floor, the budget and the convexity domain."""
    nc = problem.n_c
    eps, dbar = problem.budget.epsilon_floor, problem.budget.delta_bar
    if nc == 0:
        return np.zeros(0)
    cap = 0.99 * problem.tightening.delta_conv()
    if delta is None or len(delta) != nc or not np.all(np.isfinite(delta)):
        d = np.full(nc, dbar / (nc + 1))
    else:
        d = np.maximum(np.asarray(delta, dtype=float), 2.0 * eps)
        total = d.sum()
        if total >= 0.99 * dbar:
            d = d * (0.99 * dbar / total)
    return np.clip(d, 1.01 * eps, cap)


def _unpack(problem: RiskProblem, res: ipm.IPMResult, rows, n_lin, delta, joint: bool) -> Solution:
    nz, nv = problem.n_z, problem.n_v_vars
    z = res.x[:nz]
    mu = np.zeros(problem.index.n_rows)
    lam_budget = 0.0
    if joint:
        nc = problem.n_c
        nd = len(problem.det_rows)
        mu[problem.chance_rows] = res.lam[:nc]
        mu[problem.det_rows] = res.lam[nc:nc + nd]
        lam_budget = float(res.lam[-1]) if nc else 0.0
        delta = problem.tightening.risk(res.x[nz:])[0]
    else:
        mu[rows] = res.lam[:n_lin]
    quad = problem.quad(z, nominal=not joint and delta is None)
    reg = problem.regularizer_value(delta) if delta is not None else 0.0
    return Solution(
        v_hat=z[:nv].copy(), gamma_hat=z[nv:].copy(),
        delta=np.zeros(0) if delta is None else np.asarray(delta, dtype=float).copy(),
        mu=mu, lam=lam_budget, objective=quad + reg, quad_objective=quad,
        kkt_residual=res.kkt_residual, status=res.status, iterations=res.iterations,
        phase1_iterations=res.phase1_iterations, hessian_pd=res.hessian_pd, excess=res.excess,
        y=problem.y(z), chance_rows=problem.chance_rows, n_xi=problem.stacked.n_xi,
        lam_all=res.lam.copy(),
    )


def _z_start(problem: RiskProblem, warm) -> np.ndarray:
    if warm is None:
        return np.zeros(problem.n_z)
    z = np.asarray(warm.z if isinstance(warm, (Solution, WarmStart)) else warm, dtype=float)
    if z.shape != (problem.n_z,):
        return np.zeros(problem.n_z)
    return z.copy()


def solve(problem: RiskProblem, config: SolverConfig = SolverConfig(), warm=None) -> Solution:
    """Solve the joint input/slack/risk problem.

    ``warm`` may be a previous :class:`Solution`, a :class:`WarmStart` or a raw
    ``z`` vector; the risk part is projected to the interior of the budget.
    """
    if problem.n_c == 0:
        prog, relax, nl = _qp_program(problem, problem.det_rows, problem.det_offset)
        res = ipm.solve_program(prog, _z_start(problem, warm), relax, config)
        sol = _unpack(problem, res, problem.det_rows, nl, np.zeros(0), joint=False)
        sol.quad_objective = problem.quad(sol.z)
        sol.objective = sol.quad_objective
        return sol
    prog, relax = _joint_program(problem)
    d0 = None
    if isinstance(warm, WarmStart) and warm.delta_full is not None:
        d0 = warm.delta_full[problem.chance_rows]
        if np.any(np.isnan(d0)):
            fill = np.nanmean(d0) if np.any(np.isfinite(d0)) else problem.budget.delta_bar / problem.n_c
            d0 = np.where(np.isnan(d0), fill, d0)
    elif isinstance(warm, Solution) and len(warm.delta) == problem.n_c:
        d0 = warm.delta
    kappa0 = problem.tightening.kappa(_interior_delta(problem, d0))
    x0 = np.concatenate([_z_start(problem, warm), kappa0])
    res = ipm.solve_program(prog, x0, relax, config)
    return _unpack(problem, res, None, 0, None, joint=True)


def solve_deterministic(problem: RiskProblem, config: SolverConfig = SolverConfig(), warm=None) -> Solution:
    """Nominal QP: every active row enforced at the mean parameter trajectory."""
    rows = np.flatnonzero(problem.index.active)
    prog, relax, nl = _qp_program(problem, rows, problem.nominal_offset[rows], nominal=True)
    res = ipm.solve_program(prog, _z_start(problem, warm), relax, config)
    return _unpack(problem, res, rows, nl, None, joint=False)


def solve_fixed_risk(problem: RiskProblem, delta_fixed=None, config: SolverConfig = SolverConfig(),
                     warm=None) -> Solution:
    """QP with the chance rows tightened at a fixed allocation.

    Without ``delta_fixed`` the budget is split uniformly.
    """
    if delta_fixed is None:
        delta_fixed = uniform_allocation(problem.budget, problem.n_c) if problem.n_c else np.zeros(0)
    delta_fixed = np.asarray(delta_fixed, dtype=float)
    if len(delta_fixed) != problem.n_c:
        raise ConfigurationError(f"expected {problem.n_c} risk levels, got {len(delta_fixed)}")
    if problem.n_c and (np.any(delta_fixed <= 0) or np.any(delta_fixed >= 1)):
        raise ConfigurationError("fixed risk levels must lie in (0, 1)")
    if delta_fixed.sum() > problem.budget.delta_bar * (1 + 1e-12):
        raise ConfigurationError("fixed allocation exceeds the total allowable risk")
    rows = np.concatenate([problem.chance_rows, problem.det_rows])
    offs = np.concatenate([problem.tightening.value(delta_fixed) if problem.n_c else np.zeros(0),
                           problem.det_offset])
    order = np.argsort(rows)
    rows, offs = rows[order], offs[order]
    prog, relax, nl = _qp_program(problem, rows, offs)
    res = ipm.solve_program(prog, _z_start(problem, warm), relax, config)
    sol = _unpack(problem, res, rows, nl, delta_fixed, joint=False)
    return sol


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------


@dataclass
class KKTReport:
    stationarity: float
    complementarity: float
    lam: float
    budget_gap: float
    min_slack: float
    licq_condition: float
    licq_ok: bool
    lipschitz_ratio: float | None
    status_changed: bool
    convexity_certified: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def kkt_report(problem: RiskProblem, sol: Solution, config: SolverConfig = SolverConfig(),
               probe: float = 1e-4, seed: int = 0) -> KKTReport:
    """Stationarity, complementarity, budget tightness and a continuity probe.

    The probe re-solves with ``xi0`` moved by ``+/- probe`` along a random unit
    direction and reports ``max ||d solution|| / ||d xi0||``. It is skipped when
    the active constraint gradients are numerically dependent (Gram condition
    above 1e12).
    """
    if problem.n_c == 0:
        raise ConfigurationError("kkt_report needs at least one chance row")
    prog, _ = _joint_program(problem)
    x = np.concatenate([sol.z, problem.tightening.kappa(sol.delta)])
    h = prog.constraints(x)
    D, _ = prog.jacobian(x)
    lam = sol.lam_all
    grad = prog.gradient(x)
    stat = float(np.max(np.abs(grad + D.T @ lam)))
    comp = float(np.max(np.abs(lam * h)))
    active = lam > np.maximum(-h, 1e-12)
    Da = D[active]
    if Da.shape[0] == 0:
        cond = 1.0
    elif Da.shape[0] > Da.shape[1]:
        cond = np.inf
    else:
        # row-normalised, so the test measures dependence rather than scaling
        Da = Da / np.linalg.norm(Da, axis=1, keepdims=True)
        sv = np.linalg.svd(Da @ Da.T, compute_uv=False)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    licq = cond <= 1e12
    ratio = None
    changed = False
    if licq and probe > 0:
        rng = np.random.default_rng(seed)
        d = rng.normal(size=problem.xi0.shape)
        d /= np.linalg.norm(d)
        base = np.concatenate([sol.z, sol.delta])
        ratios = []
        for sgn in (1.0, -1.0):
            p2 = problem.with_xi0(problem.xi0 + sgn * probe * d)
            s2 = solve(p2, config, warm=sol)
            changed |= s2.status != sol.status
            ratios.append(np.linalg.norm(np.concatenate([s2.z, s2.delta]) - base) / probe)
        ratio = float(max(ratios))
    return KKTReport(
        stationarity=stat, complementarity=comp, lam=float(sol.lam),
        budget_gap=float(abs(np.sum(sol.delta) - problem.budget.delta_bar)),
        min_slack=float(-np.max(h)), licq_condition=cond, licq_ok=licq,
        lipschitz_ratio=ratio, status_changed=changed,
        convexity_certified=problem.convexity_certified,
    )


@dataclass
class WarmStart:
    z: np.ndarray
    delta_full: np.ndarray | None = None


def warm_shift(previous: Solution, index: ConstraintIndexMap, delta_bar: float | None = None) -> WarmStart:
    """Shift a plan one step forward, repeating the last block.

    Risk levels are shifted row by row within each block and rescaled so they
    sum to ``delta_bar`` again.
    """
    N, n, m = index.N, index.n_xi, index.n_v

    def shift(vec, width):
        blocks = vec.reshape(N, width)
        return np.vstack([blocks[1:], blocks[-1:]]).ravel()

    v = shift(previous.v_hat, m)
    g = shift(previous.gamma_hat, n)
    dfull = None
    if previous.chance_rows is not None and len(previous.delta):
        old = previous.delta_full(index.n_rows)
        dfull = np.full(index.n_rows, np.nan)
        for b in ("state_lo", "state_hi", "input_lo", "input_hi", "soft"):
            sl = index.block_slice(b)
            width = m if b.startswith("input") else n
            dfull[sl] = shift(old[sl], width)
        if delta_bar is None:
            delta_bar = float(np.nansum(old))
        total = np.nansum(dfull)
        if total > 0:
            dfull *= delta_bar / total
    return WarmStart(np.concatenate([v, g]), dfull)
