"""Dense primal-dual interior-point method for small smooth convex programs.

Problems have the form::

    minimize    0.5 x'Px + q'x + sum_k rho(x[reg_idx[k]])
    subject to  h(x) = C x - b + sum_k phi(x[nl_var[k]]) e_{nl_rows[k]}  <= 0

where ``rho`` and ``phi`` are univariate, vectorised and twice differentiable
(a row may collect several nonlinear terms, each in its own variable). This
covers quadratic programs and the joint input/risk-allocation problem, where
the budget row sums the risk levels and ``rho`` is the risk regulariser.

The iteration keeps the primal iterate strictly feasible; a phase-1 problem
(minimise the largest constraint excess) supplies a strictly feasible start
or an infeasibility certificate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max_iter"
TAU = 0.995  # fraction-to-boundary
KAPPA_EPS = 10.0  # subproblem tolerance factor
KAPPA_SIGMA = 1e10  # multiplier safeguard
SOC_ROUNDS = 4  # second-order correction rounds


@dataclass(frozen=True)
class SolverConfig:
    tol_kkt: float = 1e-8
    tol_gap: float = 1e-9
    mu0: float = 1.0
    mu_shrink: float = 0.1
    max_newton: int = 500
    epsilon_floor: float = 1e-9
    alpha: float = 0.3
    beta: float = 0.8
    polish: bool = True
    trace: bool = False

    def __post_init__(self):
        if not 0.0 < self.mu_shrink < 1.0:
            raise ValueError("mu_shrink must lie in (0, 1)")
        if not self.tol_kkt > 0.0:
            raise ValueError("tol_kkt must be positive")


@dataclass
class SmoothProgram:
    P: np.ndarray
    q: np.ndarray
    C: np.ndarray
    b: np.ndarray
    nl_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    nl_var: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    nl: object = None  # value(x) and derivatives(x) -> (d1, d2)
    reg_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    reg: object = None  # value(x), grad(x), hess(x)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def objective(self, x) -> float:
        f = 0.5 * x @ self.P @ x + self.q @ x
        if self.reg is not None and len(self.reg_idx):
            f += float(np.sum(self.reg.value(x[self.reg_idx])))
        return float(f)

    def gradient(self, x) -> np.ndarray:
        g = self.P @ x + self.q
        if self.reg is not None and len(self.reg_idx):
            np.add.at(g, self.reg_idx, self.reg.grad(x[self.reg_idx]))
        return g

    def hessian(self, x) -> np.ndarray:
        H = self.P.copy()
        if self.reg is not None and len(self.reg_idx):
            H[self.reg_idx, self.reg_idx] += self.reg.hess(x[self.reg_idx])
        return H

    def constraints(self, x) -> np.ndarray:
        h = self.C @ x - self.b
        if len(self.nl_rows):
            with np.errstate(invalid="ignore", divide="ignore"):
                np.add.at(h, self.nl_rows, self.nl.value(x[self.nl_var]))
        return h

    def jacobian(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Constraint Jacobian and the second derivatives of the nonlinear terms."""
        D = self.C.copy()
        d2 = np.zeros(0)
        if len(self.nl_rows):
            d1, d2 = self.nl.derivatives(x[self.nl_var])
            D[self.nl_rows, self.nl_var] += d1
        return D, d2


@dataclass
class IPMResult:
    x: np.ndarray
    lam: np.ndarray
    h: np.ndarray
    status: str
    iterations: int
    dual_residual: float  # relative to max(1, |grad f|)
    gap: float  # relative to max(1, |f|)
    objective: float
    hessian_pd: bool = True
    phase1_iterations: int = 0
    excess: float = 0.0
    trace: list = field(default_factory=list)

    @property
    def kkt_residual(self) -> float:
        return max(self.dual_residual, self.gap)


def _feasible(h) -> bool:
    return bool(np.all(np.isfinite(h)) and np.all(h < 0.0))


def _newton_matrix(prog, x, lam, h, D, d2, mu):
    H = prog.hessian(x)
    if len(prog.nl_rows):
        # a lagging multiplier would understate the curvature of a nonlinear
        # row; use at least its central-path value
        rows = prog.nl_rows
        np.add.at(H, (prog.nl_var, prog.nl_var), np.maximum(lam[rows], mu / -h[rows]) * d2)
    w = lam / -h
    H += D.T @ (w[:, None] * D)
    return 0.5 * (H + H.T)


def _factor_pd(H):
    """Return ``(solve, pd)`` for ``H`` after symmetric diagonal scaling.

    Risk variables near the floor give Newton matrices whose diagonal spans
    many orders of magnitude; equilibrating first keeps the factorisation
    accurate. ``solve`` accepts a vector or a matrix right-hand side.
    """
    d = np.sqrt(np.maximum(np.abs(np.diag(H)), 1e-300))
    Hs = H / d[:, None] / d[None, :]

    def wrap(inner):
        def solve(rhs):
            dd = d if np.ndim(rhs) == 1 else d[:, None]
            return inner(rhs / dd) / dd
        return solve

    for shift, pd in ((0.0, True), (1e-12, False)):
        try:
            c = linalg.cho_factor(Hs + shift * np.eye(H.shape[0]), check_finite=False)
            return wrap(lambda r, c=c: linalg.cho_solve(c, r, check_finite=False)), pd
        except linalg.LinAlgError:
            pass
    return wrap(lambda r: np.linalg.lstsq(Hs, r, rcond=None)[0]), False


def _solve_pd(H, rhs):
    solve, pd = _factor_pd(H)
    return solve(rhs), pd


def _second_order_step(prog, x, dx, h, D, solve, rows, tau):
    """Correct ``dx`` so the nonlinear rows match their linear prediction.

    Returns the corrected step, or ``None`` when no acceptable correction is
    found within a few rounds.
    """
    target = (h + D @ dx)[rows]
    DR = D[rows]
    Y = solve(DR.T)
    S = DR @ Y
    step = dx.copy()
    for _ in range(SOC_ROUNDS):
        h_new = prog.constraints(x + step)
        if np.all(np.isfinite(h_new)) and np.all(h_new <= (1.0 - tau) * h):
            return step, h_new
        if not np.all(np.isfinite(h_new)):
            return None
        r = h_new[rows] - target
        try:
            step = step - Y @ np.linalg.solve(S, r)
        except np.linalg.LinAlgError:
            return None
    return None


def _dual_update(lam, dlam, mu, h):
    """Dual step with its own fraction-to-boundary length.

    Each multiplier is then kept within a bounded factor of its central value.
    """
    neg = dlam < 0
    s_dual = min(1.0, TAU * float(np.min(-lam[neg] / dlam[neg]))) if np.any(neg) else 1.0
    lam = lam + s_dual * dlam
    central = mu / -h
    return np.clip(lam, central / KAPPA_SIGMA, central * KAPPA_SIGMA)


def _merit(prog, x, h, mu):
    return prog.objective(x) - mu * float(np.sum(np.log(-h)))


def interior_point(prog: SmoothProgram, x0, config: SolverConfig = SolverConfig(),
                   stop=None) -> IPMResult:
    """Primal-dual barrier iteration from a strictly feasible ``x0``.

    For a fixed barrier weight ``mu`` the perturbed KKT system is attacked with
    primal-dual Newton steps, a fraction-to-boundary rule on both the slacks and
    the multipliers, and Armijo backtracking on the barrier merit. ``mu`` is
    reduced once its subproblem is solved to within ``KAPPA_EPS * mu``.
    ``stop(x, h)`` may end the iteration early (used by phase 1).
    """
    x = np.asarray(x0, dtype=float).copy()
    h = prog.constraints(x)
    if not _feasible(h):
        raise ValueError("interior_point needs a strictly feasible start")
    m = max(prog.m, 1)
    nl_rows = np.unique(prog.nl_rows)
    mu = config.mu0
    lam = mu / -h
    pd_ok = True
    trace = []
    status = MAX_ITER
    it = 0
    r_dual_norm = gap_rel = np.inf
    s = 0.0
    for it in range(config.max_newton + 1):
        D, d2 = prog.jacobian(x)
        grad = prog.gradient(x)
        f = prog.objective(x)
        r_dual = grad + D.T @ lam
        comp = lam * -h
        scale = max(1.0, float(np.max(np.abs(grad), initial=0.0)))
        r_dual_norm = float(np.max(np.abs(r_dual), initial=0.0)) / scale
        gap_rel = float(np.sum(comp)) / max(1.0, abs(f))
        if config.trace:
            trace.append((it, f, r_dual_norm, gap_rel, s, mu))
        if r_dual_norm <= config.tol_kkt and gap_rel <= config.tol_gap:
            status = OPTIMAL
            break
        if stop is not None and stop(x, h):
            status = OPTIMAL
            break
        if it == config.max_newton:
            break
        # monotone barrier update once the current subproblem is solved
        mu_min = 0.1 * min(config.tol_kkt, config.tol_gap * max(1.0, abs(f)) / m)
        while mu > mu_min:
            err = max(r_dual_norm, float(np.max(np.abs(comp - mu))) / max(1.0, mu))
            if err > KAPPA_EPS * mu:
                break
            mu = max(mu_min, min(config.mu_shrink * mu, mu ** 1.5))

        Hn = _newton_matrix(prog, x, lam, h, D, d2, mu)
        g_bar = grad + D.T @ (mu / -h)
        solve, ok = _factor_pd(Hn)
        dx = solve(-g_bar)
        pd_ok &= ok
        dlam = (lam * (D @ dx) + mu - comp) / -h
        slope = float(g_bar @ dx)
        phi0 = _merit(prog, x, h, mu)
        tiny = abs(slope) <= 1e-14 * max(1.0, abs(phi0))

        # a full step that breaks a curved row gets a second-order correction
        h_full = prog.constraints(x + dx)
        if len(nl_rows) and not (np.all(np.isfinite(h_full)) and np.all(h_full <= (1.0 - TAU) * h)):
            corr = _second_order_step(prog, x, dx, h, D, solve, nl_rows, TAU)
            if corr is not None and (tiny or slope >= 0.0 or
                                     _merit(prog, x + corr[0], corr[1], mu) <= phi0 + config.alpha * slope):
                dx_c, h_c = corr
                dlam = (lam * (D @ dx_c) + mu - comp) / -h
                x, h, s = x + dx_c, h_c, 1.0
                lam = _dual_update(lam, dlam, mu, h)
                continue

        # primal step: strict feasibility with a fraction-to-boundary margin
        s = 1.0
        while True:
            h_new = prog.constraints(x + s * dx)
            if np.all(np.isfinite(h_new)) and np.all(h_new <= (1.0 - TAU) * h):
                break
            s *= config.beta
            if s < 1e-16:
                break
        if s < 1e-16:
            logger.debug("no feasible primal step at iteration %d", it)
            break
        while not tiny and slope < 0.0:
            if _merit(prog, x + s * dx, h_new, mu) <= phi0 + config.alpha * s * slope:
                break
            s *= config.beta
            if s < 1e-16:
                break
            h_new = prog.constraints(x + s * dx)
        if s < 1e-16:
            logger.debug("merit line search stalled at iteration %d", it)
            break

        x = x + s * dx
        h = h_new
        lam = _dual_update(lam, dlam, mu, h)
    f = prog.objective(x)
    return IPMResult(x, lam, h, status, it, r_dual_norm, gap_rel, f, pd_ok, trace=trace)


def phase_one(prog: SmoothProgram, x0, relax: np.ndarray, config: SolverConfig = SolverConfig(),
              floor: float = 1.0):
    """Find a strictly feasible point for ``prog`` starting near ``x0``.

    Rows in ``relax`` get a shared excess variable ``s``; the others must
    already hold strictly at ``x0``. Minimises ``s`` down to ``-floor``.
    Returns ``(x, s, iterations)``; ``s >= 0`` certifies that no strictly
    feasible point was found.
    """
    x0 = np.asarray(x0, dtype=float)
    n, m = prog.n, prog.m
    relax = np.asarray(relax, dtype=bool)
    h0 = prog.constraints(x0)
    if not _feasible(h0[~relax]):
        raise ValueError("non-relaxed rows must hold strictly at the phase-1 start")
    s0 = max(float(np.max(h0[relax], initial=-floor)), -floor) + 1.0
    rho = 1e-8
    P = np.zeros((n + 1, n + 1))
    P[:n, :n] = rho * np.eye(n)
    q = np.zeros(n + 1)
    q[:n] = -rho * x0
    q[n] = 1.0
    C = np.zeros((m + 1, n + 1))
    C[:m, :n] = prog.C
    C[:m, n] = -relax.astype(float)
    C[m, n] = -1.0
    b = np.append(prog.b, floor)
    aux = SmoothProgram(P, q, C, b, prog.nl_rows, prog.nl_var, prog.nl)

    def stop(z, h):
        return z[n] <= -0.999 * floor

    cfg = SolverConfig(tol_kkt=1e-7, tol_gap=1e-7, max_newton=config.max_newton,
                       alpha=config.alpha, beta=config.beta)
    res = interior_point(aux, np.append(x0, s0), cfg, stop=stop)
    return res.x[:n], float(res.x[n]), res.iterations


def solve_program(prog: SmoothProgram, x0, relax, config: SolverConfig = SolverConfig()) -> IPMResult:
    """Phase 1 if needed, then the main iteration."""
    x0 = np.asarray(x0, dtype=float)
    p1_iters = 0
    h0 = prog.constraints(x0)
    if not _feasible(h0):
        x0, s, p1_iters = phase_one(prog, x0, relax, config)
        h0 = prog.constraints(x0)
        if s >= 0.0 or not _feasible(h0):
            excess = max(s, float(np.max(h0)))
            return IPMResult(x0, np.zeros(prog.m), h0, INFEASIBLE, 0, np.inf, np.inf,
                             prog.objective(x0), phase1_iterations=p1_iters, excess=excess)
    res = interior_point(prog, x0, config)
    res.phase1_iterations = p1_iters
    if config.polish and res.status == OPTIMAL:
        res = polish(prog, res)
    return res


def polish(prog: SmoothProgram, res: IPMResult, tol: float = 1e-9) -> IPMResult:
    """Active-set refinement of the linear part of a converged program.

    Variables entering curved rows or the regulariser are held at their
    converged values; over the rest the problem is a quadratic program. Rows
    with ``lam > slack`` are taken as active and the equality-constrained KKT
    system on them is solved directly. The refined point replaces the barrier
    iterate only if it stays feasible, keeps nonnegative multipliers, does not
    raise the objective and does not worsen stationarity beyond the
    tolerance. This removes the ``sqrt(mu)`` offset the barrier leaves on rows
    that are active with a zero multiplier.
    """
    n = prog.n
    fixed = np.zeros(n, dtype=bool)
    fixed[prog.nl_var] = True
    if prog.reg is not None:
        fixed[prog.reg_idx] = True
    free = np.flatnonzero(~fixed)
    curved = np.zeros(prog.m, dtype=bool)
    curved[prog.nl_rows] = True
    rows = np.flatnonzero(~curved & np.any(prog.C[:, free] != 0, axis=1))
    act = rows[res.lam[rows] > -res.h[rows]]
    xk = res.x[fixed]
    P = prog.P[np.ix_(free, free)]
    q = prog.q[free] + prog.P[np.ix_(free, np.flatnonzero(fixed))] @ xk
    Ca = prog.C[np.ix_(act, free)]
    ba = prog.b[act] - prog.C[np.ix_(act, np.flatnonzero(fixed))] @ xk
    K = np.block([[P, Ca.T], [Ca, np.zeros((len(act), len(act)))]])
    sol = np.linalg.lstsq(K, np.concatenate([-q, ba]), rcond=None)[0]
    x = res.x.copy()
    x[free] = sol[:len(free)]
    lam_a = sol[len(free):]
    h = prog.constraints(x)
    lam_scale = max(1.0, float(np.max(np.abs(res.lam), initial=0.0)))
    f_old, f_new = prog.objective(res.x), prog.objective(x)
    if (not np.all(np.isfinite(h)) or np.any(h > tol * (1.0 + np.abs(prog.b)))
            or np.any(lam_a < -tol * lam_scale) or f_new > f_old + tol * max(1.0, abs(f_old))):
        return res
    lam = res.lam.copy()
    lam[rows] = 0.0
    lam[act] = np.maximum(lam_a, 0.0)
    D, _ = prog.jacobian(x)
    grad = prog.gradient(x)
    dual = float(np.max(np.abs(grad + D.T @ lam), initial=0.0)) / max(1.0, float(np.max(np.abs(grad))))
    if dual > max(res.dual_residual, 1e-10):
        return res
    gap = float(np.sum(lam * np.maximum(-h, 0.0))) / max(1.0, abs(f_new))
    return replace(res, x=x, lam=lam, h=h, dual_residual=dual, gap=gap, objective=f_new)
