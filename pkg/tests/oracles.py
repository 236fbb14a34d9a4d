"""Independent reference implementations used by the tests.

Nothing here imports the code under test, so agreement is evidence rather
than a tautology.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog


def step_by_step(A, B, c_seq, xi0, v_seq):
    """Plain recursion ``xi_{k+1} = A xi_k + B v_k + c_k``; returns ``[xi_1; ...; xi_N]``."""
    xi = np.asarray(xi0, dtype=float)
    out = []
    for c, v in zip(c_seq, v_seq):
        xi = A @ xi + B @ np.atleast_1d(v) + c
        out.append(xi)
    return np.concatenate(out)


def per_step_feasible(A, B, c_seq, xi0, v_seq, gamma_seq, lo, hi, vlo, vhi, soft, tol=0.0):
    """Box and soft constraints checked one step at a time (no stacking)."""
    xi = np.asarray(xi0, dtype=float)
    ok = True
    for k, (c, v, g) in enumerate(zip(c_seq, v_seq, gamma_seq)):
        ok &= bool(np.all(vlo[k] <= v + tol) and np.all(v <= vhi[k] + tol))
        xi = A @ xi + B @ v + c
        ok &= bool(np.all(lo[k] <= xi + tol) and np.all(xi <= hi[k] + tol))
        ok &= bool(np.all(xi <= soft[k] + g + tol))
    return ok


def active_set_qp(H, g, A, b, tol=1e-10, max_iter=500):
    """Primal active-set method for ``min 0.5 x'Hx + g'x  s.t.  A x <= b`` (H positive definite).

    The feasible start is a vertex from a phase-1 linear program (scipy's
    HiGHS), which the package itself never uses.
    """
    n = H.shape[0]
    m = A.shape[0]
    x = _feasible_start(A, b, n)
    W = [i for i in range(m) if abs(A[i] @ x - b[i]) <= 1e-9]
    W = _independent(A, W)
    for _ in range(max_iter):
        # equality-constrained step on the working set
        k = len(W)
        Aw = A[W] if k else np.zeros((0, n))
        K = np.block([[H, Aw.T], [Aw, np.zeros((k, k))]])
        rhs = np.concatenate([-(H @ x + g), np.zeros(k)])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        p, lam = sol[:n], sol[n:]
        if np.linalg.norm(p) <= tol * (1 + np.linalg.norm(x)):
            if k == 0 or np.min(lam) >= -tol:
                full = np.zeros(m)
                full[W] = lam
                return x, full
            W.pop(int(np.argmin(lam)))
            continue
        alpha, block = 1.0, None
        for i in range(m):
            if i in W:
                continue
            ap = A[i] @ p
            if ap > 1e-14:
                a = (b[i] - A[i] @ x) / ap
                if a < alpha:
                    alpha, block = max(a, 0.0), i
        x = x + alpha * p
        if block is not None:
            W.append(block)
    raise RuntimeError("active-set QP did not converge")


def _independent(A, rows):
    keep = []
    for r in rows:
        trial = keep + [r]
        if np.linalg.matrix_rank(A[trial]) == len(trial):
            keep = trial
    return keep


def _feasible_start(A, b, n):
    if np.all(b >= 0):
        return np.zeros(n)
    res = linprog(np.zeros(n), A_ub=A, b_ub=b, bounds=[(None, None)] * n, method="highs")
    if res.status != 0:
        raise ValueError("oracle QP is infeasible")
    return res.x


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)


def second_difference(f, x, h):
    return (f(x + h) - 2.0 * f(x) + f(x - h)) / h ** 2


def mc_sigma(p, n):
    return np.sqrt(p * (1.0 - p) / n)
