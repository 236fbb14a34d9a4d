"""Horizon-condensed linear prediction and the stacked constraint vectors.

The linear system ``xi[k+1] = A xi[k] + B v[k] + c(theta[k])`` is unrolled over
a horizon of ``N`` steps so that the predicted states are an affine function of
the stacked input ``v_hat``::

    xi_hat = A_hat xi0 + B_hat v_hat + c_hat(theta_hat)

All box and soft constraints are then collected into a single inequality
``X(theta_hat) <= y(v_hat, gamma_hat)`` whose left side only depends on the
uncertain parameter and whose right side is linear in the decision variables.
Rows are laid out in five blocks (state-lo, state-hi, input-lo, input-hi,
soft); a row whose bound is infinite carries ``X = -inf`` and is pruned.

Callables in :class:`SpecBundle` and :class:`LinearModel` are evaluated on
arrays of parameter values with shape ``(..., n_theta)`` and must broadcast
over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ThetaFn = Callable[[np.ndarray], np.ndarray]

BLOCKS = ("state_lo", "state_hi", "input_lo", "input_hi", "soft")


class ConfigurationError(ValueError):
    """Raised for inconsistent dimensions, weights or bounds."""


def _zero_bias(n):
    def bias(theta):
        theta = np.asarray(theta, dtype=float)
        return np.zeros(theta.shape[:-1] + (n,))

    return bias


@dataclass(frozen=True)
class LinearModel:
    """Time-invariant linear core with a parameter-dependent bias.

    Attributes:
        A: State matrix, shape ``(n_xi, n_xi)``.
        B: Input matrix, shape ``(n_xi, n_v)``.
        bias: ``c(theta)``; ``None`` means identically zero.
        bias_depends_on_theta: Whether ``c`` actually varies with ``theta``.
    """

    A: np.ndarray
    B: np.ndarray
    bias: ThetaFn | None = None
    bias_depends_on_theta: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ConfigurationError(
                f"B has {B.shape[0]} rows but A is {A.shape[0]}x{A.shape[0]}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.bias is None:
            object.__setattr__(self, "bias", _zero_bias(A.shape[0]))
            object.__setattr__(self, "bias_depends_on_theta", False)

    @property
    def n_xi(self) -> int:
        return self.A.shape[0]

    @property
    def n_v(self) -> int:
        return self.B.shape[1]

    def c(self, theta) -> np.ndarray:
        out = np.asarray(self.bias(np.asarray(theta, dtype=float)), dtype=float)
        if out.shape[-1] != self.n_xi:
            raise ConfigurationError(
                f"bias returned dimension {out.shape[-1]}, expected {self.n_xi}"
            )
        return out


@dataclass(frozen=True)
class StackedSystem:
    A_hat: np.ndarray
    B_hat: np.ndarray
    N: int
    n_xi: int
    n_v: int


def stack_dynamics(model: LinearModel, N: int) -> StackedSystem:
    """Condense the dynamics over ``N`` steps.

    Row block ``i`` of ``A_hat`` is ``A^(i+1)`` and block ``(i, j)`` of
    ``B_hat`` is ``A^(i-j) B`` for ``i >= j``.
    """
    if N < 1:
        raise ConfigurationError("horizon N must be >= 1")
    n, m = model.n_xi, model.n_v
    powers = [np.eye(n)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])
    A_hat = np.vstack(powers[1:])
    B_hat = np.zeros((N * n, N * m))
    for i in range(N):
        for j in range(i + 1):
            B_hat[i * n:(i + 1) * n, j * m:(j + 1) * m] = powers[i - j] @ model.B
    return StackedSystem(A_hat, B_hat, N, n, m)


def as_trajectory(theta, N: int | None = None) -> np.ndarray:
    """Return ``theta`` as an array of shape ``(..., T, n_theta)``.

    A 1-D input is read as a scalar parameter per step.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    if N is not None and theta.shape[-2] < N:
        raise ConfigurationError(
            f"parameter trajectory has {theta.shape[-2]} steps, need at least {N}"
        )
    return theta


def stack_bias(model: LinearModel, theta, N: int) -> np.ndarray:
    """Stacked bias ``c_hat``; block ``k`` is ``sum_{i<=k} A^(k-i) c(theta_i)``.

    Only ``theta_0 .. theta_{N-1}`` enter. Leading sample axes are preserved.
    """
    theta = as_trajectory(theta, N)
    c = model.c(theta[..., :N, :])  # (..., N, n_xi)
    out = np.empty(c.shape)
    acc = np.zeros(c.shape[:-2] + (model.n_xi,))
    for k in range(N):
        acc = acc @ model.A.T + c[..., k, :]
        out[..., k, :] = acc
    return out.reshape(c.shape[:-2] + (N * model.n_xi,))


def simulate(model: LinearModel, xi0, v_hat, theta) -> np.ndarray:
    """Step the linear recursion directly and return ``[xi_1, ..., xi_N]`` stacked."""
    xi = np.asarray(xi0, dtype=float).copy()
    v = np.asarray(v_hat, dtype=float).reshape(-1, model.n_v)
    N = v.shape[0]
    theta = as_trajectory(theta, N)
    out = []
    for k in range(N):
        xi = model.A @ xi + model.B @ v[k] + model.c(theta[k])
        out.append(xi)
    return np.concatenate(out)


def _per_step(fn, N):
    if fn is None:
        return None
    if callable(fn):
        return [fn] * N
    fns = list(fn)
    if len(fns) != N:
        raise ConfigurationError(f"expected {N} per-step bound functions, got {len(fns)}")
    return fns


def _const(n, value):
    def f(theta):
        theta = np.asarray(theta, dtype=float)
        return np.full(theta.shape[:-1] + (n,), value)

    return f


@dataclass(frozen=True)
class SpecBundle:
    """Parameter-dependent reference, hard bounds and soft upper bounds.

    Every bound is a vectorised callable ``theta -> array(..., n)``; input
    bounds may also be a sequence of ``N`` callables (one per horizon step),
    which is how state-dependent input transforms are resolved. Missing bounds
    default to +/-inf.

    ``theta_dependent`` maps a block name in :data:`BLOCKS` (or ``"xi_req"``)
    to a boolean per channel. Rows whose flag is False must evaluate to the
    same value for every ``theta``.
    """

    n_xi: int
    n_v: int
    xi_req: ThetaFn | None = None
    xi_lo: ThetaFn | None = None
    xi_hi: ThetaFn | None = None
    v_lo: ThetaFn | Sequence[ThetaFn] | None = None
    v_hi: ThetaFn | Sequence[ThetaFn] | None = None
    xi_soft_hi: ThetaFn | None = None
    theta_dependent: dict = field(default_factory=dict)

    def flags(self, block: str) -> np.ndarray:
        n = self.n_v if block in ("input_lo", "input_hi") else self.n_xi
        flag = self.theta_dependent.get(block, True)
        return np.broadcast_to(np.asarray(flag, dtype=bool), (n,)).copy()

    def reference(self, theta, N: int) -> np.ndarray:
        """Stacked requested state ``[xi_req(theta_1); ...; xi_req(theta_N)]``."""
        theta = as_trajectory(theta, N + 1)
        fn = self.xi_req or _const(self.n_xi, 0.0)
        st = theta[..., 1:N + 1, :]
        ref = np.broadcast_to(np.asarray(fn(st), dtype=float), st.shape[:-1] + (self.n_xi,))
        return ref.reshape(ref.shape[:-2] + (N * self.n_xi,))

    def _eval(self, fn, theta_steps, n, default):
        fn = fn or _const(n, default)
        return np.broadcast_to(np.asarray(fn(theta_steps), dtype=float),
                               theta_steps.shape[:-1] + (n,))

    def _eval_steps(self, fns, theta, steps, n, default):
        fns = _per_step(fns, len(steps)) or [_const(n, default)] * len(steps)
        lead = theta.shape[:-2] + (n,)
        cols = [np.broadcast_to(np.asarray(f(theta[..., k, :]), dtype=float), lead)
                for f, k in zip(fns, steps)]
        return np.concatenate(cols, axis=-1)

    def stacked_bounds(self, theta, N: int) -> dict:
        """Stacked bounds keyed by ``xi_lo, xi_hi, v_lo, v_hi, xi_soft_hi``."""
        theta = as_trajectory(theta, N + 1)
        lead = theta.shape[:-2]
        st = theta[..., 1:N + 1, :]
        out = {}
        for key, default in (("xi_lo", -np.inf), ("xi_hi", np.inf), ("xi_soft_hi", np.inf)):
            val = self._eval(getattr(self, key), st, self.n_xi, default)
            out[key] = val.reshape(lead + (N * self.n_xi,))
        out["v_lo"] = self._eval_steps(self.v_lo, theta, range(N), self.n_v, -np.inf)
        out["v_hi"] = self._eval_steps(self.v_hi, theta, range(N), self.n_v, np.inf)
        return out


@dataclass(frozen=True)
class ConstraintIndexMap:
    """Global row numbering of ``X`` and ``y``.

    Block order is fixed (:data:`BLOCKS`). Within a block, rows are ordered by
    time step then channel. ``pruned`` records rows with infinite bounds; it is
    never used to renumber rows.
    """

    N: int
    n_xi: int
    n_v: int
    pruned: np.ndarray | None = None

    def block_size(self, block: str) -> int:
        return self.N * (self.n_v if block in ("input_lo", "input_hi") else self.n_xi)

    @property
    def n_rows(self) -> int:
        return 2 * self.N * self.n_xi + 2 * self.N * self.n_v + self.N * self.n_xi

    def block_start(self, block: str) -> int:
        start = 0
        for b in BLOCKS:
            if b == block:
                return start
            start += self.block_size(b)
        raise KeyError(block)

    def block_slice(self, block: str) -> slice:
        s = self.block_start(block)
        return slice(s, s + self.block_size(block))

    def row(self, block: str, k: int, i: int) -> int:
        width = self.n_v if block in ("input_lo", "input_hi") else self.n_xi
        if not (0 <= k < self.N and 0 <= i < width):
            raise IndexError((block, k, i))
        return self.block_start(block) + k * width + i

    def locate(self, j: int) -> tuple[str, int, int]:
        """Inverse of :meth:`row`."""
        for b in BLOCKS:
            s = self.block_slice(b)
            if s.start <= j < s.stop:
                width = self.n_v if b in ("input_lo", "input_hi") else self.n_xi
                k, i = divmod(j - s.start, width)
                return b, k, i
        raise IndexError(j)

    def channel_rows(self, block: str, i: int) -> np.ndarray:
        """All rows of ``block`` for channel ``i`` across the horizon."""
        return np.array([self.row(block, k, i) for k in range(self.N)])

    def with_pruned(self, X) -> "ConstraintIndexMap":
        """Record rows whose offset is ``-inf`` in every sample as pruned.

        Raises if a row is infinite for some samples but finite for others.
        """
        X = np.atleast_2d(X)
        inf = np.isneginf(X)
        if np.any(inf.any(axis=0) & ~inf.all(axis=0)):
            raise ConfigurationError("bound is infinite for some parameter samples only")
        return ConstraintIndexMap(self.N, self.n_xi, self.n_v, inf.all(axis=0))

    @property
    def active(self) -> np.ndarray:
        if self.pruned is None:
            return np.ones(self.n_rows, dtype=bool)
        return ~self.pruned

    def theta_dependent(self, spec: SpecBundle, model: LinearModel | None = None) -> np.ndarray:
        """Per-row flag: does ``X_j`` vary with the parameter?"""
        bias = bool(model is not None and model.bias_depends_on_theta)
        out = np.empty(self.n_rows, dtype=bool)
        for b in BLOCKS:
            flags = np.tile(spec.flags(b), self.N)
            if b in ("state_lo", "state_hi", "soft"):
                flags = flags | bias
            out[self.block_slice(b)] = flags
        return out


def index_map(stacked: StackedSystem) -> ConstraintIndexMap:
    return ConstraintIndexMap(stacked.N, stacked.n_xi, stacked.n_v)


def build_offset(spec: SpecBundle, model: LinearModel, theta, index: ConstraintIndexMap) -> np.ndarray:
    """The parameter-only side ``X(theta_hat)`` of the stacked constraints.

    ``theta`` may carry leading sample axes; the result has shape
    ``(..., n_X)``. Pruned rows are ``-inf``.
    """
    N = index.N
    if spec.n_xi != model.n_xi or spec.n_v != model.n_v or index.n_xi != model.n_xi:
        raise ConfigurationError("spec, model and index map dimensions disagree")
    c_hat = stack_bias(model, theta, N)
    bnd = spec.stacked_bounds(theta, N)
    lead = c_hat.shape[:-1]
    parts = [
        bnd["xi_lo"] - c_hat,
        c_hat - bnd["xi_hi"],
        bnd["v_lo"],
        -bnd["v_hi"],
        c_hat - bnd["xi_soft_hi"],
    ]
    parts = [np.broadcast_to(p, lead + p.shape[-1:]) for p in parts]
    return np.concatenate(parts, axis=-1)


def lhs_matrix(stacked: StackedSystem) -> tuple[np.ndarray, np.ndarray]:
    """``G, F`` with ``y(v_hat, gamma_hat) = G @ [v_hat; gamma_hat] + F @ xi0``."""
    N, n, m = stacked.N, stacked.n_xi, stacked.n_v
    Bh, Ah = stacked.B_hat, stacked.A_hat
    Iv = np.eye(N * m)
    Ig = np.eye(N * n)
    Zv = np.zeros((N * n, N * n))
    Zs = np.zeros((N * m, N * n))
    G = np.block([
        [Bh, Zv],
        [-Bh, Zv],
        [Iv, Zs],
        [-Iv, Zs],
        [-Bh, Ig],
    ])
    F = np.vstack([Ah, -Ah, np.zeros((2 * N * m, n)), -Ah])
    return G, F


def build_lhs(stacked: StackedSystem, xi0, v_hat, gamma_hat) -> np.ndarray:
    """The decision-variable side ``y(v_hat, gamma_hat)``."""
    G, F = lhs_matrix(stacked)
    z = np.concatenate([np.ravel(v_hat), np.ravel(gamma_hat)])
    return G @ z + F @ np.asarray(xi0, dtype=float)


@dataclass(frozen=True)
class Weights:
    """Diagonal cost weights per channel.

    ``tracking`` may be zero on some state channels; ``input`` and ``soft``
    must be strictly positive everywhere for strict convexity in
    ``(v_hat, gamma_hat)``. ``risk`` multiplies the risk-allocation regulariser.
    """

    tracking: np.ndarray
    input: np.ndarray
    soft: np.ndarray
    risk: float = 0.0

    def __post_init__(self):
        for name in ("tracking", "input", "soft"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.tracking < 0):
            raise ConfigurationError("tracking weights must be nonnegative")
        if np.any(self.input <= 0):
            raise ConfigurationError("input weights must be strictly positive")
        if np.any(self.soft <= 0):
            raise ConfigurationError("soft-constraint weights must be strictly positive")
        if self.risk < 0:
            raise ConfigurationError("risk weight must be nonnegative")


@dataclass(frozen=True)
class Objective:
    """``0.5 z'Hz + g'z`` over ``z = [v_hat; gamma_hat]``.

    The parameter-only constant of the expansion is dropped
    (``constant_dropped`` is always True); reported objective values exclude it.
    """

    H: np.ndarray
    g: np.ndarray
    constant_dropped: bool = True


def build_objective(stacked: StackedSystem, spec: SpecBundle, model: LinearModel,
                    theta_samples, weights: Weights, xi0) -> Objective:
    """Quadratic objective with the tracking expectation taken over samples.

    ``theta_samples`` has shape ``(S, N+1, n_theta)`` (or a single trajectory).
    """
    N, n, m = stacked.N, stacked.n_xi, stacked.n_v
    wt = np.broadcast_to(weights.tracking, (n,))
    wv = np.broadcast_to(weights.input, (m,))
    ws = np.broadcast_to(weights.soft, (n,))
    W = np.diag(np.tile(wt, N))
    Hv = 2.0 * (stacked.B_hat.T @ W @ stacked.B_hat + np.diag(np.tile(wv, N)))
    Hg = 2.0 * np.diag(np.tile(ws, N))
    H = np.block([[Hv, np.zeros((N * m, N * n))], [np.zeros((N * n, N * m)), Hg]])
    theta = as_trajectory(theta_samples, N + 1)
    offset = stack_bias(model, theta, N) - spec.reference(theta, N)
    if offset.ndim > 1:
        offset = offset.reshape(-1, N * n).mean(axis=0)
    e = stacked.A_hat @ np.asarray(xi0, dtype=float) + offset
    g = np.concatenate([2.0 * stacked.B_hat.T @ (W @ e), np.zeros(N * n)])
    return Objective(0.5 * (H + H.T), g)
