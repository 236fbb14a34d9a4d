"""Exactly linearizable models.

The nonlinear plant ``x+ = Phi^-1(A Phi(x) + B Psi(u; x) + c(theta))`` becomes
linear in the coordinates ``xi = Phi(x)``, ``v = Psi(u; x)``. ``Phi`` and
``Psi(.; x)`` are elementwise, strictly increasing and vanish at the origin, so
box constraints map to box constraints.

The transforms here are analytic stand-ins for learned networks:
``Phi_i(x) = a_i x + b_i x^3`` and ``Psi_i(u; x) = s_i(x) (u + d_i u^3)`` with a
positive bounded state-dependent scale ``s_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .stacked import ConfigurationError, LinearModel, SpecBundle, as_trajectory


class RangeError(ValueError):
    """The inverse could not be bracketed."""


class MonotoneMap:
    """Elementwise strictly increasing map with a numerical inverse.

    Subclasses implement :meth:`forward` and :meth:`derivative`; the inverse is
    a safeguarded Newton iteration inside an expanding bisection bracket.
    """

    tol = 1e-10
    max_bracket = 1e12

    def forward(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def inverse(self, y, x_guess=None):
        y = np.asarray(y, dtype=float)
        lo = np.full(y.shape, -1.0)
        hi = np.full(y.shape, 1.0)
        # expand until the bracket contains the target
        for _ in range(200):
            f_lo, f_hi = self.forward(lo), self.forward(hi)
            need_lo, need_hi = f_lo > y, f_hi < y
            if not (need_lo.any() or need_hi.any()):
                break
            lo = np.where(need_lo, 2.0 * lo, lo)
            hi = np.where(need_hi, 2.0 * hi, hi)
            if np.any(np.abs(lo) > self.max_bracket) or np.any(np.abs(hi) > self.max_bracket):
                raise RangeError("target outside the reachable range of the map")
        x = np.clip(np.zeros(y.shape) if x_guess is None else np.asarray(x_guess, dtype=float), lo, hi)
        for _ in range(200):
            r = self.forward(x) - y
            lo = np.where(r < 0, x, lo)
            hi = np.where(r > 0, x, hi)
            d = self.derivative(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                step = x - r / d
            bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
            x_new = np.where(bad, 0.5 * (lo + hi), step)
            done = np.abs(x_new - x) <= 1e-15 * (1.0 + np.abs(x))
            x = np.where(r == 0, x, x_new)
            if np.all(done | (r == 0)):
                break
        return x


class CubicMap(MonotoneMap):
    """``a x + b x^3`` per channel with ``a > 0``, ``b >= 0``."""

    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if np.any(self.a <= 0) or np.any(self.b < 0):
            raise ConfigurationError("cubic map needs a > 0 and b >= 0")

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        return self.a * x + self.b * x ** 3

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return self.a + 3.0 * self.b * x ** 2

    def inverse(self, y, x_guess=None):
        y, a, b = np.broadcast_arrays(np.asarray(y, dtype=float), self.a, self.b)
        # root lies between 0 and y/a because b >= 0
        lo = np.minimum(0.0, y / a)
        hi = np.maximum(0.0, y / a)
        x = y / a if x_guess is None else np.clip(x_guess, lo, hi)
        for _ in range(100):
            r = a * x + b * x ** 3 - y
            d = a + 3.0 * b * x ** 2
            lo = np.where(r < 0, x, lo)
            hi = np.where(r > 0, x, hi)
            step = x - r / d
            bad = (step < lo) | (step > hi)
            x_new = np.where(bad, 0.5 * (lo + hi), step)
            if np.all(np.abs(x_new - x) <= 1e-16 * (1.0 + np.abs(x))):
                x = x_new
                break
            x = x_new
        return x


def sigmoid_scale(weights, bias=None, amplitude=None) -> Callable:
    """``s_i(x) = 1 + amplitude_i * sigmoid(w_i . x + bias_i)``; always in ``[1, 1 + amplitude]``."""
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    c = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    amp = np.ones(W.shape[0]) if amplitude is None else np.asarray(amplitude, dtype=float)
    if np.any(amp < 0):
        raise ConfigurationError("scale amplitude must be nonnegative")

    def scale(x):
        z = np.asarray(x, dtype=float) @ W.T + c
        return 1.0 + amp / (1.0 + np.exp(-z))

    scale.state_dependent = bool(np.any(W != 0) and np.any(amp != 0))
    return scale


class InputMap:
    """``Psi(u; x) = s(x) * g(u)`` with ``g`` a monotone map and ``s(x) > 0``.

    ``scale=None`` gives the state-independent (Hammerstein-Wiener) case.
    """

    def __init__(self, shape: MonotoneMap, scale: Callable | None = None):
        self.shape = shape
        self.scale = scale
        self.state_dependent = scale is not None and getattr(scale, "state_dependent", True)

    def _s(self, x, n):
        if self.scale is None:
            return np.ones(n)
        s = np.asarray(self.scale(np.asarray(x, dtype=float)), dtype=float)
        if np.any(s <= 0):
            raise ConfigurationError("input scale must stay positive")
        return s

    def forward(self, u, x):
        g = self.shape.forward(u)
        return self._s(x, g.shape[-1:]) * g

    def inverse(self, v, x):
        v = np.asarray(v, dtype=float)
        return self.shape.inverse(v / self._s(x, v.shape[-1:]))

    def __call__(self, u, x):
        return self.forward(u, x)


@dataclass(frozen=True)
class ExlinModel:
    """Nonlinear plant that is linear in transformed coordinates."""

    phi: MonotoneMap
    psi: InputMap
    core: LinearModel

    @property
    def n_x(self) -> int:
        return self.core.n_xi

    @property
    def n_u(self) -> int:
        return self.core.n_v

    def step(self, x, u, theta):
        xi = self.phi.forward(x)
        v = self.psi.forward(u, x)
        xi_next = self.core.A @ xi + self.core.B @ v + self.core.c(np.atleast_1d(theta))
        return self.phi.inverse(xi_next, x_guess=x)


def rollout_nonlinear(model: ExlinModel, x0, u_hat, theta) -> np.ndarray:
    """Simulate the nonlinear plant, returning ``[x_1; ...; x_N]`` stacked."""
    u = np.asarray(u_hat, dtype=float).reshape(-1, model.n_u)
    N = u.shape[0]
    theta = as_trajectory(theta, N)
    x = np.asarray(x0, dtype=float)
    out = []
    for k in range(N):
        x = model.step(x, u[k], theta[k])
        out.append(x)
    return np.concatenate(out)


def inputs_from_plan(model: ExlinModel, x0, v_hat, theta) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``u_k = Psi^-1(v_k; x_k)`` along the plant trajectory driven by a plan."""
    v = np.asarray(v_hat, dtype=float).reshape(-1, model.n_u)
    theta = as_trajectory(theta, v.shape[0])
    x = np.asarray(x0, dtype=float)
    us, xs = [], []
    for k in range(v.shape[0]):
        u = model.psi.inverse(v[k], x)
        us.append(u)
        x = model.step(x, u, theta[k])
        xs.append(x)
    return np.concatenate(us), np.concatenate(xs)


def _mapped(fn, phi):
    if fn is None:
        return None

    def out(theta):
        x = np.asarray(fn(theta), dtype=float)
        finite = np.isfinite(x)
        # infinite bounds stay infinite (0 * inf would give nan)
        return np.where(finite, phi.forward(np.where(finite, x, 0.0)), x)

    return out


def transform_spec(spec: SpecBundle, phi: MonotoneMap, psi: InputMap | None = None,
                   state_ref=None) -> SpecBundle:
    """Map an x/u-space spec into xi/v coordinates.

    State bounds, the reference and the soft bound go through ``Phi``
    (infinite bounds stay infinite). Input bounds go through ``Psi``; when it is
    state dependent they are evaluated at ``state_ref`` (one state, or one per
    horizon step).
    """
    fields = dict(
        xi_req=_mapped(spec.xi_req, phi),
        xi_lo=_mapped(spec.xi_lo, phi),
        xi_hi=_mapped(spec.xi_hi, phi),
        xi_soft_hi=_mapped(spec.xi_soft_hi, phi),
    )
    v_lo, v_hi = spec.v_lo, spec.v_hi
    if psi is not None:
        if psi.state_dependent and state_ref is None:
            raise ConfigurationError("state-dependent input map needs a reference state")
        v_lo = _input_bounds(spec.v_lo, psi, state_ref)
        v_hi = _input_bounds(spec.v_hi, psi, state_ref)
    return SpecBundle(spec.n_xi, spec.n_v, v_lo=v_lo, v_hi=v_hi,
                      theta_dependent=dict(spec.theta_dependent), **fields)


def _input_bounds(fns, psi: InputMap, states):
    if fns is None:
        return None
    if states is None:
        states = np.zeros(1)
    states = np.asarray(states, dtype=float)
    per_step = not callable(fns) or states.ndim == 2
    if not per_step:
        return _psi_bound(fns, psi, states)
    n_steps = states.shape[0] if states.ndim == 2 else len(fns)
    fn_list = [fns] * n_steps if callable(fns) else list(fns)
    st = states if states.ndim == 2 else np.tile(states, (n_steps, 1))
    return [_psi_bound(f, psi, x) for f, x in zip(fn_list, st)]


def _psi_bound(fn, psi: InputMap, x):
    def bound(theta):
        u = np.asarray(fn(theta), dtype=float)
        finite = np.isfinite(u)
        return np.where(finite, psi.forward(np.where(finite, u, 0.0), x), u)

    return bound


def resolve_input_bounds(spec: SpecBundle, phi: MonotoneMap, psi: InputMap, x_measured,
                         xi_plan=None, N: int | None = None) -> SpecBundle:
    """Per-step transformed input bounds from a shifted previous plan.

    ``xi_plan`` is the previous optimal ``[xi_1; ...; xi_N]`` (one step old).
    Step 0 uses the measured state; step ``k >= 1`` uses the previous plan's
    state for the same time instant, the last one repeated. Without a previous
    plan the measured state is held over the whole horizon.
    """
    n = spec.n_xi
    if N is None:
        N = len(spec.v_lo) if spec.v_lo is not None and not callable(spec.v_lo) else None
    if N is None:
        if xi_plan is None:
            raise ConfigurationError("horizon length needed when no previous plan is given")
        N = len(np.ravel(xi_plan)) // n
    x0 = np.asarray(x_measured, dtype=float)
    states = np.tile(x0, (N, 1))
    if xi_plan is not None and psi.state_dependent:
        plan = np.asarray(xi_plan, dtype=float).reshape(-1, n)
        xs = phi.inverse(plan)
        for k in range(1, N):
            states[k] = xs[min(k, plan.shape[0] - 1)]
    return transform_spec(spec, phi, psi, state_ref=states)
