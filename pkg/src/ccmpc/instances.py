"""Small reproducible problem instances for validation and benchmarking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .solver import RiskProblem, assemble
from .stacked import LinearModel, SpecBundle, Weights, stack_dynamics
from .uncertainty import DistributionMode, RiskBudget, ScenarioSet


def scalar_chance_instance(delta_bar: float = 0.5, risk_weight: float = 0.0,
                           mode: str = "mv") -> RiskProblem:
    """``minimize v^2  s.t.  psi(delta) <= v,  delta <= delta_bar`` with ``E = 0``, ``V = 1``.

    One input, one step; the only chance row is the parameter-dependent lower
    input bound ``theta <= v``. Two samples at ``+/- 1/sqrt(2)`` give mean 0 and
    unbiased variance 1 exactly.
    """
    model = LinearModel(np.eye(1), np.eye(1))
    spec = SpecBundle(1, 1, v_lo=lambda th: np.asarray(th)[..., :1],
                      theta_dependent={"input_lo": True})
    a = 1.0 / math.sqrt(2.0)
    samples = np.array([[[-a], [0.0]], [[a], [0.0]]])
    weights = Weights(tracking=[0.0], input=[1.0], soft=[1.0], risk=risk_weight)
    return assemble(stack_dynamics(model, 1), spec, model, ScenarioSet(samples), DistributionMode(mode),
                    weights, np.zeros(1), RiskBudget(delta_bar))


@dataclass(frozen=True)
class RandomInstance:
    model: LinearModel
    spec: SpecBundle
    scenarios: ScenarioSet
    xi0: np.ndarray
    weights: Weights
    N: int

    def problem(self, delta_bar: float = 0.1, mode: str = "mv", risk_weight: float | None = None,
                scenarios: ScenarioSet | None = None) -> RiskProblem:
        w = self.weights
        if risk_weight is not None:
            w = Weights(w.tracking, w.input, w.soft, risk_weight)
        return assemble(stack_dynamics(self.model, self.N), self.spec, self.model,
                        scenarios or self.scenarios, DistributionMode(mode), w, self.xi0,
                        RiskBudget(delta_bar))


def random_instance(rng: np.random.Generator, n_xi: int = 2, n_v: int = 1, N: int = 4,
                    S: int = 200, theta_std: float = 0.3) -> RandomInstance:
    """Tracking problem whose reference sits above a parameter-dependent ceiling.

    The state ceiling ``2 + 0.5 theta`` and the soft bound ``1.5 + theta``
    depend on the scalar parameter; input bounds are constant. The reference
    ``3 + theta`` pushes the ceiling rows into activity.
    """
    A = rng.normal(size=(n_xi, n_xi))
    A *= 0.9 / max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
    B = rng.normal(size=(n_xi, n_v))
    bc = 0.1 * rng.normal(size=n_xi)
    model = LinearModel(A, B, bias=lambda th: np.asarray(th)[..., :1] * bc)
    u_max = 50.0

    def col(fn, n):
        return lambda th: fn(np.asarray(th)[..., :1]) * np.ones(n)

    spec = SpecBundle(
        n_xi, n_v,
        xi_req=col(lambda t: 3.0 + t, n_xi),
        xi_hi=col(lambda t: 2.0 + 0.5 * t, n_xi),
        v_lo=col(lambda t: -u_max + 0.0 * t, n_v),
        v_hi=col(lambda t: u_max + 0.0 * t, n_v),
        xi_soft_hi=col(lambda t: 1.5 + t, n_xi),
        theta_dependent={"input_lo": False, "input_hi": False},
    )
    theta = rng.normal(0.0, theta_std, size=(S, N + 1, 1))
    xi0 = 0.2 * rng.normal(size=n_xi)
    weights = Weights(tracking=np.ones(n_xi), input=0.1 * np.ones(n_v), soft=np.ones(n_xi), risk=1e-4)
    return RandomInstance(model, spec, ScenarioSet(theta), xi0, weights, N)


def zero_variance(inst: RandomInstance) -> ScenarioSet:
    """Every sample replaced by the sample mean trajectory."""
    s = inst.scenarios.samples
    return ScenarioSet(np.broadcast_to(s.mean(axis=0), s.shape).copy())
