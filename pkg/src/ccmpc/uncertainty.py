"""Scenario sets, moment estimates and the risk-dependent tightening functions.

A chance row ``P[X_j <= y_j] >= 1 - delta_j`` is replaced by the
deterministic row ``psi_j(delta_j) <= y_j``. Three tightenings are available:

* ``"mv"``  -- mean and variance known (one-sided Chebyshev / Cantelli),
* ``"bd"``  -- mean and a bounded support ``[L, U]`` known (Hoeffding),
* ``"cdf"`` -- an analytic law with closed-form quantile (exact).

Each ``psi_j`` is strictly decreasing in ``delta_j`` and convex on
``(0, delta_conv]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special, stats

from .stacked import ConfigurationError, as_trajectory

MV, BD, CDF = "mv", "bd", "cdf"
KINDS = (MV, BD, CDF)


class DomainError(ValueError):
    """Risk level outside the open unit interval."""


class SingularDensityError(ArithmeticError):
    """The quantile derivative is undefined where the density vanishes."""


# ----------------------------------------------------------------------
# Scenario sets
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSet:
    """``S`` sampled parameter trajectories, shape ``(S, N+1, n_theta)``."""

    samples: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3:
            raise ConfigurationError(f"samples must be (S, N+1, n_theta), got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def S(self) -> int:
        return self.samples.shape[0]

    @property
    def horizon(self) -> int:
        return self.samples.shape[1] - 1

    def mean_trajectory(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def to_csv(self, path) -> None:
        S, T, n = self.samples.shape
        header = [f"theta_{k}" if n == 1 else f"theta_{k}_{i}" for k in range(T) for i in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in self.samples.reshape(S, T * n):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path, n_theta: int = 1, seed: int | None = None) -> "ScenarioSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        data = np.array(rows, dtype=float)
        return cls(data.reshape(data.shape[0], -1, n_theta), seed)


@dataclass(frozen=True)
class MomentSummary:
    """Per-row sample mean and unbiased variance of ``X_j``."""

    mean: np.ndarray
    var: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def estimate_moments(X_samples, theta_dependent=None) -> MomentSummary:
    """Sample moments of the offset rows.

    Rows flagged independent of the parameter, and rows whose samples are all
    equal, get variance exactly 0 and mean equal to the common value.
    Pruned rows (``-inf``) keep mean ``-inf`` and variance 0.
    """
    X = np.atleast_2d(np.asarray(X_samples, dtype=float))
    if X.shape[0] < 2:
        raise ConfigurationError("need at least two samples to estimate a variance")
    finite = np.all(np.isfinite(X), axis=0)
    Xf = np.where(finite, X, 0.0)
    mean = Xf.mean(axis=0)
    var = Xf.var(axis=0, ddof=1)
    const = np.ptp(Xf, axis=0) == 0
    if theta_dependent is not None:
        const |= ~np.asarray(theta_dependent, dtype=bool)
    mean = np.where(const, Xf[0], mean)
    var = np.where(const, 0.0, var)
    mean = np.where(finite, mean, -np.inf)
    var = np.where(finite, var, 0.0)
    return MomentSummary(mean, var, np.where(finite, Xf.min(axis=0), -np.inf),
                         np.where(finite, Xf.max(axis=0), -np.inf))


# ----------------------------------------------------------------------
# Analytic laws (closed-form quantiles) used by the exact tightening and the
# coverage oracles.
# ----------------------------------------------------------------------


class Gaussian:
    def __init__(self, mu=0.0, sigma=1.0):
        self.mu, self.sigma = float(mu), float(sigma)
        self.mean, self.var = self.mu, self.sigma ** 2
        self.support = (-np.inf, np.inf)
        self.x_star = self.mu

    def cdf(self, x):
        return special.ndtr((np.asarray(x) - self.mu) / self.sigma)

    def sf(self, x):
        return special.ndtr((self.mu - np.asarray(x)) / self.sigma)

    def ppf(self, p):
        return self.mu + self.sigma * special.ndtri(p)

    def isf(self, q):
        return self.mu - self.sigma * special.ndtri(q)

    def pdf(self, x):
        z = (np.asarray(x) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))

    def pdf_prime(self, x):
        z = (np.asarray(x) - self.mu) / self.sigma
        return -z / self.sigma * self.pdf(x)

    def sample(self, rng, size):
        return rng.normal(self.mu, self.sigma, size)


class Uniform:
    def __init__(self, lo=0.0, hi=1.0):
        self.lo, self.hi = float(lo), float(hi)
        if not self.hi > self.lo:
            raise ConfigurationError("uniform law needs hi > lo")
        self.mean = 0.5 * (self.lo + self.hi)
        self.var = (self.hi - self.lo) ** 2 / 12.0
        self.support = (self.lo, self.hi)
        self.x_star = self.lo

    def cdf(self, x):
        return np.clip((np.asarray(x) - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def sf(self, x):
        return np.clip((self.hi - np.asarray(x)) / (self.hi - self.lo), 0.0, 1.0)

    def ppf(self, p):
        return self.lo + (self.hi - self.lo) * np.asarray(p)

    def isf(self, q):
        return self.hi - (self.hi - self.lo) * np.asarray(q)

    def pdf(self, x):
        x = np.asarray(x)
        return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)

    def pdf_prime(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size)


class ShiftedExponential:
    def __init__(self, loc=0.0, scale=1.0):
        self.loc, self.scale = float(loc), float(scale)
        self.mean, self.var = self.loc + self.scale, self.scale ** 2
        self.support = (self.loc, np.inf)
        self.x_star = self.loc

    def cdf(self, x):
        return -np.expm1(-np.maximum(np.asarray(x) - self.loc, 0.0) / self.scale)

    def sf(self, x):
        return np.exp(-np.maximum(np.asarray(x) - self.loc, 0.0) / self.scale)

    def ppf(self, p):
        return self.loc - self.scale * np.log1p(-np.asarray(p))

    def isf(self, q):
        return self.loc - self.scale * np.log(q)

    def pdf(self, x):
        x = np.asarray(x)
        return np.where(x >= self.loc, np.exp(-(x - self.loc) / self.scale) / self.scale, 0.0)

    def pdf_prime(self, x):
        return -self.pdf(x) / self.scale

    def sample(self, rng, size):
        return self.loc + rng.exponential(self.scale, size)


class TruncatedLognormal:
    """Lognormal law conditioned on ``X <= upper``; support ``[0, upper]``."""

    def __init__(self, mu=0.0, sigma=0.5, upper=4.0):
        self.mu, self.sigma, self.upper = float(mu), float(sigma), float(upper)
        self._base = stats.lognorm(s=self.sigma, scale=math.exp(self.mu))
        self._mass = float(self._base.cdf(self.upper))
        m1, m2 = self._raw_moment(1), self._raw_moment(2)
        self.mean, self.var = m1, m2 - m1 ** 2
        self.support = (0.0, self.upper)
        self.x_star = math.exp(self.mu - self.sigma ** 2)

    def _raw_moment(self, k):
        z = (math.log(self.upper) - self.mu - k * self.sigma ** 2) / self.sigma
        return math.exp(k * self.mu + 0.5 * k * k * self.sigma ** 2) * special.ndtr(z) / self._mass

    def cdf(self, x):
        return np.clip(self._base.cdf(x) / self._mass, 0.0, 1.0)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        tail = np.clip(self._mass - self._base.cdf(np.minimum(x, self.upper)), 0.0, None)
        return np.clip(tail / self._mass, 0.0, 1.0)

    def ppf(self, p):
        return self._base.ppf(np.asarray(p) * self._mass)

    def isf(self, q):
        return self._base.isf(self._base.sf(self.upper) + np.asarray(q) * self._mass)

    def pdf(self, x):
        x = np.asarray(x)
        return np.where(x <= self.upper, self._base.pdf(x) / self._mass, 0.0)

    def pdf_prime(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = -(1.0 + (np.log(x) - self.mu) / self.sigma ** 2) / x
        return self.pdf(x) * d

    def sample(self, rng, size):
        u = rng.uniform(0.0, 1.0, size)
        return self.ppf(u)


# ----------------------------------------------------------------------
# Tightening functions
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DistributionMode:
    """Which distributional knowledge backs the tightening.

    ``lower``/``upper`` are the almost-sure bounds per row (``"bd"``; when
    omitted the sample range is used); ``laws`` is a per-row sequence of
    analytic laws (``"cdf"``; when omitted a Gaussian with the sample moments
    is used).
    """

    kind: str = MV
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    laws: Sequence | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown distribution mode {self.kind!r}")
        if self.kind == BD and self.lower is not None and self.upper is not None:
            if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
                raise ConfigurationError("bounded mode needs lower <= upper")


def _check_delta(delta):
    d = np.asarray(delta, dtype=float)
    if np.any(~(d > 0.0) | ~(d < 1.0)):
        raise DomainError(f"risk level must lie in (0, 1), got {delta}")
    return d


@dataclass(frozen=True)
class Tightening:
    """Vectorised ``psi`` over a set of chance rows.

    For ``"mv"`` ``scale`` is the standard deviation, for ``"bd"`` it is
    ``(U - L)/sqrt(2)``; ``"cdf"`` rows carry one law each.
    """

    kind: str
    mean: np.ndarray
    scale: np.ndarray
    laws: tuple = field(default=())

    @property
    def size(self) -> int:
        return len(self.laws) if self.kind == CDF else len(self.mean)

    def value(self, delta) -> np.ndarray:
        d = np.asarray(delta, dtype=float)
        if self.kind == MV:
            return self.mean + self.scale * np.sqrt((1.0 - d) / d)
        if self.kind == BD:
            return self.mean + self.scale * np.sqrt(-np.log(d))
        return np.array([law.isf(dj) for law, dj in zip(self.laws, np.broadcast_to(d, (self.size,)))])

    def derivatives(self, delta) -> tuple[np.ndarray, np.ndarray]:
        """First and second derivatives with respect to the risk level."""
        d = np.asarray(delta, dtype=float)
        if self.kind == MV:
            phi = np.sqrt((1.0 - d) / d)
            d1 = -1.0 / (2.0 * d * d * phi)
            d2 = 1.0 / (d ** 3 * phi) - 1.0 / (4.0 * d ** 4 * phi ** 3)
            return self.scale * d1, self.scale * d2
        if self.kind == BD:
            nl = -np.log(d)
            d1 = -1.0 / (2.0 * d * np.sqrt(nl))
            d2 = -(1.0 + 2.0 * np.log(d)) / (4.0 * d * d * nl ** 1.5)
            return self.scale * d1, self.scale * d2
        d = np.broadcast_to(d, (self.size,))
        d1 = np.empty(self.size)
        d2 = np.empty(self.size)
        for j, (law, dj) in enumerate(zip(self.laws, d)):
            q = law.isf(dj)
            f = float(law.pdf(q))
            if f <= 0.0:
                raise SingularDensityError(f"density vanishes at the {1 - dj} quantile")
            d1[j] = -1.0 / f
            d2[j] = -float(law.pdf_prime(q)) / f ** 3
        return d1, d2

    # Standardised coordinates: psi(delta) = offset + slope * kappa(delta). The
    # solver works in kappa, where the chance rows are linear and the risk level
    # delta(kappa) is a convex decreasing function on the convexity domain.

    @property
    def offset(self) -> np.ndarray:
        return np.zeros(self.size) if self.kind == CDF else np.asarray(self.mean, dtype=float)

    @property
    def slope(self) -> np.ndarray:
        return np.ones(self.size) if self.kind == CDF else np.asarray(self.scale, dtype=float)

    def kappa(self, delta) -> np.ndarray:
        d = np.broadcast_to(np.asarray(delta, dtype=float), (self.size,))
        if self.kind == MV:
            return np.sqrt((1.0 - d) / d)
        if self.kind == BD:
            return np.sqrt(-np.log(d))
        return np.array([float(law.isf(dj)) for law, dj in zip(self.laws, d)])

    def risk(self, kappa) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Risk level ``delta(kappa)`` with its first and second derivatives."""
        k = np.broadcast_to(np.asarray(kappa, dtype=float), (self.size,))
        if self.kind == MV:
            q = 1.0 + k * k
            return 1.0 / q, -2.0 * k / q ** 2, (6.0 * k * k - 2.0) / q ** 3
        if self.kind == BD:
            e = np.exp(-k * k)
            return e, -2.0 * k * e, (4.0 * k * k - 2.0) * e
        d = np.array([float(law.sf(kj)) for law, kj in zip(self.laws, k)])
        d1 = np.array([-float(law.pdf(kj)) for law, kj in zip(self.laws, k)])
        d2 = np.array([-float(law.pdf_prime(kj)) for law, kj in zip(self.laws, k)])
        return d, d1, d2

    def delta_conv(self) -> np.ndarray:
        if self.kind == MV:
            return np.full(self.size, 0.75)
        if self.kind == BD:
            return np.full(self.size, math.exp(-0.5))
        return np.array([1.0 - float(law.cdf(law.x_star)) for law in self.laws])

    def subset(self, idx) -> "Tightening":
        idx = np.asarray(idx, dtype=int)
        if self.kind == CDF:
            return Tightening(CDF, np.zeros(len(idx)), np.zeros(len(idx)), tuple(self.laws[i] for i in idx))
        return Tightening(self.kind, self.mean[idx], self.scale[idx])


def make_tightening(mode: DistributionMode, moments: MomentSummary, rows) -> Tightening:
    """Build the tightening for the given chance rows."""
    rows = np.asarray(rows, dtype=int)
    mean = moments.mean[rows]
    if mode.kind == MV:
        return Tightening(MV, mean, np.sqrt(moments.var[rows]))
    if mode.kind == BD:
        L = moments.lower if mode.lower is None else np.asarray(mode.lower, dtype=float)
        U = moments.upper if mode.upper is None else np.asarray(mode.upper, dtype=float)
        return Tightening(BD, mean, (U[rows] - L[rows]) / math.sqrt(2.0))
    if mode.laws is None:
        laws = tuple(Gaussian(moments.mean[j], math.sqrt(moments.var[j])) for j in rows)
    else:
        laws = tuple(mode.laws[j] for j in rows)
    return Tightening(CDF, mean, np.zeros(len(rows)), laws)


def _kind(mode) -> str:
    kind = mode if isinstance(mode, str) else mode.kind
    if kind not in KINDS:
        raise ConfigurationError(f"unknown distribution mode {kind!r}")
    return kind


def _row_tightening(kind: str, moments_j) -> Tightening:
    if kind == CDF:
        law = moments_j if not isinstance(moments_j, Mapping) else moments_j["law"]
        return Tightening(CDF, np.zeros(1), np.zeros(1), (law,))
    m = np.atleast_1d(float(moments_j["mean"]))
    if kind == MV:
        return Tightening(MV, m, np.atleast_1d(math.sqrt(float(moments_j["var"]))))
    L, U = float(moments_j["lower"]), float(moments_j["upper"])
    return Tightening(BD, m, np.atleast_1d((U - L) / math.sqrt(2.0)))


def psi(mode: DistributionMode | str, moments_j, delta_j: float) -> float:
    """Tightened bound for one row.

    ``moments_j`` is a mapping with ``mean`` and ``var`` (mv), ``mean``,
    ``lower`` and ``upper`` (bd), or an analytic law (cdf).
    """
    _check_delta(delta_j)
    return float(np.ravel(_row_tightening(_kind(mode), moments_j).value(delta_j))[0])


def psi_derivatives(mode: DistributionMode | str, moments_j, delta_j: float) -> tuple[float, float]:
    _check_delta(delta_j)
    d1, d2 = _row_tightening(_kind(mode), moments_j).derivatives(delta_j)
    return float(np.ravel(d1)[0]), float(np.ravel(d2)[0])


def delta_conv(mode: DistributionMode | str, law=None) -> float:
    """Risk level below which ``psi`` is convex."""
    kind = _kind(mode)
    if kind == MV:
        return 0.75
    if kind == BD:
        return math.exp(-0.5)
    if law is None:
        raise ConfigurationError("cdf mode needs the row's law")
    return 1.0 - float(law.cdf(law.x_star))


# ----------------------------------------------------------------------
# Risk budget
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RiskBudget:
    delta_bar: float
    epsilon_floor: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.delta_bar < 1.0:
            raise ConfigurationError("total allowable risk must lie in (0, 1)")
        if not self.epsilon_floor > 0.0:
            raise ConfigurationError("epsilon floor must be positive")

    def check(self, n_c: int) -> None:
        if not self.epsilon_floor * n_c < self.delta_bar:
            raise ConfigurationError(
                f"{n_c} chance rows leave no room above the floor {self.epsilon_floor}"
            )


def uniform_allocation(budget: RiskBudget, n_c: int) -> np.ndarray:
    """Split the budget evenly over ``n_c`` risk-bearing rows."""
    if n_c < 1:
        raise ConfigurationError("need at least one risk-bearing row")
    share = budget.delta_bar / n_c
    if share < budget.epsilon_floor:
        raise ConfigurationError(f"uniform share {share} falls below the floor")
    return np.full(n_c, share)


# ----------------------------------------------------------------------
# Empirical checks
# ----------------------------------------------------------------------


def mc_margin(p: float, S: int) -> float:
    """Three binomial standard errors at nominal level ``p``."""
    return 3.0 * math.sqrt(p * (1.0 - p) / S)


def violation_tolerance(y) -> np.ndarray:
    return 1e-9 * (1.0 + np.abs(y))


def empirical_violation(y, X_samples, groups: Mapping[str, Sequence[int]] | None = None) -> dict:
    """Fraction of samples in which a fixed plan violates each group.

    A sample violates a group if any of its rows has ``X_j > y_j`` (up to a
    1e-9 relative round-off allowance). ``"joint"`` covers all finite rows.
    """
    X = np.atleast_2d(np.asarray(X_samples, dtype=float))
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore"):
        viol = X > y + violation_tolerance(y)
    viol &= np.isfinite(X)
    out = {}
    for name, rows in (groups or {}).items():
        rows = np.asarray(rows, dtype=int)
        out[name] = float(viol[:, rows].any(axis=1).mean()) if rows.size else 0.0
    out["joint"] = float(viol.any(axis=1).mean())
    return out


@dataclass
class CoverageRecord:
    kind: str
    delta: float
    bound: float
    coverage: float
    margin: float
    passed: bool
    exact: bool = False


def verify_inequality_oracles(kind: str, law, deltas: Sequence[float], n_samples: int = 100_000,
                              rng: np.random.Generator | None = None) -> list[CoverageRecord]:
    """Check ``P[X <= psi(delta)] >= 1 - delta`` by Monte Carlo for one law.

    The law supplies its exact moments and support. In ``"cdf"`` mode the
    coverage must additionally match ``1 - delta`` within the margin.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = law.sample(rng, n_samples)
    out = []
    for d in deltas:
        if kind == MV:
            b = psi(MV, {"mean": law.mean, "var": law.var}, d)
        elif kind == BD:
            lo, hi = law.support
            b = psi(BD, {"mean": law.mean, "lower": lo, "upper": hi}, d)
        else:
            b = psi(CDF, law, d)
        cov = float(np.mean(x <= b))
        m = mc_margin(1.0 - d, n_samples)
        ok = cov >= 1.0 - d - m
        if kind == CDF:
            ok = ok and abs(cov - (1.0 - d)) <= m
        out.append(CoverageRecord(kind, float(d), float(b), cov, m, bool(ok), kind == CDF))
    return out


def verify_boole(laws: Sequence, deltas: Sequence[float], kind: str = MV, n_samples: int = 100_000,
                 rng: np.random.Generator | None = None) -> CoverageRecord:
    """Joint coverage of independent rows each tightened at its own ``delta_j``."""
    rng = np.random.default_rng(0) if rng is None else rng
    total = float(np.sum(deltas))
    ok_all = np.ones(n_samples, dtype=bool)
    for law, d in zip(laws, deltas):
        x = law.sample(rng, n_samples)
        if kind == MV:
            b = psi(MV, {"mean": law.mean, "var": law.var}, d)
        elif kind == BD:
            lo, hi = law.support
            b = psi(BD, {"mean": law.mean, "lower": lo, "upper": hi}, d)
        else:
            b = psi(CDF, law, d)
        ok_all &= x <= b
    cov = float(ok_all.mean())
    m = mc_margin(1.0 - total, n_samples)
    return CoverageRecord(f"boole-{kind}", total, float("nan"), cov, m, cov >= 1.0 - total - m)


def sample_offsets(builder: Callable[[np.ndarray], np.ndarray], scenarios: ScenarioSet) -> np.ndarray:
    """Evaluate an offset builder on every trajectory of a scenario set."""
    return np.asarray(builder(as_trajectory(scenarios.samples)), dtype=float)
