"""Problem parameters, derived exponents, and nonlinearity evaluators.

The stationary problem lives on R^N = R^K x R^(N-K) with a polyharmonic
operator of order m and a singular potential mu/|y|^(2m) acting on the
first K coordinates.  This module holds the scalar bookkeeping: the
mass-critical and Sobolev exponents, the sharp Hardy constant and the
coercivity factor tau, the power-sum nonlinearity g/G/H/h, and the
small-data threshold predicate that guards the constrained minimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import gamma


class AdmissibilityError(ValueError):
    """Raised when mu violates the Hardy-type lower bound.

    The offending bound is stored in ``bound``: admissible parameters
    satisfy mu > bound (K > 2m) or mu >= 0 (K = 2m).
    """

    def __init__(self, message: str, bound: float):
        super().__init__(message)
        self.bound = bound


def derive_exponents(N: int, m: int) -> tuple[float, float]:
    """Return (2_*, 2^*) = (2 + 4m/N, 2N/(N-2m)), with 2^* = inf at N = 2m."""
    if N < 2 * m or m < 1:
        raise ValueError(f"require N >= 2m >= 2, got N={N}, m={m}")
    two_star_low = 2.0 + 4.0 * m / N
    two_star_high = math.inf if N == 2 * m else 2.0 * N / (N - 2 * m)
    return two_star_low, two_star_high


class HardyTau(NamedTuple):
    hardy_constant: float
    mu_lower_bound: float
    tau: float


def hardy_and_tau(K: int, m: int, mu: float) -> HardyTau:
    """Sharp Hardy constant, the admissible lower bound for mu, and tau.

    The best constant in  int u^2/|y|^(2m) <= C int |grad^m u|^2  is
    C = (Gamma((K-2m)/4) / (2^m Gamma((K+2m)/4)))^2 for K > 2m; at K = 2m
    the inequality fails and C is reported as +inf (forcing mu >= 0).
    tau = 1 for mu >= 0 and tau = 1 + C*mu in (0,1) for admissible mu < 0,
    so that the mu-bracket controls tau times the pure seminorm.
    """
    if K < 2 * m:
        raise ValueError(f"require K >= 2m, got K={K}, m={m}")
    if K == 2 * m:
        hardy_constant = math.inf
        mu_lower_bound = 0.0
        if mu < 0.0:
            raise AdmissibilityError(
                f"mu >= 0 required when K = 2m (got mu={mu})", 0.0
            )
        return HardyTau(hardy_constant, mu_lower_bound, 1.0)
    ratio = gamma((K - 2 * m) / 4.0) / (2.0 ** m * gamma((K + 2 * m) / 4.0))
    hardy_constant = ratio * ratio
    mu_lower_bound = -1.0 / hardy_constant
    if mu <= mu_lower_bound:
        raise AdmissibilityError(
            f"mu={mu} at or below the admissible bound "
            f"-(2^m Gamma((K+2m)/4)/Gamma((K-2m)/4))^2 = {mu_lower_bound:.17g}",
            mu_lower_bound,
        )
    tau = 1.0 if mu >= 0.0 else 1.0 + hardy_constant * mu
    return HardyTau(hardy_constant, mu_lower_bound, tau)


@dataclass(frozen=True)
class ProblemSpec:
    """Dimensions, singular coefficient, prescribed mass, derived constants.

    Invariants checked at construction: N >= K >= 2m >= 2, rho > 0, and mu
    admissible for (K, m).  Derived fields are filled automatically.
    """

    N: int
    K: int
    m: int
    mu: float
    rho: float
    two_star_low: float = field(init=False)
    two_star_high: float = field(init=False)
    hardy_constant: float = field(init=False)
    tau: float = field(init=False)

    def __post_init__(self):
        if not (self.N >= self.K >= 2 * self.m >= 2):
            raise ValueError(
                f"require N >= K >= 2m >= 2, got N={self.N}, K={self.K}, m={self.m}"
            )
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        low, high = derive_exponents(self.N, self.m)
        hardy = hardy_and_tau(self.K, self.m, self.mu)
        object.__setattr__(self, "two_star_low", low)
        object.__setattr__(self, "two_star_high", high)
        object.__setattr__(self, "hardy_constant", hardy.hardy_constant)
        object.__setattr__(self, "tau", hardy.tau)


@dataclass(frozen=True)
class Nonlinearity:
    """Scalar nonlinearity g with antiderivative G, H = g(s)s - 2G, h = H'.

    The model family is the power sum
        g(s) = eta1 |s|^(q-2) s + eta2 |s|^(p-2) s,   q = 2_*,
    for which all four evaluators are closed-form.  Custom families may be
    supplied through the callable slots; the power coefficients are then
    ignored by the evaluators but eta1 is still used as metadata.
    """

    eta1: float
    eta2: float
    p: float
    two_star: float
    g_fn: Optional[Callable] = None
    G_fn: Optional[Callable] = None
    H_fn: Optional[Callable] = None
    h_fn: Optional[Callable] = None

    @classmethod
    def power_sum(cls, eta1: float, eta2: float, p: float, spec: ProblemSpec) -> "Nonlinearity":
        if eta1 < 0 or eta2 <= 0:
            raise ValueError("power-sum family needs eta1 >= 0 and eta2 > 0")
        if not (spec.two_star_low < p < spec.two_star_high):
            raise ValueError(
                f"p must lie in (2_*, 2^*) = ({spec.two_star_low}, {spec.two_star_high}), got {p}"
            )
        return cls(eta1=eta1, eta2=eta2, p=p, two_star=spec.two_star_low)

    @classmethod
    def kerr(cls, spec: ProblemSpec) -> "Nonlinearity":
        """Cubic (Kerr) response g(u) = |u|^2 u."""
        return cls.power_sum(0.0, 1.0, 4.0, spec)

    @classmethod
    def custom(cls, g, G, H, h, two_star: float) -> "Nonlinearity":
        return cls(eta1=0.0, eta2=0.0, p=math.nan, two_star=two_star,
                   g_fn=g, G_fn=G, H_fn=H, h_fn=h)

    @property
    def is_power_sum(self) -> bool:
        return self.g_fn is None

    def g(self, s):
        if self.g_fn is not None:
            return self.g_fn(s)
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        return self.eta1 * a ** (self.two_star - 2.0) * s + self.eta2 * a ** (self.p - 2.0) * s

    def G(self, s):
        if self.G_fn is not None:
            return self.G_fn(s)
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        q = self.two_star
        return self.eta1 / q * a ** q + self.eta2 / self.p * a ** self.p

    def H(self, s):
        if self.H_fn is not None:
            return self.H_fn(s)
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        q = self.two_star
        return (self.eta1 * (q - 2.0) / q * a ** q
                + self.eta2 * (self.p - 2.0) / self.p * a ** self.p)

    def h(self, s):
        if self.h_fn is not None:
            return self.h_fn(s)
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        q = self.two_star
        return (self.eta1 * (q - 2.0) * a ** (q - 2.0) * s
                + self.eta2 * (self.p - 2.0) * a ** (self.p - 2.0) * s)


def nl_eval(nl: Nonlinearity, s: float, which: str) -> float:
    """Evaluate one of the scalar maps {g, G, H, h} at s."""
    if not np.isfinite(s):
        raise ValueError(f"s must be finite, got {s}")
    try:
        fn = {"g": nl.g, "G": nl.G, "H": nl.H, "h": nl.h}[which]
    except KeyError:
        raise ValueError(f"which must be one of g, G, H, h; got {which!r}")
    return float(fn(s))


_ETA_LADDER = [10.0 ** (-k) for k in range(2, 9)]


def eta_limit(nl: Nonlinearity, spec: ProblemSpec) -> float:
    """limsup of H(s)/|s|^(2_*) as s -> 0.

    Closed form eta1*(2_*-2)/2_* for the power sum (the p-term vanishes in
    the limit because p > 2_*); custom families get a numeric limsup over
    the decade ladder s = 10^-k, k = 2..8.
    """
    q = spec.two_star_low
    if nl.is_power_sum:
        return nl.eta1 * (q - 2.0) / q
    vals = [float(nl.H(s)) / s ** q for s in _ETA_LADDER]
    return max(vals)


class ThresholdCheck(NamedTuple):
    ok: bool
    lhs: float


def mass_threshold_ok(spec: ProblemSpec, eta: float, gn_constant: float) -> ThresholdCheck:
    """Small-mass condition (N/2m) eta C_*^(2_*) rho^(2m/N) / tau < 1.

    Returns the verdict together with the left-hand value, so callers can
    report the margin.  gn_constant is the optimal constant C_* of the
    Gagliardo-Nirenberg inequality at the mass-critical exponent.
    """
    lhs = (spec.N / (2.0 * spec.m) * eta
           * gn_constant ** spec.two_star_low
           * spec.rho ** (2.0 * spec.m / spec.N) / spec.tau)
    return ThresholdCheck(lhs < 1.0, lhs)


def critical_mass(spec: ProblemSpec, eta: float, gn_constant: float) -> float:
    """Boundary mass rho* where the threshold condition becomes an equality."""
    if eta <= 0:
        return math.inf
    base = 2.0 * spec.m * spec.tau / (spec.N * eta * gn_constant ** spec.two_star_low)
    return base ** (spec.N / (2.0 * spec.m))


@dataclass
class SpotcheckReport:
    """Sampled verification of the structural inequalities on g, G, H, h."""

    ok: bool
    first_violation: Optional[tuple[str, float, float, float]]  # (name, s, lhs, rhs)
    non_strict: dict

    def __bool__(self):
        return self.ok


def assumption_spotcheck(nl: Nonlinearity, spec: ProblemSpec,
                         sample: Sequence[float]) -> SpotcheckReport:
    """Check 2_* H <= h(s)s and 0 <= (4m/N) G <= H (<= (2^*-2) G) on a sample.

    The checks are pointwise on the given sample, never symbolic: strict
    versions of these inequalities are defined through arbitrarily small s
    and cannot be decided from finitely many points, so an inequality that
    holds with equality at every sample point is flagged in ``non_strict``
    rather than failed.
    """
    pts = [float(s) for s in sample if s != 0.0]
    if not pts:
        raise ValueError("sample must contain at least one nonzero point")
    q = spec.two_star_low
    checks = {
        "2_* H <= h(s)s": lambda s: (q * float(nl.H(s)), float(nl.h(s)) * s),
        "0 <= (4m/N) G": lambda s: (0.0, 4.0 * spec.m / spec.N * float(nl.G(s))),
        "(4m/N) G <= H": lambda s: (4.0 * spec.m / spec.N * float(nl.G(s)), float(nl.H(s))),
    }
    if spec.N > 2 * spec.m:
        hi = spec.two_star_high
        checks["H <= (2^*-2) G"] = lambda s: (float(nl.H(s)), (hi - 2.0) * float(nl.G(s)))

    tol = 1e-12
    non_strict = {}
    for name, fn in checks.items():
        always_equal = True
        for s in pts:
            lhs, rhs = fn(s)
            scale = max(1.0, abs(lhs), abs(rhs))
            if lhs > rhs + tol * scale:
                return SpotcheckReport(False, (name, s, lhs, rhs), {})
            if abs(lhs - rhs) > tol * scale:
                always_equal = False
        if always_equal:
            non_strict[name] = "non-strict everywhere on sample"
    return SpotcheckReport(True, None, non_strict)
