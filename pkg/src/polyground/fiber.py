"""Dilations, the fiber map along mass-preserving scalings, and the
retraction onto the zero set of the constraint functional M.

The mass-preserving dilation v = s^(N/2) u(s .) leaves the mass invariant
and scales the mu-bracket by s^(2m), so the energy along the fiber,
    phi(s) = s^(2m)/2 [u]_mu^2 - s^(-N) int G(s^(N/2) u),
is computable by pointwise composition on the original grid.  Its unique
maximizer (an interval in degenerate cases) retracts u onto the manifold
M(u) = 0 without changing the mass.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline, make_interp_spline
from scipy.optimize import brentq

from .field import Field, Grid, bracket_mu_sq, integrate, mass
from .model import Nonlinearity, ProblemSpec, eta_limit


class RetractionError(RuntimeError):
    """The field cannot be retracted onto the constraint manifold."""


class TruncationWarning(UserWarning):
    pass


def _ambient_dim(grid: Grid) -> int:
    return grid.d if grid.kind == "radial" else grid.d + 1


def _parity_sign(grid: Grid) -> float:
    return 1.0 if grid.parity == "even" else -1.0


class _Resampler:
    """Parity-aware spline interpolant of a field, reusable across dilations.

    Degree 3 matches the public dilation contract; the sphere retraction
    used inside the solver requests degree 5, whose lower interpolation
    error keeps the late-iteration descent from hitting a noise floor.
    """

    def __init__(self, field: Field, degree: int = 3):
        g = field.grid
        self.grid = g
        sgn = _parity_sign(g)
        r_ext = np.concatenate([-g.r[::-1], g.r])
        if g.kind == "radial":
            vals_ext = np.concatenate([sgn * field.values[::-1], field.values])
            self.spl = make_interp_spline(r_ext, vals_ext, k=degree)
        else:
            vals_ext = np.concatenate([sgn * field.values[::-1, :], field.values],
                                      axis=0)
            self.spl = RectBivariateSpline(r_ext, g.z, vals_ext,
                                           kx=degree, ky=degree)

    def __call__(self, s: float) -> np.ndarray:
        """Values of u(s x) at the grid nodes."""
        g = self.grid
        if g.kind == "radial":
            pts = s * g.r
            out = self.spl(pts)
            out[pts > g.R] = 0.0
            return out
        rr = s * g.r
        zz = s * g.z
        out = self.spl(rr, zz)
        out[rr > g.R, :] = 0.0
        out[:, np.abs(zz) > g.Z] = 0.0
        return out


def _sample_scaled(field: Field, s: float) -> np.ndarray:
    return _Resampler(field)(s)


def dilate(field: Field, s: float, mode: str = "mass_preserving",
           resample: bool = True) -> Field:
    """Dilate a field: s^(N/2) u(s .) (mass-preserving) or u(s .) (plain).

    With ``resample`` the result lives on the same grid via cubic
    interpolation; the dilated support leaving the grid triggers a
    truncation warning with a mass-loss estimate.  Without resampling the
    result is represented exactly on the grid scaled by 1/s (same node
    count), for which the scaling laws hold to round-off.
    """
    if not s > 0:
        raise ValueError(f"dilation parameter must be positive, got {s}")
    if mode not in ("mass_preserving", "plain"):
        raise ValueError(f"unknown dilation mode {mode!r}")
    N = _ambient_dim(field.grid)
    amp = s ** (0.5 * N) if mode == "mass_preserving" else 1.0
    if not resample:
        return Field(field.grid.scaled(s), amp * field.values)
    if s == 1.0:
        return Field(field.grid, amp * field.values)
    out = Field(field.grid, amp * _sample_scaled(field, s))
    if s < 1.0:
        # support expands by 1/s: mass of u beyond s*R (and s*Z) leaves the grid
        g = field.grid
        u2 = np.abs(field.values) ** 2
        if g.kind == "radial":
            lost = np.where(g.r > s * g.R, g.W * u2, 0.0).sum()
        else:
            outside = (g.r[:, None] > s * g.R) | (np.abs(g.z[None, :]) > s * g.Z)
            lost = np.where(outside, g.W * u2, 0.0).sum()
        total = float(np.sum(g.W * u2))
        if total > 0 and lost > 1e-8 * total:
            warnings.warn(
                f"dilation by s={s} pushes support off the grid: estimated "
                f"mass loss {lost / total:.3e} relative", TruncationWarning)
    return out


def _G_int_scaled(field: Field, s: float, nl: Nonlinearity) -> float:
    """int G(s^(N/2) u) by pointwise composition on the original grid."""
    N = _ambient_dim(field.grid)
    with np.errstate(over="raise"):
        try:
            vals = nl.G(s ** (0.5 * N) * field.values)
        except FloatingPointError:
            raise OverflowError(f"G overflows at dilation parameter s={s}")
    if not np.all(np.isfinite(vals)):
        raise OverflowError(f"G overflows at dilation parameter s={s}")
    return integrate(field.grid, vals)


def _H_int_scaled(field: Field, s: float, nl: Nonlinearity) -> float:
    N = _ambient_dim(field.grid)
    with np.errstate(over="raise"):
        try:
            vals = nl.H(s ** (0.5 * N) * field.values)
        except FloatingPointError:
            raise OverflowError(f"H overflows at dilation parameter s={s}")
    if not np.all(np.isfinite(vals)):
        raise OverflowError(f"H overflows at dilation parameter s={s}")
    return integrate(field.grid, vals)


def fiber_phi(field: Field, s: float, spec: ProblemSpec, nl: Nonlinearity,
              bracket: Optional[float] = None) -> float:
    """Energy along the mass-preserving fiber at dilation parameter s."""
    if not s > 0:
        raise ValueError(f"s must be positive, got {s}")
    if bracket is None:
        bracket = bracket_mu_sq(field, spec)
    N = spec.N
    return (0.5 * s ** (2 * spec.m) * bracket
            - s ** (-N) * _G_int_scaled(field, s, nl))


class _XiEval:
    """xi(s) = int H(s^(N/2) u) (s^(N/2))^(-2_*), nondecreasing in s.

    For the power-sum family the mass-critical term is dilation-invariant,
    so xi(s) = a + b s^e with e = N(p-2)/2 - 2m > 0: the retraction root
    and the amplitude polish then need only two quadratures in total.
    """

    def __init__(self, field: Field, spec: ProblemSpec, nl: Nonlinearity):
        self.field = field
        self.spec = spec
        self.nl = nl
        if nl.is_power_sum:
            q = nl.two_star
            u = np.abs(field.values)
            self.a = nl.eta1 * (q - 2.0) / q * integrate(field.grid, u ** q)
            self.b = nl.eta2 * (nl.p - 2.0) / nl.p * integrate(field.grid, u ** nl.p)
            self.e = spec.N * (nl.p - 2.0) / 2.0 - 2.0 * spec.m

    def __call__(self, s: float) -> float:
        if self.nl.is_power_sum:
            return self.a + self.b * s ** self.e
        return (_H_int_scaled(self.field, s, self.nl)
                * s ** (-(self.spec.N + 2 * self.spec.m)))


@dataclass
class FiberResult:
    s_star: float
    phi_at_star: float
    plateau: tuple[float, float]
    retracted: Field


def _retraction_root(xi: _XiEval, spec: ProblemSpec, bracket: float) -> float:
    """Solve (N/2m) xi(s) = [u]_mu^2 for the fiber maximizer."""
    fac = spec.N / (2.0 * spec.m)
    if xi.nl.is_power_sum:
        rhs = bracket / fac - xi.a
        if rhs <= 0.0 or xi.b <= 0.0:
            raise RetractionError(
                "fiber has no maximizer: the supercritical term cannot reach "
                "the bracket level")
        return (rhs / xi.b) ** (1.0 / xi.e)

    def psi(s):
        return fac * xi(s) - bracket

    lo = hi = 1.0
    phi_val = psi(1.0)
    if phi_val < 0.0:
        for _ in range(200):
            hi *= 2.0
            if psi(hi) > 0.0:
                break
            lo = hi
        else:
            raise RetractionError("no sign change found while expanding the bracket")
    elif phi_val > 0.0:
        for _ in range(200):
            lo /= 2.0
            if psi(lo) < 0.0:
                break
            hi = lo
        else:
            raise RetractionError("no sign change found while shrinking the bracket")
    else:
        return 1.0
    return brentq(psi, lo, hi, xtol=1e-300, rtol=1e-15)


def _plateau(xi: _XiEval, s_star: float, spec: ProblemSpec,
             bracket: float, phi_star: float) -> tuple[float, float]:
    """Scan phi' near s_star; report the flat interval if one exists.

    phi'(s) = m s^(2m-1) ([u]^2 - (N/2m) xi(s)); at least three consecutive
    probes with |phi'| below 1e-12 max(1, |phi|) count as a plateau.
    """
    probes = np.geomspace(s_star / 8.0, 8.0 * s_star, 49)
    tol = 1e-12 * max(1.0, abs(phi_star))
    fac = spec.N / (2.0 * spec.m)
    flat = []
    for s in probes:
        dphi = spec.m * s ** (2 * spec.m - 1) * (bracket - fac * xi(s))
        flat.append(abs(dphi) < tol)
    # longest run of flat probes containing (or adjacent to) s_star
    best = (s_star, s_star)
    i = 0
    while i < len(probes):
        if flat[i]:
            j = i
            while j + 1 < len(probes) and flat[j + 1]:
                j += 1
            if j - i + 1 >= 3 and probes[i] <= s_star <= probes[j]:
                best = (float(probes[i]), float(probes[j]))
            i = j + 1
        else:
            i += 1
    return best


def _polish_amplitude(v: Field, spec: ProblemSpec, nl: Nonlinearity) -> Field:
    """Rescale amplitudes by c ~ 1 so the quadrature M(c v) vanishes.

    Resampling perturbs M by the interpolation error; a Newton polish on
    the amplitude restores manifold membership to round-off while moving
    the mass only at the same interpolation-error order.
    """
    B = bracket_mu_sq(v, spec)
    fac = spec.N / (2.0 * spec.m)
    g = v.grid
    if nl.is_power_sum:
        q = nl.two_star
        a = np.abs(v.values)
        hq = nl.eta1 * (q - 2.0) / q * integrate(g, a ** q)
        hp = nl.eta2 * (nl.p - 2.0) / nl.p * integrate(g, a ** nl.p)

        def M_and_dM(c):
            M = c * c * B - fac * (c ** q * hq + c ** nl.p * hp)
            dM = 2.0 * c * B - fac * (q * c ** (q - 1) * hq + nl.p * c ** (nl.p - 1) * hp)
            return M, dM
    else:
        def M_and_dM(c):
            vals = c * v.values
            M = c * c * B - fac * integrate(g, nl.H(vals))
            dM = 2.0 * c * B - fac * integrate(g, nl.h(vals) * v.values)
            return M, dM

    c = 1.0
    for _ in range(60):
        M, dM = M_and_dM(c)
        if abs(M) <= 1e-13 * max(1.0, B):
            break
        if dM == 0.0:
            break
        c -= M / dM
        if not (c > 0.0 and np.isfinite(c)):
            raise RetractionError("amplitude polish diverged")
    return Field(g, c * v.values)


def fiber_retract(field: Field, spec: ProblemSpec, nl: Nonlinearity) -> FiberResult:
    """Retract a field onto the constraint manifold along its fiber.

    Requires int H(u) > 0 and [u]_mu^2 / |u|_{2_*}^{2_*} > eta N/(2m); the
    retraction then exists and is located by a monotone bracket on phi'.
    """
    B = bracket_mu_sq(field, spec)
    H_int = integrate(field.grid, nl.H(field.values))
    if not H_int > 0.0:
        raise RetractionError(f"int H(u) = {H_int:.3e} is not positive")
    eta = eta_limit(nl, spec)
    if eta > 0.0:
        crit_norm = integrate(field.grid, np.abs(field.values) ** spec.two_star_low)
        if eta * spec.N / (2.0 * spec.m) * crit_norm >= B:
            raise RetractionError(
                "field too concentrated near the critical profile: "
                f"eta N/(2m) |u|_q^q = {eta * spec.N / (2 * spec.m) * crit_norm:.6g} "
                f">= [u]_mu^2 = {B:.6g}")
    xi = _XiEval(field, spec, nl)
    s_star = _retraction_root(xi, spec, B)
    phi_star = fiber_phi(field, s_star, spec, nl, bracket=B)
    plateau = _plateau(xi, s_star, spec, B, phi_star)
    v = dilate(field, s_star, "mass_preserving", resample=True)
    retracted = _polish_amplitude(v, spec, nl)
    return FiberResult(s_star, phi_star, plateau, retracted)


def retract_to_sphere(field: Field, spec: ProblemSpec, nl: Nonlinearity,
                      rho: float) -> Field:
    """Retract onto the intersection of the mass sphere and the manifold.

    The amplitude-polished fiber retraction and a subsequent mass rescale
    are inverse scalar operations, so alternating them oscillates at the
    interpolation-error scale.  Here both constraints are solved at once:
    for each dilation parameter the amplitude is pinned by the mass, and a
    secant iteration drives the quadrature value of M of the resampled,
    renormalized field to zero.  The result satisfies mass = rho and
    M = 0 exactly in quadrature.
    """
    B = bracket_mu_sq(field, spec)
    H_int = integrate(field.grid, nl.H(field.values))
    if not H_int > 0.0:
        raise RetractionError(f"int H(u) = {H_int:.3e} is not positive")
    xi = _XiEval(field, spec, nl)
    s0 = _retraction_root(xi, spec, B)
    resample = _Resampler(field, degree=5)
    g = field.grid
    fac = spec.N / (2.0 * spec.m)

    def M_of(s: float) -> tuple[float, np.ndarray]:
        vals = resample(s)
        m2 = float(np.sum(g.W * vals * vals))
        if not m2 > 0.0:
            raise RetractionError(
                f"dilated field lost its mass on the grid (s={s}); "
                "grid too coarse for this retraction")
        vals = math.sqrt(rho / m2) * vals
        B_s = bracket_mu_sq(Field(g, vals), spec)
        M = B_s - fac * integrate(g, nl.H(vals))
        return M, vals

    s1 = s0
    M1, vals1 = M_of(s1)
    scale = max(1.0, abs(B))
    if abs(M1) <= 1e-13 * scale:
        return Field(g, vals1)
    s2 = s1 * (1.0 + 1e-4)
    M2, vals2 = M_of(s2)
    best = (abs(M1), vals1)
    for _ in range(60):
        if M2 == M1:
            break
        s_new = s2 - M2 * (s2 - s1) / (M2 - M1)
        if not (s_new > 0.0 and np.isfinite(s_new)):
            break
        s1, M1 = s2, M2
        s2 = s_new
        M2, vals2 = M_of(s2)
        if abs(M2) < best[0]:
            best = (abs(M2), vals2)
        if abs(M2) <= 1e-13 * scale:
            break
    if best[0] > 1e-9 * scale:
        raise RetractionError(
            f"sphere retraction did not converge: |M| = {best[0]:.3e}")
    return Field(g, best[1])


def pohozaev_scale(field: Field, spec: ProblemSpec, nl: Nonlinearity) -> tuple[float, Field]:
    """Plain dilation u(r .) landing on the constraint manifold.

    The mass is not preserved: it scales by r^(-N).  The general-order
    solve of M(u(r .)) = 0 gives the exponent 1/(2m).
    """
    H_int = integrate(field.grid, nl.H(field.values))
    if not H_int > 0.0:
        raise RetractionError(f"int H(u) = {H_int:.3e} is not positive")
    B = bracket_mu_sq(field, spec)
    r = (spec.N / (2.0 * spec.m) * H_int / B) ** (1.0 / (2.0 * spec.m))
    return r, dilate(field, r, "plain", resample=True)
