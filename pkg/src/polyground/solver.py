"""Constrained energy minimization on the mass ball intersected with the
Pohozaev-type manifold, Lagrange-multiplier extraction, and an independent
shooting oracle for pure-power radial ground states.

The minimizer alternates (1) fiber retraction onto the manifold, (2) a
preconditioned (Sobolev) gradient step on the energy with Armijo
backtracking, (3) projection back into the mass ball, and (4) re-retraction.
The multiplier is the unique value making the Nehari pairing exact, so the
preconditioned residual of the full stationary equation is the convergence
monitor.
"""

from __future__ import annotations

import os
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import CubicSpline

from .field import (Field, Grid, bracket_mu_sq, integrate, mass,
                    seminorm_m_sq, sobolev_gradient)
from .fiber import RetractionError, fiber_retract, retract_to_sphere
from .model import Nonlinearity, ProblemSpec, eta_limit, mass_threshold_ok


class ThresholdError(RuntimeError):
    """The small-mass threshold fails: the infimum may be zero or unattained."""


@dataclass
class SolverOptions:
    tol: float = 1e-6
    tol_constraint: float = 1e-10
    max_iter: int = 5000
    armijo: float = 1e-4
    backtrack: float = 0.5
    alpha0: float = 1.0
    c_star: Optional[float] = None
    sign_projection: bool = True
    init: str = "gaussian"
    init_width: Optional[float] = None


@dataclass
class SolveResult:
    profile: Field
    lam: float
    energy: float
    iterations: int
    residual_pde: float
    residual_nehari: float
    residual_pohozaev: float
    on_sphere: bool
    converged: bool
    trace: list = dc_field(default_factory=list)  # rows (J, |M|, step)


def lagrange_multiplier(field: Field, spec: ProblemSpec, nl: Nonlinearity) -> float:
    """lambda = (int g(u)u - [u]_mu^2) / mass, zeroing the Nehari pairing."""
    m2 = mass(field)
    if not m2 > 0.0:
        raise ValueError("field has zero mass")
    gu_u = integrate(field.grid, nl.g(field.values) * field.values)
    lam = (gu_u - bracket_mu_sq(field, spec)) / m2
    if lam <= 0.0:
        warnings.warn(f"non-physical multiplier lambda = {lam:.6g} <= 0")
    return lam


def _gaussian_at(grid: Grid, spec: ProblemSpec, sigma: float) -> Field:
    if grid.kind == "radial":
        vals = np.exp(-grid.r ** 2 / (2.0 * sigma ** 2))
        if grid.parity == "odd":
            vals = grid.r * vals
    else:
        rr = grid.r[:, None]
        zz = grid.z[None, :]
        vals = np.exp(-(rr ** 2 + zz ** 2) / (2.0 * sigma ** 2))
        if grid.parity == "odd":
            vals = rr * vals
    u = Field(grid, vals)
    return Field(grid, vals * math.sqrt(spec.rho / mass(u)))


def default_init(grid: Grid, spec: ProblemSpec, nl: Optional[Nonlinearity] = None,
                 width: Optional[float] = None) -> Field:
    """Gaussian bump normalized to the prescribed mass; an extra factor r
    keeps the profile in the admissible cone when the potential is singular.

    When the nonlinearity is given, the width is tuned by a fixed-point
    iteration so the first fiber retraction has parameter close to 1:
    retracting a poorly scaled bump would otherwise dilate it below the
    grid resolution.
    """
    sigma = width if width is not None else grid.R / 8.0
    u = _gaussian_at(grid, spec, sigma)
    if width is None and nl is not None and nl.is_power_sum:
        from .fiber import _XiEval, _retraction_root
        for _ in range(8):
            s_star = _retraction_root(_XiEval(u, spec, nl), spec,
                                      bracket_mu_sq(u, spec))
            if abs(s_star - 1.0) < 0.05:
                break
            sigma = max(min(sigma / s_star, grid.R / 6.0), 8.0 * grid.h_r)
            u = _gaussian_at(grid, spec, sigma)
    return u


def _threshold_guard(spec: ProblemSpec, nl: Nonlinearity, options: SolverOptions):
    eta = eta_limit(nl, spec)
    if eta == 0.0:
        return
    c_star = options.c_star
    if c_star is None:
        if spec.m == 1 and spec.N in (2, 3):
            from .diagnostics import gn_constant
            c_star = gn_constant(spec, spec.two_star_low).c_best
        else:
            raise ThresholdError(
                "mass-critical term present but no Gagliardo-Nirenberg "
                "constant available; supply SolverOptions.c_star")
    check = mass_threshold_ok(spec, eta, c_star)
    if not check.ok:
        raise ThresholdError(
            f"threshold violated: (N/2m) eta C_*^2_* rho^(2m/N)/tau = "
            f"{check.lhs:.6g} >= 1; the constrained infimum may be 0 or unattained")


def _nehari_abs(field: Field, lam: float, spec: ProblemSpec, nl: Nonlinearity) -> float:
    return (bracket_mu_sq(field, spec) + lam * mass(field)
            - integrate(field.grid, nl.g(field.values) * field.values))


def _pohozaev_abs(field: Field, lam: float, spec: ProblemSpec, nl: Nonlinearity) -> float:
    B = bracket_mu_sq(field, spec)
    G_int = integrate(field.grid, nl.G(field.values))
    m2 = mass(field)
    return (spec.N - 2 * spec.m) * B - 2.0 * spec.N * (G_int - 0.5 * lam * m2)


def minimize_on_ball(init: Field, spec: ProblemSpec, nl: Nonlinearity,
                     options: Optional[SolverOptions] = None) -> SolveResult:
    """Minimize the energy over the mass ball intersected with the manifold.

    Raises ThresholdError when the small-mass condition fails and
    RetractionError when the initial field is not retractable.  Returns the
    best iterate with a per-iteration trace whether or not the residual
    tolerance was reached within the iteration budget.
    """
    options = options or SolverOptions()
    _threshold_guard(spec, nl, options)
    grid = init.grid

    u = init.copy()
    m0 = mass(u)
    if m0 > spec.rho:
        u = Field(grid, u.values * math.sqrt(spec.rho / m0))
    sign_proj = options.sign_projection and spec.m == 1 and np.all(init.values >= 0.0)

    # The minimum over the ball is attained on the sphere; keeping iterates
    # exactly on sphere-and-manifold (in quadrature) makes the Armijo model
    # consistent, while the mass projection below still guards each trial.
    u = retract_to_sphere(u, spec, nl, spec.rho)
    w_ip = grid.W

    def J_of(v: Field) -> float:
        return (0.5 * bracket_mu_sq(v, spec)
                - integrate(grid, nl.G(v.values)))

    J = J_of(u)
    alpha = options.alpha0
    trace = []
    converged = False
    res_rel = math.inf
    lam = math.nan
    iterations = 0

    for iterations in range(1, options.max_iter + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lam = lagrange_multiplier(u, spec, nl)
        direction, residual = sobolev_gradient(u, spec, nl, lam)
        m_u = mass(u)
        u_norm = math.sqrt(m_u)
        res_rel = math.sqrt(max(float(np.sum(w_ip * direction.values ** 2)), 0.0)) / u_norm
        B = bracket_mu_sq(u, spec)
        M_rel = abs(B - spec.N / (2.0 * spec.m)
                    * integrate(grid, nl.H(u.values))) / B
        if res_rel < options.tol and M_rel < options.tol_constraint:
            converged = True
            trace.append((J, M_rel * B, 0.0))
            break

        # Tangentialize against u in the weighted inner product: the Nehari
        # choice of lambda makes <res, u>_W = 0, so the Armijo slope along
        # the projected direction is exactly <res, d>_W and the mass moves
        # only at second order (kept in the ball by the projection below).
        coef = float(np.sum(w_ip * u.values * direction.values)) / m_u
        d_tan = direction.values - coef * u.values
        slope = float(np.sum(w_ip * residual.values * d_tan))
        if slope <= 0.0:
            slope = float(np.sum(w_ip * d_tan * d_tan))
        alpha = min(alpha * 2.0, 1.0e3)
        accepted = False
        for _ in range(50):
            vals = u.values - alpha * d_tan
            if sign_proj:
                vals = np.abs(vals)
            v = Field(grid, vals)
            mv = mass(v)
            if mv > spec.rho:
                v = Field(grid, v.values * math.sqrt(spec.rho / mv))
            try:
                v = retract_to_sphere(v, spec, nl, spec.rho)
            except RetractionError:
                alpha *= options.backtrack
                continue
            J_new = J_of(v)
            if J_new <= J - options.armijo * alpha * slope:
                accepted = True
                break
            alpha *= options.backtrack
        trace.append((J, M_rel * B, alpha if accepted else 0.0))
        if not accepted:
            break
        u, J = v, J_new

    nehari = _nehari_abs(u, lam, spec, nl)
    poho = _pohozaev_abs(u, lam, spec, nl)
    B = bracket_mu_sq(u, spec)
    scale = max(1.0, B)
    m2 = mass(u)
    return SolveResult(
        profile=u,
        lam=lam,
        energy=J,
        iterations=iterations,
        residual_pde=res_rel,
        residual_nehari=abs(nehari) / scale,
        residual_pohozaev=abs(poho) / scale,
        on_sphere=m2 >= spec.rho * (1.0 - 1e-8),
        converged=converged,
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Shooting oracle: radial ground state of -Delta w + w = |w|^(p-2) w
# ---------------------------------------------------------------------------

@dataclass
class ShootingResult:
    N: int
    p: float
    w0: float
    r: np.ndarray
    w: np.ndarray
    mass: float        # |w|_2^2
    grad_sq: float     # |grad w|_2^2
    p_norm: float      # |w|_p^p
    r_cut: float

    def profile(self, r):
        """Evaluate the decaying profile, analytic tail beyond the cut."""
        r = np.asarray(r, dtype=float)
        spl = CubicSpline(self.r, self.w, extrapolate=False)
        out = np.where(np.isnan(spl(np.abs(r))), 0.0, np.nan_to_num(spl(np.abs(r))))
        tail = np.abs(r) >= self.r_cut
        if np.any(tail):
            rc = self.r_cut
            wc = float(spl(rc))
            rt = np.abs(r[tail])
            out[tail] = wc * (rt / rc) ** (-(self.N - 1) / 2.0) * np.exp(-(rt - rc))
        return out


def _shoot_once(w0: float, N: int, p: float, r_max: float):
    """Integrate outward; classify as overshoot (+1), undershoot (-1), or
    on-separatrix within resolution (0)."""

    def rhs(r, y):
        w, dw = y
        return [dw, w - np.abs(w) ** (p - 2) * w - (N - 1) / r * dw]

    def hit_zero(r, y):
        return y[0]
    hit_zero.terminal = True
    hit_zero.direction = -1

    def turn_up(r, y):
        return y[1]
    turn_up.terminal = True
    turn_up.direction = 1

    r0 = 1e-8
    a = (w0 - w0 ** (p - 1)) / (2.0 * N)
    y0 = [w0 + a * r0 ** 2, 2.0 * a * r0]
    sol = solve_ivp(rhs, (r0, r_max), y0, method="DOP853",
                    rtol=1e-12, atol=1e-14, events=(hit_zero, turn_up),
                    dense_output=True)
    if sol.t_events[0].size:
        return 1, sol
    if sol.t_events[1].size:
        return -1, sol
    return 0, sol


def shooting_oracle(N: int, p: float, tol: float = 1e-13,
                    r_max: float = 40.0) -> ShootingResult:
    """Ground state of  w'' + (N-1)/r w' - w + |w|^(p-2) w = 0,  w'(0) = 0,
    w(infinity) = 0, by bisection on w(0).

    Serves as the independent reference for the m = 1, mu = 0, pure-power
    problems (N in {2, 3}): reports |w|_2^2, |grad w|_2^2, and |w|_p^p.
    """
    if N not in (2, 3):
        raise ValueError(f"shooting oracle supports N in {{2, 3}}, got N={N}")
    if not p > 2:
        raise ValueError(f"need p > 2, got {p}")
    # initial value must exceed the zero-energy level of the effective well
    lo = (p / 2.0) ** (1.0 / (p - 2.0))
    hi = lo
    for _ in range(100):
        hi *= 1.5
        side, _ = _shoot_once(hi, N, p, r_max)
        if side > 0:
            break
    else:
        raise RuntimeError("failed to bracket the shooting parameter from above")
    for _ in range(200):
        if hi - lo <= tol * hi:
            break
        mid = 0.5 * (lo + hi)
        side, _ = _shoot_once(mid, N, p, r_max)
        if side > 0:
            hi = mid
        else:
            lo = mid
    w0 = 0.5 * (lo + hi)
    _, sol = _shoot_once(w0, N, p, r_max)

    # keep the solved branch while it stays on the separatrix, then attach
    # the exponential tail analytically
    r_end = sol.t[-1]
    rr = np.linspace(1e-8, r_end, 20001)
    ww = sol.sol(rr)[0]
    floor = 1e-7 * w0
    below = np.nonzero(np.abs(ww) < floor)[0]
    cut = below[0] if below.size else len(rr) - 1
    rr, ww = rr[:cut + 1], ww[:cut + 1]
    r_cut = rr[-1]

    omega = 2.0 * math.pi ** (N / 2.0) / math.gamma(N / 2.0)
    meas = omega * rr ** (N - 1)
    dw = np.gradient(ww, rr)
    w_mass = simpson(meas * ww ** 2, x=rr)
    w_p = simpson(meas * np.abs(ww) ** p, x=rr)
    # grad norm via the Nehari identity of the ODE (more accurate than
    # differentiating the dense output): |grad w|^2 = |w|_p^p - |w|_2^2
    grad_sq = w_p - w_mass
    # analytic tail contributions w ~ w(rc) (r/rc)^(-(N-1)/2) e^(rc - r)
    wc = ww[-1]
    rt = np.linspace(r_cut, r_cut + 40.0, 4001)
    wt = wc * (rt / r_cut) ** (-(N - 1) / 2.0) * np.exp(-(rt - r_cut))
    mt = omega * rt ** (N - 1)
    w_mass += simpson(mt * wt ** 2, x=rt)
    w_p += simpson(mt * np.abs(wt) ** p, x=rt)
    grad_sq = w_p - w_mass

    return ShootingResult(N=N, p=p, w0=w0, r=rr, w=ww,
                          mass=w_mass, grad_sq=grad_sq, p_norm=w_p, r_cut=r_cut)


# ---------------------------------------------------------------------------
# Mass scan
# ---------------------------------------------------------------------------

@dataclass
class MassScanRow:
    rho: float
    lam: float
    energy: float
    residual_pde: float
    residual_nehari: float
    residual_pohozaev: float
    converged: bool
    error: Optional[str] = None


def mass_scan(spec: ProblemSpec, nl: Nonlinearity, rho_list, grid: Grid,
              options: Optional[SolverOptions] = None,
              warm_start: bool = True) -> list[MassScanRow]:
    """Solve across prescribed masses; failures are recorded per row.

    With warm starts the rows run sequentially, each initialized from the
    previous profile rescaled to the new mass.  Without warm starts the
    rows are independent and run on a worker pool bounded by the
    POLYGROUND_THREADS environment variable.
    """
    options = options or SolverOptions()

    def solve_row(rho: float, init: Optional[Field]) -> tuple[MassScanRow, Optional[Field]]:
        spec_row = ProblemSpec(N=spec.N, K=spec.K, m=spec.m, mu=spec.mu, rho=rho)
        nl_row = nl if not nl.is_power_sum else Nonlinearity.power_sum(
            nl.eta1, nl.eta2, nl.p, spec_row)
        try:
            u0 = init if init is not None else default_init(grid, spec_row,
                                                            options.init_width)
            u0 = Field(grid, u0.values * math.sqrt(rho / mass(u0)))
            res = minimize_on_ball(u0, spec_row, nl_row, options)
            row = MassScanRow(rho, res.lam, res.energy, res.residual_pde,
                              res.residual_nehari, res.residual_pohozaev,
                              res.converged)
            return row, res.profile
        except (ThresholdError, RetractionError, ValueError) as exc:
            return MassScanRow(rho, math.nan, math.nan, math.nan, math.nan,
                               math.nan, False, error=str(exc)), None

    rows: list[MassScanRow] = []
    if warm_start:
        prev = None
        for rho in rho_list:
            row, prev_new = solve_row(rho, prev)
            rows.append(row)
            if prev_new is not None:
                prev = prev_new
    else:
        workers = int(os.environ.get("POLYGROUND_THREADS", "1")) or 1
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for row, _ in pool.map(lambda rho: solve_row(rho, None), rho_list):
                rows.append(row)
    return rows
