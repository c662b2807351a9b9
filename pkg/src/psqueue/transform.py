"""Stationary system-size transform and EPS sojourn-time transform.

Two independent routes compute E exp(-u Q):

* the *theorem* route evaluates the closed-form kernel expressions (h1, h4,
  kappa1..3) with the resolvent R, literally as displayed;
* the *Picard* route solves the branching fixed-point equation
      phi(t) = E[ exp(-u chi(t) - v C(t)) exp{ int (f(phi(t-y)) - 1) rate dV(y) } ]
  by time marching in virtual time, together with the linear equation for
  psi = -d phi / dv at v = 0.

Both are combined through the same renewal identity
      E exp(-u Q) = (1 - rho) + rate (1 - rho) int_0^inf f'(phi(t; u, 0)) psi(t; u) dt.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .model import (ModelValidationError, QueueModel, pgf_derivative, pgf_eval, traffic_intensity,
                    validate_model)
from .numerics import EvalCounter, gauss_legendre_pieces, integrate, talbot_invert, talbot_nodes
from .policies import PolicyKernel, eps_kernel
from .resolvent import CrossCheckLog, GridFunction, ResolventSpec, resolvent_at, resolvent_table

DEVIATION_TOL = 1e-3
_Z_KINKS = 6


class ConvergenceError(ArithmeticError):
    pass


@dataclass
class KernelContext:
    """Everything the transform routines need for one problem instance.

    ``step`` is the virtual-time grid spacing of the Picard solver (default
    0.01 scaled by the longest virtual lifetime). ``memory_form`` selects
    ``reduced`` memory f(phi(t-y; u, v)) - 1 or the ``swapped`` variant
    f(phi(t-y; v, u) - 1). ``resolvent_override`` replaces the tabulated
    resolvent in the theorem route by a callable R(t, z).
    """

    model: QueueModel
    pipeline: str = "picard"
    step: float | None = None
    picard_tol: float = 1e-10
    max_iter: int = 100
    t_max: float | None = None
    talbot_order: int = 24
    fd_step: float = 1e-5
    memory_form: str = "reduced"
    z_nodes: int = 8
    t_nodes: int = 8
    richardson: bool = True
    nu_density: Callable | None = None
    resolvent_override: Callable | None = None
    cross_check_closed_forms: bool = False
    deviations: list = field(default_factory=list)
    cross_checks: CrossCheckLog = field(default_factory=CrossCheckLog)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.pipeline not in ("picard", "theorem", "both"):
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if self.memory_form not in ("reduced", "swapped"):
            raise ValueError(f"unknown memory form {self.memory_form!r}")
        policy = self.model.policy or eps_kernel()
        self.model = replace(self.model, policy=policy.bind(self.model.arrival.rate))
        validate_model(self.model, stationary=False)
        if self.nu_density is None:
            m = self.model.service.support_max
            self.nu_density = lambda z, m=m: np.where((np.asarray(z) > m) & (np.asarray(z) <= m + 1), 1.0, 0.0)

    @property
    def policy(self) -> PolicyKernel:
        return self.model.policy

    @property
    def rate(self) -> float:
        return self.model.arrival.rate

    @property
    def rho(self) -> float:
        return traffic_intensity(self.model)

    @property
    def n(self) -> int:
        return max(self.model.arrival.degree, 1)

    def require_stable(self) -> None:
        rho = self.rho
        if not rho < 1:
            raise ModelValidationError([f"rho = {rho:.6g} ≥ 1"], unstable=True)

    def f(self, x):
        return pgf_eval(self.model.arrival, x)

    def fprime(self, x):
        return pgf_derivative(self.model.arrival, x)

    def max_lifetime(self) -> float:
        pol = self.policy
        m = self.model.service.support_max
        return float(max(pol.lifetime(m, c) for c in range(pol.n_classes)))

    def picard_step(self) -> float:
        if self.step is not None:
            return float(self.step)
        return 0.01 * max(1.0, self.max_lifetime() / 2.0)


@dataclass(frozen=True)
class PhiSolution:
    """Picard solution on a uniform virtual-time grid.

    ``values[k, i]`` is phi(t_i) for the k-th (u, v) pair and ``psi`` the
    matching -d phi / dv (None when not computed). ``residual`` is the largest
    fixed-point defect of the discretised equation over the grid.
    """

    t_grid: np.ndarray
    us: np.ndarray
    vs: np.ndarray
    values: np.ndarray
    psi: np.ndarray | None
    residual: float
    step: float

    def __call__(self, t, k: int = 0):
        return np.interp(t, self.t_grid, self.values[k].real) + 1j * np.interp(
            t, self.t_grid, self.values[k].imag) if np.iscomplexobj(self.values) else np.interp(
            t, self.t_grid, self.values[k])


@dataclass
class StationaryTransform:
    """u -> E exp(-u Q); ``eval`` accepts scalars or arrays (complex allowed when the route supports it)."""

    eval: Callable
    rho: float
    provenance: str
    meta: dict = field(default_factory=dict)

    def __call__(self, u):
        return self.eval(u)


# ---------------------------------------------------------------------------
# Picard route

@dataclass
class _JobTypes:
    q: np.ndarray        # probability of each (requirement node, class) type
    ell: np.ndarray
    cls: np.ndarray
    life: np.ndarray
    dV: np.ndarray       # dV[j, m-1] = V_j(m h) - V_j((m-1) h), m = 1..K


def _job_types(ctx: KernelContext, h: float, normalize: bool = True) -> _JobTypes:
    pol = ctx.policy
    if normalize and pol.kind == "linear":
        # dynamics only depend on weight ratios
        top = max(pol.weights)
        pol = replace(pol, weights=tuple(w / top for w in pol.weights))
    svc = ctx.model.service
    h_ell = min(h, svc.support_max / 200.0)
    nodes, wts = svc.quadrature_cells(h_ell)
    q, ell, cls = [], [], []
    for c, mu in enumerate(pol.probs):
        if mu <= 0:
            continue
        q.append(mu * wts)
        ell.append(nodes)
        cls.append(np.full(len(nodes), c))
    q = np.concatenate(q)
    ell = np.concatenate(ell)
    cls = np.concatenate(cls)
    life = np.asarray(pol.lifetime(ell, cls), dtype=float)
    if not np.all(np.isfinite(life)):
        raise ValueError(f"policy {pol.name} has infinite virtual lifetimes; the Picard route needs finite ones")
    K = int(math.ceil(life.max() / h + 1e-9)) + 1
    grid = h * np.arange(K + 1)
    V = pol.attained(grid[None, :], ell[:, None], cls[:, None])
    dV = np.diff(V, axis=1)
    return _JobTypes(q, ell, cls, life, dV)


def _cell_bounds(t_i: float, h: float):
    lo = max(t_i - 0.5 * h, 0.0)
    return lo, t_i + 0.5 * h


def _march(ctx: KernelContext, h: float, types: _JobTypes, root: Callable, us: np.ndarray,
           history_F: np.ndarray | None, with_psi: bool, n_steps: int | None, partner=None,
           stop_tol: float = 1e-13, F0_left=None):
    """Time-march the fixed-point equation for all parameter columns at once.

    ``root(i)`` returns (E0, Ec), both (U, J): the cell-averaged root factor
    exp(-u chi - ...) and the cell average of C exp(-u chi) (used for psi).
    ``history_F`` holds F = f(phi) - 1 at times -K h .. -h (U, K); zeros if None.
    ``F0_left`` is the history's left limit at 0 (zeros if None); the memory
    trapezoid never straddles t = 0, where the solution may jump.
    ``partner`` (swapped memory) maps each column to the column whose phi
    feeds its memory term.
    """
    rate = ctx.rate
    U = len(us)
    J, K = types.dV.shape
    fdt = complex if np.iscomplexobj(us) else float
    L_span = K
    if n_steps is None:
        cap = int(math.ceil((ctx.t_max if ctx.t_max else 400.0 * max(1.0, types.life.max())) / h))
    else:
        cap = n_steps
    n_alloc = cap + 1
    F = np.zeros((U, K + n_alloc), dtype=fdt)
    G = np.zeros((U, K + n_alloc), dtype=fdt)
    if history_F is not None:
        F[:, :K] = history_F
    F0m = np.zeros(U, dtype=fdt) if F0_left is None else np.asarray(F0_left, dtype=fdt)
    phi = np.zeros((U, n_alloc), dtype=fdt)
    psi = np.zeros((U, n_alloc), dtype=fdt) if with_psi else None
    dV1 = types.dV[:, 0]
    # reversed increments for m = K .. 2 against midpoints of the window
    DVrev = types.dV[:, :0:-1].T  # (K-1, J): row r <-> m = K - r
    prefix = _prefix_structure(types.dV[:, 1:])
    dv_vals, group = np.unique(dV1, return_inverse=True)
    onehot = np.zeros((J, len(dv_vals)))
    onehot[np.arange(J), group] = 1.0

    def memory(mid):
        if prefix is None:
            return mid @ DVrev
        # rows of dV are a constant run, one partial cell, then zeros
        level, n_run, part = prefix
        fwd = mid[:, ::-1]
        cs = np.concatenate([np.zeros((fwd.shape[0], 1), fwd.dtype), np.cumsum(fwd, axis=1)], axis=1)
        last = np.minimum(n_run, fwd.shape[1] - 1)
        tail = fwd[:, last] * part if fwd.shape[1] else 0.0
        return cs[:, n_run] * level + tail
    q = types.q
    residual = 0.0
    last = 0
    quiet = 0
    for i in range(n_alloc):
        off = K + i
        W = F[:, off - K:off]
        mid = 0.5 * (W[:, :-1] + W[:, 1:])
        r0 = K - 1 - i
        if 0 <= r0 <= K - 2:
            mid[:, r0] = 0.5 * (W[:, r0] + F0m)
        P = memory(mid) + 0.5 * W[:, -1:] * dV1[None, :]
        # weight of the implicit current value (zero at t = 0, where F0_left is used)
        imp = 0.5 if i > 0 else 0.0
        if i == 0:
            P = P + 0.5 * F0m[:, None] * dV1[None, :]
        E0, Ec = root(i)
        Fi = F[:, off - 1].copy()
        # only the implicit factor changes inside the iteration; group types by dV1
        base = E0 * np.exp(rate * P)
        Qg = (base * q) @ onehot
        for it in range(ctx.max_iter):
            ph = (Qg * np.exp(rate * imp * Fi[:, None] * dv_vals[None, :])).sum(axis=1)
            if partner is None:
                Fnew = ctx.f(ph) - 1.0
            else:
                Fnew = ctx.f(ph[partner] - 1.0)
            delta = np.max(np.abs(Fnew - Fi)) if U else 0.0
            Fi = Fnew
            if delta <= ctx.picard_tol * 1e-3:
                break
        else:
            raise ConvergenceError(f"fixed point did not converge at t = {i * h:g} (defect {delta:.3g})")
        extra = np.exp(rate * imp * Fi[:, None] * dv_vals[None, :])
        ph = (Qg * extra).sum(axis=1)
        check = (ctx.f(ph) - 1.0) if partner is None else ctx.f(ph[partner] - 1.0)
        residual = max(residual, float(np.max(np.abs(check - Fi))) if U else 0.0)
        M = np.exp(rate * P) * extra[:, group]
        phi[:, i] = ph
        F[:, off] = Fi
        if with_psi:
            Wg = G[:, off - K:off]
            midg = 0.5 * (Wg[:, :-1] + Wg[:, 1:])
            if 0 <= r0 <= K - 2:
                midg[:, r0] = 0.5 * Wg[:, r0]
            Pg = memory(midg) + 0.5 * Wg[:, -1:] * dV1[None, :]
            A = (Ec * M) @ q + rate * ((E0 * M * Pg) @ q)
            B = imp * rate * ((E0 * M) @ (q * dV1))
            fp = ctx.fprime(ph)
            ps = A / (1.0 - B * fp)
            psi[:, i] = ps
            G[:, off] = fp * ps
        last = i
        if n_steps is None and i * h > types.life.max() + h:
            tail = np.max(np.abs(Fi))
            if with_psi:
                tail = max(tail, float(np.max(np.abs(G[:, off]))))
            quiet = quiet + 1 if tail < stop_tol else 0
            if quiet >= L_span:
                break
    else:
        if n_steps is None:
            raise ConvergenceError(f"solution did not settle before t = {cap * h:g}")
    n = last + 1
    return phi[:, :n], (psi[:, :n] if with_psi else None), residual


def _prefix_structure(dv: np.ndarray):
    """(level, run length, partial) per row if every row of ``dv`` is a constant
    run followed by at most one partial value and zeros, else None."""
    J, n = dv.shape
    if n == 0:
        return None
    level = dv[:, 0].copy()
    nz = dv != 0
    n_run = np.zeros(J, dtype=int)
    part = np.zeros(J)
    for j in range(J):
        k = int(np.count_nonzero(nz[j]))
        if k and not np.all(nz[j, :k]):
            return None
        run = dv[j, :k]
        if k == 0:
            continue
        if np.allclose(run[:-1], level[j], rtol=1e-12, atol=0):
            if np.isclose(run[-1], level[j], rtol=1e-12, atol=0):
                n_run[j], part[j] = k, 0.0
            else:
                n_run[j], part[j] = k - 1, run[-1]
        else:
            return None
    return level, n_run, part


def _size_root(ctx: KernelContext, h: float, types: _JobTypes, us, vs):
    """Cell averages of exp(-u chi - v C) and C exp(-u chi) for the system-size metric."""
    pol = ctx.policy
    if pol.kind == "linear":
        top = max(pol.weights)
        pol = replace(pol, weights=tuple(w / top for w in pol.weights))
    eu = np.exp(-np.asarray(us))[:, None]
    vs = np.asarray(vs)

    def root(i):
        lo, hi = _cell_bounds(i * h, h)
        width = hi - lo
        alive = np.clip(np.minimum(hi, types.life) - lo, 0.0, None) / width
        Vhi = pol.attained(np.minimum(hi, types.life), types.ell, types.cls)
        Vlo = pol.attained(np.minimum(lo, types.life), types.ell, types.cls)
        cbar = (Vhi - Vlo) / width
        if np.any(vs != 0):
            # v enters through exp(-v C); use the cell-average rate (exact when C is constant)
            ev = np.exp(-vs[:, None] * cbar[None, :])
            E0 = 1.0 + alive[None, :] * (eu * ev - 1.0)
        else:
            E0 = 1.0 + alive[None, :] * (eu - 1.0)
        Ec = eu * cbar[None, :] * np.ones_like(E0)
        return E0, Ec

    return root


def picard_solve_phi(ctx: KernelContext, u, v=0.0, t_max: float | None = None,
                     picard_tol: float | None = None, with_psi: bool = True) -> PhiSolution:
    """Solve for phi(t; u, v) (and psi) on a uniform grid up to ``t_max``.

    ``u`` and ``v`` may be arrays (broadcast together); complex ``u`` is allowed.
    Without ``t_max`` the march stops once phi has returned to 1 and psi to 0.
    """
    if picard_tol is not None:
        ctx = replace(ctx, picard_tol=picard_tol, _cache={})
    us, vs = np.broadcast_arrays(np.atleast_1d(np.asarray(u)), np.atleast_1d(np.asarray(v, dtype=float)))
    if np.iscomplexobj(us):
        us = us.astype(complex)
    else:
        us = us.astype(float)
    h = ctx.picard_step()
    types = _job_types(ctx, h)
    partner = None
    if ctx.memory_form == "swapped":
        # solve (u, v) and (v, u) together; each column's memory reads its partner
        n0 = len(us)
        us, vs = np.concatenate([us, vs.astype(us.dtype)]), np.concatenate([vs, us.real])
        partner = np.concatenate([np.arange(n0, 2 * n0), np.arange(n0)])
        with_psi = False
    root = _size_root(ctx, h, types, us, vs)
    n_steps = None if t_max is None else int(math.ceil(t_max / h - 1e-9))
    phi, psi, res = _march(ctx, h, types, root, us, None, with_psi, n_steps, partner)
    if partner is not None:
        n0 = len(us) // 2
        phi, us, vs = phi[:n0], us[:n0], vs[:n0]
    if res > ctx.picard_tol:
        raise ConvergenceError(f"Picard residual {res:.3g} exceeds tolerance {ctx.picard_tol:.3g}")
    t_grid = h * np.arange(phi.shape[1])
    return PhiSolution(t_grid, us, vs, phi, psi, res, h)


def _outer_integral(ctx: KernelContext, sol: PhiSolution) -> np.ndarray:
    G = ctx.fprime(sol.values) * sol.psi
    w = np.full(G.shape[1], sol.step)
    w[0] = 0.5 * sol.step
    return G @ w


def _picard_values(ctx: KernelContext, us: np.ndarray, h: float) -> np.ndarray:
    c2 = replace(ctx, step=h, _cache={})
    rho = ctx.rho
    if ctx.memory_form == "swapped":
        # psi by central difference in v
        dv = ctx.fd_step
        plus = picard_solve_phi(c2, us, dv, with_psi=False)
        minus = picard_solve_phi(c2, us, -dv, with_psi=False)
        base = picard_solve_phi(c2, us, 0.0, with_psi=False)
        n = min(plus.values.shape[1], minus.values.shape[1], base.values.shape[1])
        psi = -(plus.values[:, :n] - minus.values[:, :n]) / (2 * dv)
        sol = PhiSolution(base.t_grid[:n], us, np.zeros_like(us, dtype=float), base.values[:, :n], psi,
                          base.residual, base.step)
    else:
        sol = picard_solve_phi(c2, us, 0.0)
    return (1.0 - rho) + ctx.rate * (1.0 - rho) * _outer_integral(ctx, sol)


def stationary_transform_picard(ctx: KernelContext, u):
    """E exp(-u Q) from the Picard route; ``u`` scalar or array, complex allowed.

    With ``ctx.richardson`` the grid-spacing error (second order) is removed
    by combining spacings h and 2h.
    """
    ctx.require_stable()
    scalar = np.ndim(u) == 0
    us = np.atleast_1d(np.asarray(u))
    us = us.astype(complex) if np.iscomplexobj(us) else us.astype(float)
    key = ("picard", us.tobytes(), us.dtype.str)
    if key not in ctx._cache:
        h = ctx.picard_step()
        val = _picard_values(ctx, us, h)
        if ctx.richardson:
            coarse = _picard_values(ctx, us, 2 * h)
            val = (4.0 * val - coarse) / 3.0
        if not np.iscomplexobj(val):
            val = val.real
        ctx._cache[key] = val
    val = ctx._cache[key]
    return val[0] if scalar else val.copy()


# ---------------------------------------------------------------------------
# theorem route (literal kernel expressions)

def _z_breaks(ctx: KernelContext, t: float, a: float, b: float) -> list[float]:
    """Points in (a, b) where the z-integrand at time t jumps or has a kink."""
    pol = ctx.policy
    pts = []
    for c in range(pol.n_classes):
        # chi(t; z) and C(t; z) switch off where the lifetime of z equals t
        lo, hi = pol.lifetime(a, c), pol.lifetime(b, c)
        if lo < t < hi < math.inf:
            pts.append(brentq(lambda z: pol.lifetime(z, c) - t, a, b, xtol=1e-14))
        if pol.kind == "linear":
            # the delay resolvent of h2 has kinks where t - L(z) is a multiple of L(z)
            pts += [t * float(pol._nu(c)) / k for k in range(2, _Z_KINKS + 1)]
    return sorted(x for x in set(pts) if a < x < b)


def _z_rule(ctx: KernelContext, t: float | None = None):
    """Quadrature over the service law: nodes, weights (including g) and g itself.

    With ``t`` the pieces are split at the jumps and kinks of the integrand.
    """
    svc = ctx.model.service
    zs, ws, gs = [], [], []
    for a, b, _ in svc.pieces:
        cuts = [a, b] if t is None else [a, *_z_breaks(ctx, t, a, b), b]
        x, w = gauss_legendre_pieces(cuts, ctx.z_nodes)
        g = np.asarray(svc.density(x))
        zs.append(x)
        ws.append(w * g)
        gs.append(g)
    for x, m in svc.atoms:
        # an atom acts as a density value equal to its mass
        zs.append(np.array([x]))
        ws.append(np.array([m]))
        gs.append(np.array([m]))
    return np.concatenate(zs), np.concatenate(ws), np.concatenate(gs)


def _g_at(ctx: KernelContext, z: float) -> float:
    svc = ctx.model.service
    for x, m in svc.atoms:
        if x == z:
            return m
    return float(svc.density(z))


def h1_eval(ctx: KernelContext, t, u, v, z, cls: int = 0):
    """-u chi(t; ell=z) - v C(t; ell=z)."""
    pol = ctx.policy
    return -u * pol.chi(t, z, cls) - v * pol.C(t, z, cls)


def h4_eval(ctx: KernelContext, t, u, v, z_points, cls: int = 0):
    """sum_l f_l exp(sum_{k<=l} h1(z_k)) prod_{k>l} nu(z_k) prod_k g(z_k)."""
    z_points = list(z_points)
    coeffs = ctx.model.arrival.pgf_coeffs
    n = len(z_points)
    g_prod = 1.0
    for z in z_points:
        g_prod *= _g_at(ctx, z)
    if g_prod == 0:
        return 0.0
    total = 0.0
    h_cum = 0.0
    for ell in range(0, n + 1):
        if ell > 0:
            h_cum = h_cum + h1_eval(ctx, t, u, v, z_points[ell - 1], cls)
        f_l = coeffs[ell] if ell < len(coeffs) else 0.0
        if f_l == 0:
            continue
        nu_prod = 1.0
        for z in z_points[ell:]:
            nu_prod *= float(ctx.nu_density(z))
        total = total + f_l * np.exp(h_cum) * nu_prod
    return total * g_prod


def _resolvent_fn(ctx: KernelContext, z: float, cls: int):
    if ctx.resolvent_override is not None:
        return lambda t: ctx.resolvent_override(t, z)
    key = ("R", z, cls)
    if key not in ctx._cache:
        spec = ResolventSpec(ctx.policy, (z,) * ctx.n, ctx.talbot_order, cls=cls)
        t_end = max(ctx.max_lifetime(), 1e-6) * 1.0001
        log = ctx.cross_checks if ctx.cross_check_closed_forms else None
        ctx._cache[key] = resolvent_table(spec, t_end, 64, cross_check=log)
    return ctx._cache[key]


def _memory_terms(ctx: KernelContext, t: float, z: float, cls: int) -> float:
    """n int_0^t h2(y, z) dy + int_0^t R(t - y; z..z) n h2(y, z) dy.

    With H = n h2 the resolvent equation gives R * H = H - R, so the
    convolution is H(t) - R(t) and needs one resolvent value. A supplied
    resolvent_override is not a true resolvent, so it is integrated directly.
    """
    key = ("mem", t, z, cls)
    if key in ctx._cache:
        return ctx._cache[key]
    n = ctx.n
    pol = ctx.policy
    lo, hi = pol.h2_support(z, None, cls)
    top = min(hi, t)
    total = 0.0
    if top > lo:
        h2 = lambda y: float(pol.h2(y, z, None, cls))
        total = n * integrate(h2, lo, top, 1e-11, limit=200).value
        conv = math.nan
        if ctx.resolvent_override is None:
            spec = ResolventSpec(pol, (z,) * n, ctx.talbot_order, cls=cls)
            log = ctx.cross_checks if ctx.cross_check_closed_forms else None
            conv = float(spec.H(t)) - resolvent_at(spec, t, cross_check=log)
        if not math.isfinite(conv):
            # override, or t on a singularity of H
            breaks = [lo, top]
            if pol.kind == "linear" and z > 0:
                breaks += [t - k * z for k in range(1, int(t / z) + 1) if lo < t - k * z < top]
            x, w = gauss_legendre_pieces(sorted(breaks), 16)
            R = _resolvent_fn(ctx, z, cls)
            conv = n * float(np.sum(w * np.asarray(R(t - x), dtype=float) * np.asarray(pol.h2(x, z, None, cls))))
        total += conv
    ctx._cache[key] = total
    return total


def _bracket(ctx: KernelContext, t, u, v, z, cls):
    return h4_eval(ctx, t, u, v, [z] * ctx.n, cls) - _memory_terms(ctx, t, z, cls)


def kappa3(ctx: KernelContext, t, u, v, z, cls: int = 0):
    """Bracket / n, the logarithm of the fractional power (v enters through h4)."""
    return _bracket(ctx, t, u, v, z, cls) / ctx.n


def kappa1(ctx: KernelContext, t, u, v):
    zs, ws, _ = _z_rule(ctx, t)
    pol = ctx.policy
    total = 0.0
    for c, mu in enumerate(pol.probs):
        if mu == 0:
            continue
        for z, w in zip(zs, ws):
            total = total + mu * w * np.exp(h1_eval(ctx, t, u, v, z, c) + kappa3(ctx, t, u, v, z, c))
    return total


def kappa2(ctx: KernelContext, t, u):
    """Literal two-term expression; v-derivatives by central difference (Richardson-checked)."""
    pol = ctx.policy
    dv = ctx.fd_step
    zs, ws, _ = _z_rule(ctx, t)
    total = 0.0
    for c, mu in enumerate(pol.probs):
        if mu == 0:
            continue
        for z, w in zip(zs, ws):
            base = np.exp(h1_eval(ctx, t, u, 0.0, z, c) + kappa3(ctx, t, u, 0.0, z, c))
            d_h1 = (h1_eval(ctx, t, u, dv, z, c) - h1_eval(ctx, t, u, -dv, z, c)) / (2 * dv)
            d_k3 = (kappa3(ctx, t, u, dv, z, c) - kappa3(ctx, t, u, -dv, z, c)) / (2 * dv)
            total = total + mu * w * base * (d_h1 + d_k3)
    return total


def kappa2_richardson_gap(ctx: KernelContext, t, u) -> float:
    """|kappa2 at step h - kappa2 at step 2h|, the finite-difference check."""
    a = kappa2(ctx, t, u)
    b = kappa2(replace(ctx, fd_step=2 * ctx.fd_step), t, u)
    return float(abs(a - b))


def _t_rule(ctx: KernelContext):
    pol = ctx.policy
    zs, _, _ = _z_rule(ctx)
    L = ctx.max_lifetime()
    cuts = {0.0, L}
    for c in range(pol.n_classes):
        cuts.update(float(x) for x in np.atleast_1d(pol.lifetime(zs, c)) if 0 < x < L)
    return gauss_legendre_pieces(sorted(cuts), ctx.t_nodes)


def stationary_transform_theorem(ctx: KernelContext, u):
    """(1 - rho) - rate (1 - rho) int_0^L f'(kappa1(t, u, 0)) kappa2(t, u) dt.

    kappa2 carries the derivative of exp(-v C), so it equals -psi; the
    integral stops at the longest virtual lifetime, beyond which kappa2 = 0.
    """
    ctx.require_stable()
    scalar = np.ndim(u) == 0
    us = np.atleast_1d(np.asarray(u, dtype=float))
    ts, wts = _t_rule(ctx)
    rho = ctx.rho
    out = []
    for uu in us:
        acc = 0.0
        for t, w in zip(ts, wts):
            k1 = kappa1(ctx, t, uu, 0.0)
            k2 = kappa2(ctx, t, uu)
            acc += w * ctx.fprime(k1) * k2
        out.append((1.0 - rho) - ctx.rate * (1.0 - rho) * acc)
    out = np.array(out)
    return out[0] if scalar else out


def stationary_transform(ctx: KernelContext, pipeline: str | None = None) -> StationaryTransform:
    """Package a route as a StationaryTransform; ``both`` logs route deviations.

    For ``both`` the Picard values are returned and every probe where the two
    routes differ by more than DEVIATION_TOL is appended to ctx.deviations.
    """
    pipeline = pipeline or ctx.pipeline
    ctx.require_stable()
    if pipeline == "picard":
        return StationaryTransform(lambda u: stationary_transform_picard(ctx, u), ctx.rho, "picard")
    if pipeline == "theorem":
        return StationaryTransform(lambda u: stationary_transform_theorem(ctx, u), ctx.rho, "theorem")

    def both(u):
        pic = stationary_transform_picard(ctx, u)
        if np.iscomplexobj(np.asarray(u)):
            return pic
        thm = stationary_transform_theorem(ctx, u)
        record_deviations(ctx, u, thm, pic)
        return pic

    return StationaryTransform(both, ctx.rho, "picard (theorem cross-checked)")


def record_deviations(ctx: KernelContext, u, theorem_vals, picard_vals) -> list[dict]:
    new = []
    for uu, a, b in zip(np.atleast_1d(u), np.atleast_1d(theorem_vals), np.atleast_1d(picard_vals)):
        if abs(a - b) > DEVIATION_TOL:
            entry = dict(kind="theorem-pipeline deviation", u=float(uu), theorem=float(a), picard=float(b),
                         abs_diff=float(abs(a - b)), policy=ctx.policy.name)
            ctx.deviations.append(entry)
            new.append(entry)
    return new


# ---------------------------------------------------------------------------
# inversion and probability mass extraction

def nested_transform(fhat2: Callable, t_inner: float, inner_order: int,
                     counter: EvalCounter | None = None, rho: float = float("nan")) -> StationaryTransform:
    """Transform whose value at u is the inversion of p -> fhat2(p, u) at t_inner.

    For complex u the inner inverse is complex valued, so its real and
    imaginary parts are inverted separately. Each part is the transform of a
    real function, built from fhat2 at u and at conj(u).
    """
    def ev(u):
        u = complex(u)
        if u.imag == 0.0:
            return talbot_invert(lambda p: fhat2(p, u), t_inner, inner_order, counter)
        cache: dict = {}

        def pair(p):
            if p not in cache:
                cache[p] = (fhat2(p, u), fhat2(p, u.conjugate()))
            return cache[p]
        re = talbot_invert(lambda p: 0.5 * (pair(p)[0] + pair(p)[1]), t_inner, inner_order, counter)
        # both parts share one set of evaluations; count them once
        im = talbot_invert(lambda p: (pair(p)[0] - pair(p)[1]) / 2j, t_inner, inner_order, None)
        if counter is not None:
            counter.add(inner_order)
        return complex(re, im)
    return StationaryTransform(ev, rho, f"nested Talbot (order {inner_order})")


def invert_to_density(st: StationaryTransform, s: float, order: int = 24,
                      counter: EvalCounter | None = None) -> float:
    """Talbot inversion of u -> st(u) at s (a smoothed density of Q)."""
    return talbot_invert(lambda u: complex(st.eval(complex(u))), s, order, counter)


def pmf_from_transform(st: StationaryTransform, k_max: int, alias_tol: float = 1e-8,
                       oversample: int = 8) -> np.ndarray:
    """p_0..p_kmax from E z^Q on a circle |z| = r, z = exp(-u).

    Uses N = oversample (k_max+1) trapezoid nodes with r^N / (1 - r^N) <= alias_tol,
    which bounds the aliasing error of every coefficient; conjugate symmetry
    halves the transform evaluations.
    """
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    N = oversample * (k_max + 1)
    # r^N / (1 - r^N) <= tol  <=>  r^N <= tol / (1 + tol)
    r = (alias_tol / (1.0 + alias_tol)) ** (1.0 / N)
    half = N // 2
    theta = 2.0 * math.pi * np.arange(half + 1) / N
    z = r * np.exp(1j * theta)
    us = -np.log(z)
    vals = np.asarray(st.eval(us), dtype=complex)
    full = np.empty(N, dtype=complex)
    full[:half + 1] = vals
    full[half + 1:] = np.conj(vals[1:N - half][::-1])
    coeffs = np.fft.fft(full) / N
    k = np.arange(k_max + 1)
    return (coeffs[:k_max + 1] / r ** k).real


# ---------------------------------------------------------------------------
# EPS sojourn time

def _require_eps(ctx: KernelContext) -> None:
    pol = ctx.policy
    if not (pol.kind == "linear" and len(set(pol.weights)) == 1 and pol.weights[0] == 1.0):
        raise ValueError("the sojourn-time route is implemented for EPS only")


def _eps_types(ctx: KernelContext, h: float) -> _JobTypes:
    svc = ctx.model.service
    nodes, wts = svc.quadrature_cells(min(h, svc.support_max / 200.0))
    K = int(math.ceil(nodes.max() / h + 1e-9)) + 1
    grid = h * np.arange(K + 1)
    V = np.minimum(grid[None, :], nodes[:, None])
    return _JobTypes(wts, nodes, np.zeros(len(nodes), int), nodes.copy(), np.diff(V, axis=1))


def _solve_S_values(ctx: KernelContext, us: np.ndarray, h: float, n_steps: int) -> np.ndarray:
    types = _eps_types(ctx, h)
    u_col = np.asarray(us)[:, None]

    def root(i):
        E0 = np.exp(-u_col * np.minimum(i * h, types.ell)[None, :])
        return E0, np.zeros_like(E0)

    S, _, res = _march(ctx, h, types, root, us, None, False, n_steps)
    if res > ctx.picard_tol:
        raise ConvergenceError(f"S residual {res:.3g} exceeds tolerance")
    return S


def solve_S(ctx: KernelContext, u: float, t_max: float) -> GridFunction:
    """S(t, u) = E exp[-u min(t, ell) + rate int_0^min(t, ell) (f(S(t-y)) - 1) dy] on [0, t_max]."""
    _require_eps(ctx)
    h = ctx.picard_step()
    n_steps = int(math.ceil(t_max / h - 1e-9))
    S = _solve_S_values(ctx, np.array([u], dtype=float), h, n_steps)[0]
    return GridFunction(h * np.arange(len(S)), S)


def _sojourn_values(ctx: KernelContext, us: np.ndarray, ell: float, h: float) -> np.ndarray:
    rate = ctx.rate
    rho = ctx.rho
    b_steps = int(round(ell / h))
    U = len(us)
    types = _eps_types(ctx, h)
    J, K = types.dV.shape
    # S on [0, max(ell, support)] covers both the history window and the final factor
    n_S = max(b_steps, K) + 1
    S = _solve_S_values(ctx, us, h, n_S)
    # history F(s) = f(S(s + ell)) - 1 for s in (-ell, 0), zero below
    hist = np.zeros((U, K), dtype=S.dtype)
    for r in range(K):
        s_idx = r - K  # time index of column r
        j = s_idx + b_steps
        if j >= 0:
            hist[:, r] = ctx.f(S[:, j]) - 1.0
    u_col = np.asarray(us)[:, None]

    def root(i):
        t = i * h
        overlap = np.clip(np.minimum(t + ell, types.ell) - t, 0.0, None)
        E0 = np.exp(-u_col * overlap[None, :])
        lo, hi = _cell_bounds(t, h)
        alive = np.clip(np.minimum(hi, types.ell) - lo, 0.0, None) / (hi - lo)
        return E0, E0 * alive[None, :]

    phi_b, psi_b, res = _march(ctx, h, types, root, us, hist, True, None,
                               F0_left=ctx.f(S[:, b_steps]) - 1.0)
    if res > ctx.picard_tol:
        raise ConvergenceError(f"residual {res:.3g} exceeds tolerance")
    G = ctx.fprime(phi_b) * psi_b
    w = np.full(G.shape[1], h)
    w[0] = 0.5 * h
    Kfac = (1.0 - rho) + rate * (1.0 - rho) * (G @ w)
    # own arrivals during the tagged job's stay: trapezoid over [0, ell]
    Fown = ctx.f(S[:, :b_steps + 1]) - 1.0
    wb = np.full(b_steps + 1, h)
    wb[0] = wb[-1] = 0.5 * h
    own = np.exp(rate * (Fown @ wb))
    mates = ctx.fprime(S[:, b_steps]) / ctx.fprime(1.0)
    return Kfac * np.exp(-np.asarray(us) * ell) * own * mates


def sojourn_transform(ctx: KernelContext, u, ell: float):
    """E[exp(-u W) | requirement ell] for EPS; ``u`` scalar or array.

    The grid spacing is adjusted so that ell is a whole number of steps;
    Richardson extrapolation in the spacing as for the system-size route.
    """
    _require_eps(ctx)
    ctx.require_stable()
    if not 0 < ell <= ctx.model.service.support_max:
        raise ValueError(f"ell must lie in (0, {ctx.model.service.support_max}], got {ell}")
    scalar = np.ndim(u) == 0
    us = np.atleast_1d(np.asarray(u))
    us = us.astype(complex) if np.iscomplexobj(us) else us.astype(float)
    h0 = ctx.picard_step()
    m = max(2, int(round(ell / h0)))
    m += m % 2
    h = ell / m
    val = _sojourn_values(ctx, us, ell, h)
    if ctx.richardson:
        val = (4.0 * val - _sojourn_values(ctx, us, ell, 2 * h)) / 3.0
    return val[0] if scalar else val


def mean_sojourn(ctx: KernelContext, ell: float, du: float = 1e-4) -> float:
    """-d/du E[exp(-u W) | ell] at u = 0 by central difference."""
    vals = sojourn_transform(ctx, np.array([-du, du]), ell)
    return float(-(vals[1] - vals[0]) / (2 * du))


def mean_queue_length(st: StationaryTransform, du: float = 1e-4) -> float:
    vals = np.asarray(st.eval(np.array([-du, du])))
    return float(-(vals[1] - vals[0]).real / (2 * du))
