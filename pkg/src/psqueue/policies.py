"""Grishechkin policy kernels: EPS, random-class DPS and the SRPT/FB/TFS limit families.

Every kernel is described by a weight function A(V) of attained service. The
time change R(u) = int_0^u dy / A(y) turns each job into an autonomous clock:
in virtual time a job of requirement ell ages at unit speed, has attained
service R_inv(a) and lives for L = R(ell). The characteristic C(a) is the
derivative of R_inv, i.e. the rate at which it collects real service per unit
virtual time.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .numerics import integrate, lower_incomplete_gamma, scaled_lower_incomplete_gamma

_BISECT_TOL = 1e-12


@dataclass(frozen=True)
class TimeChange:
    """Virtual clock of one job: R, its inverse and C = d/da R_inv."""

    R: Callable
    R_inv: Callable
    C: Callable
    lifetime: float


def _numeric_time_change(c_fn: Callable, ell: float) -> TimeChange:
    def R(u):
        u = float(u)
        if u <= 0:
            return 0.0
        res = integrate(lambda y: 1.0 / c_fn(y), 0.0, u, tol=1e-13)
        return float(res.value)

    L = R(ell)
    if not math.isfinite(L):
        raise ValueError("1/c is not integrable on [0, ell]")

    def R_inv(a):
        a = float(a)
        if a <= 0:
            return 0.0
        if a >= L:
            return float(ell)
        lo, hi = 0.0, float(ell)
        while hi - lo > _BISECT_TOL:
            mid = 0.5 * (lo + hi)
            if R(mid) < a:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def C(a):
        return float(c_fn(R_inv(a)))

    return TimeChange(R, R_inv, C, L)


@dataclass(frozen=True)
class LimitFamilySpec:
    """A weight-function family indexed by N; ``c_fn(y, ell)`` is the generating weight."""

    family: str
    N: int
    variant: str = "residual"

    def __post_init__(self):
        if self.family not in ("srpt", "fb", "tfs"):
            raise ValueError(f"unknown limit family {self.family!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")

    def c_fn(self, y, ell: float = 1.0):
        y = np.asarray(y, dtype=float)
        if self.family == "srpt":
            if self.variant == "lrpt":
                return (ell - y) ** (self.N + 1)
            return (ell - y) ** (-float(self.N))
        return y ** (-float(self.N))


def time_change(c_fn, ell: float) -> TimeChange:
    """Time change for weight ``c_fn`` on [0, ell].

    Power-law families (a :class:`LimitFamilySpec`, or the constant weight
    given as a number) use analytic forms; any other callable is handled by
    quadrature and bisection.
    """
    if isinstance(c_fn, (int, float)):
        nu = float(c_fn)
        return TimeChange(lambda u: u / nu, lambda a: nu * min(max(a, 0.0), ell / nu),
                          lambda a: nu if 0 <= a < ell / nu else 0.0, ell / nu)
    if isinstance(c_fn, LimitFamilySpec):
        kern = _FAMILY_KERNELS[c_fn.family](c_fn.N, variant=c_fn.variant)
        return kern.time_change(ell)
    return _numeric_time_change(c_fn, ell)


@dataclass(frozen=True)
class PolicyKernel:
    """A Grishechkin policy with optional random classes.

    ``kind`` selects the weight family: ``linear`` (A = weight of the class),
    ``fb`` (A = weight * V^-N), ``srpt`` (A = weight * (ell - V)^-N) or
    ``srpt_lrpt`` (A = (ell - V)^(N+1)). ``rate`` is the batch arrival rate
    carried by the memory kernel h2. ``constant`` is a degenerate test kernel:
    no job is ever counted (chi = C = 0) and h2 is identically ``level``.
    """

    name: str
    kind: str = "linear"
    N: int = 0
    weights: tuple[float, ...] = (1.0,)
    probs: tuple[float, ...] = (1.0,)
    rate: float = 1.0
    closed_form: bool = True
    level: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    # -- configuration --------------------------------------------------------
    def bind(self, rate: float) -> "PolicyKernel":
        return replace(self, rate=float(rate))

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    @property
    def family(self) -> LimitFamilySpec | None:
        if self.kind == "fb":
            return LimitFamilySpec("tfs" if self.name.startswith("tfs") else "fb", self.N)
        if self.kind in ("srpt", "srpt_lrpt"):
            return LimitFamilySpec("srpt", self.N, "lrpt" if self.kind == "srpt_lrpt" else "residual")
        return None

    def problems(self) -> list[str]:
        errs = []
        if len(self.weights) != len(self.probs):
            errs.append(f"{len(self.weights)} class weights but {len(self.probs)} class probabilities")
        if any(w <= 0 or not math.isfinite(w) for w in self.weights):
            errs.append(f"class weights must be positive, got {list(self.weights)}")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            errs.append(f"class probabilities must be nonnegative and sum to 1, got {list(self.probs)}")
        if self.kind not in ("linear", "fb", "srpt", "srpt_lrpt", "constant"):
            errs.append(f"unknown kernel kind {self.kind!r}")
        if self.kind not in ("linear", "constant") and self.N < 1:
            errs.append(f"N must be >= 1 for the {self.kind} family")
        return errs

    # -- weight function and time change --------------------------------------
    def _nu(self, cls):
        return np.asarray(self.weights)[np.asarray(cls, dtype=int)]

    def A(self, V, ell, cls=0):
        """Weight of a job with attained service V; zero outside [0, ell)."""
        V = np.asarray(V, dtype=float)
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        inside = (V >= 0) & (V < ell)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind in ("linear", "constant"):
                val = nu * np.ones_like(V)
            elif self.kind == "fb":
                val = nu * V ** (-float(self.N))
            elif self.kind == "srpt":
                val = nu * (ell - V) ** (-float(self.N))
            else:
                val = (ell - V) ** (self.N + 1.0)
        out = np.where(inside, val, 0.0)
        return out if out.ndim else float(out)

    def lifetime(self, ell, cls=0):
        """Virtual lifetime L = R(ell)."""
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        if self.kind == "linear":
            out = ell / nu
        elif self.kind == "constant":
            out = np.zeros(np.broadcast(ell, nu).shape)
        elif self.kind in ("fb", "srpt"):
            out = ell ** (self.N + 1.0) / ((self.N + 1.0) * nu)
        else:
            out = np.full_like(ell, np.inf)
        return out if np.ndim(out) else float(out)

    def R(self, u, ell, cls=0):
        u = np.asarray(u, dtype=float)
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        n = float(self.N)
        if self.kind in ("linear", "constant"):
            out = u / nu
        elif self.kind == "fb":
            out = u ** (n + 1) / ((n + 1) * nu)
        elif self.kind == "srpt":
            out = (ell ** (n + 1) - (ell - u) ** (n + 1)) / ((n + 1) * nu)
        else:
            out = ((ell - u) ** (-n) - ell ** (-n)) / n
        return out if np.ndim(out) else float(out)

    def attained(self, age, ell, cls=0):
        """Attained service R_inv(age), clamped to ell."""
        a = np.maximum(np.asarray(age, dtype=float), 0.0)
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        n = float(self.N)
        if self.kind in ("linear", "constant"):
            out = nu * a
        elif self.kind == "fb":
            out = ((n + 1) * nu * a) ** (1.0 / (n + 1))
        elif self.kind == "srpt":
            rem = np.maximum(self.lifetime(ell, cls) - a, 0.0)
            out = ell - ((n + 1) * nu * rem) ** (1.0 / (n + 1))
        else:
            out = ell - (ell ** (-n) + n * a) ** (-1.0 / n)
        out = np.minimum(out, ell)
        return out if np.ndim(out) else float(out)

    def attained_from_remaining(self, rem, ell, cls=0):
        """Attained service given the remaining virtual lifetime (exact near completion)."""
        rem = np.maximum(np.asarray(rem, dtype=float), 0.0)
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        if self.kind == "linear":
            out = ell - nu * rem
        elif self.kind == "srpt":
            out = ell - ((self.N + 1.0) * nu * rem) ** (1.0 / (self.N + 1.0))
        else:
            return self.attained(self.lifetime(ell, cls) - rem, ell, cls)
        out = np.clip(out, 0.0, ell)
        return out if np.ndim(out) else float(out)

    def C(self, t, ell, cls=0):
        """Characteristic in virtual time: d/dt R_inv(t) on [0, L), zero after."""
        t = np.asarray(t, dtype=float)
        ell = np.asarray(ell, dtype=float)
        nu = self._nu(cls)
        n = float(self.N)
        L = self.lifetime(ell, cls)
        inside = (t >= 0) & (t < L)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind in ("linear", "constant"):
                val = nu * np.ones_like(t)
            elif self.kind == "fb":
                val = nu * ((n + 1) * nu * t) ** (-n / (n + 1))
            elif self.kind == "srpt":
                val = nu * ((n + 1) * nu * (L - t)) ** (-n / (n + 1))
            else:
                val = (ell ** (-n) + n * t) ** (-1.0 / n - 1.0)
        out = np.where(inside, val, 0.0)
        return out if out.ndim else float(out)

    def chi(self, t, ell, cls=0):
        """System-size characteristic: 1 while the job is present in virtual time."""
        t = np.asarray(t, dtype=float)
        out = ((t >= 0) & (t < self.lifetime(ell, cls))).astype(float)
        return out if out.ndim else float(out)

    def time_change(self, ell: float, cls: int = 0) -> TimeChange:
        return TimeChange(
            R=lambda u: self.R(u, ell, cls),
            R_inv=lambda a: self.attained(a, ell, cls),
            C=lambda a: self.C(a, ell, cls),
            lifetime=self.lifetime(ell, cls),
        )

    # -- memory kernel seen by the resolvent ------------------------------------
    def h2(self, t, w, ell=None, cls=0):
        """Memory kernel h2(t, w), including the arrival-rate factor.

        ``linear``: rate * weight * 1{t >= w}. Power families:
        rate * weight * C_unit(t) * 1{t <= w}, with C_unit the unit-weight
        characteristic (``ell`` defaults to ``w`` for the SRPT families).
        """
        t = np.asarray(t, dtype=float)
        nu = float(self.weights[cls])
        if self.kind == "constant":
            out = np.full_like(t, self.level)
            return out if out.ndim else float(out)
        if self.kind == "linear":
            out = self.rate * nu * (t >= w).astype(float)
            return out if out.ndim else float(out)
        ell = w if ell is None else ell
        lo, hi = self.h2_support(w, ell, cls)
        if self.kind == "fb":
            # the FB characteristic does not depend on ell; w is the cutoff
            n = float(self.N)
            with np.errstate(divide="ignore"):
                vals = np.where(t > 0, ((n + 1) * np.maximum(t, 0.0)) ** (-n / (n + 1)), np.inf)
        else:
            unit = replace(self, weights=(1.0,), probs=(1.0,))
            vals = unit.C(t, ell, 0)
        out = self.rate * nu * np.where((t >= lo) & (t <= hi), vals, 0.0)
        return out if out.ndim else float(out)

    def h2_support(self, w, ell=None, cls=0) -> tuple[float, float]:
        if self.kind == "constant":
            return 0.0, math.inf
        if self.kind == "linear":
            return float(w), math.inf
        ell = w if ell is None else ell
        L = math.inf
        if self.kind in ("fb", "srpt"):
            L = float(ell) ** (self.N + 1.0) / (self.N + 1.0)
        if self.kind == "fb":
            return 0.0, float(w)
        return 0.0, float(min(w, L))

    def h2_parts(self, w, ell=None, cls=0):
        """Split h2(., w) on its support as smooth(t) (t-lo)^alpha (hi-t)^beta.

        Returns (lo, hi, alg, smooth) with alg = (alpha, beta) or None when
        h2 is already smooth on [lo, hi].
        """
        lo, hi = self.h2_support(w, ell, cls)
        ell = w if ell is None else ell
        g = self.rate * float(self.weights[cls])
        n = float(self.N)
        if self.kind in ("fb", "srpt") and hi > lo:
            k = (n + 1) ** (-n / (n + 1))
            L = float(ell) ** (n + 1) / (n + 1)
            if self.kind == "fb":
                return lo, hi, (-n / (n + 1), 0.0), lambda t: g * k
            if hi >= L:
                return lo, hi, (0.0, -n / (n + 1)), lambda t: g * k
        return lo, hi, None, lambda t: self.h2(t, w, ell, cls)

    def hhat2_closed(self, p: complex, w: float, ell=None, cls: int = 0):
        """Closed-form Laplace transform of h2(., w), or None when unavailable."""
        if not self.closed_form:
            return None
        p = complex(p)
        nu = self.weights[cls]
        g = self.rate * nu
        if self.kind == "constant":
            return self.level / p
        if self.kind == "linear":
            return g * np.exp(-p * w) / p
        n = self.N
        s = 1.0 / (n + 1)
        k = (n + 1) ** (-n / (n + 1))
        try:
            if self.kind == "fb":
                if w <= 0:
                    return 0j
                return g * k * p ** (-s) * lower_incomplete_gamma(s, w * p)
            if self.kind == "srpt":
                ell = w if ell is None else ell
                L = ell ** (n + 1) / (n + 1)
                top = min(w, L)
                if top <= 0:
                    return 0j
                # reflected FB: int_{L-top}^{L} x^(s-1) e^{-p (L - x)} dx, written with
                # e^z gamma(s, z) so that no e^{+-pL} factor is formed on its own
                a = -p * L
                b = -p * (L - top)
                head = scaled_lower_incomplete_gamma(s, a)
                tail = cmath.exp(-p * top) * scaled_lower_incomplete_gamma(s, b) if b != 0 else 0j
                return g * k * (-p) ** (-s) * (head - tail)
        except OverflowError:
            # the transform exceeds the double range far in the left half-plane
            return complex(math.inf, 0.0)
        return None


_FAMILY_KERNELS: dict[str, Callable] = {}


def _rate_of(model) -> float:
    return 1.0 if model is None else float(model.arrival.rate)


def _check_classes(weights, probs):
    weights = tuple(float(w) for w in weights)
    probs = tuple(float(p) for p in probs)
    if len(weights) != len(probs):
        raise ValueError(f"{len(weights)} class weights but {len(probs)} class probabilities")
    if any(w <= 0 for w in weights):
        raise ValueError(f"class weights must be positive, got {list(weights)}")
    if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
        raise ValueError(f"invalid probability vector {list(probs)}")
    return weights, probs


def eps_kernel(rate: float = 1.0) -> PolicyKernel:
    """Egalitarian processor sharing: A = C = 1 while the job is present."""
    return PolicyKernel("eps", "linear", rate=rate)


def dps_random_kernel(weights, probs, rate: float = 1.0) -> PolicyKernel:
    """Discriminatory PS; each job draws its class (and weight) independently."""
    weights, probs = _check_classes(weights, probs)
    return PolicyKernel("dps", "linear", weights=weights, probs=probs, rate=rate)


def fb_kernel(N: int, model=None) -> PolicyKernel:
    """Least-attained-service family, A = V^-N."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return PolicyKernel(f"fb{N}", "fb", N=int(N), rate=_rate_of(model))


def srpt_kernel(N: int, model=None, variant: str = "residual") -> PolicyKernel:
    """Shortest-remaining family.

    ``residual`` (default): A = (ell - V)^-N, which favours small remaining
    work and has finite virtual lifetime. ``lrpt``: A = (ell - V)^(N+1), kept
    for comparison; its virtual lifetime is infinite and it has no closed-form
    transform.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if variant == "residual":
        return PolicyKernel(f"srpt{N}", "srpt", N=int(N), rate=_rate_of(model))
    if variant == "lrpt":
        return PolicyKernel(f"srpt{N}-lrpt", "srpt_lrpt", N=int(N), rate=_rate_of(model),
                            closed_form=False)
    raise ValueError(f"unknown SRPT variant {variant!r}")


def tfs_kernel(N: int, weights, probs, model=None) -> PolicyKernel:
    """Class-weighted FB family, A = weight_c * V^-N."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    weights, probs = _check_classes(weights, probs)
    return PolicyKernel(f"tfs{N}", "fb", N=int(N), weights=weights, probs=probs,
                        rate=_rate_of(model))


def constant_kernel(level: float) -> PolicyKernel:
    """Degenerate kernel: chi = C = 0 and h2 identically ``level``."""
    return PolicyKernel("constant", "constant", level=float(level))


def null_kernel() -> PolicyKernel:
    """Degenerate kernel with h2 = 0; used for pipeline checks."""
    return constant_kernel(0.0)


_FAMILY_KERNELS.update(
    fb=lambda N, variant="residual": fb_kernel(N),
    tfs=lambda N, variant="residual": fb_kernel(N),
    srpt=lambda N, variant="residual": srpt_kernel(N, variant=variant),
)


def policy_from_name(kind: str, N: int = 1, weights=(1.0,), probs=(1.0,), model=None,
                     variant: str = "residual") -> PolicyKernel:
    rate = _rate_of(model)
    if kind == "eps":
        return eps_kernel(rate)
    if kind == "dps":
        return dps_random_kernel(weights, probs, rate)
    if kind == "fb":
        return fb_kernel(N, model)
    if kind == "srpt":
        return srpt_kernel(N, model, variant)
    if kind == "tfs":
        return tfs_kernel(N, weights, probs, model)
    raise ValueError(f"unknown policy kind {kind!r}")
