"""Problem instances for the M^X/G/1 queue: batch arrivals, bounded service, utilization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from numpy.polynomial import Polynomial

if TYPE_CHECKING:
    from .policies import PolicyKernel

_SUM_TOL = 1e-12
_MASS_TOL = 1e-10


class ModelValidationError(ValueError):
    """Raised when a problem instance violates one or more invariants.

    ``errors`` lists every violation found, not just the first.
    """

    def __init__(self, errors: Sequence[str], unstable: bool = False):
        self.errors = list(errors)
        self.unstable = unstable
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class BatchArrivalSpec:
    """Poisson batch arrivals at ``rate`` with batch-size PGF coefficients f_0..f_n."""

    rate: float
    pgf_coeffs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "pgf_coeffs", tuple(float(c) for c in self.pgf_coeffs))
        if len(self.pgf_coeffs) == 0:
            raise ModelValidationError(["pgf coefficients are empty"])

    @property
    def degree(self) -> int:
        coeffs = np.trim_zeros(np.asarray(self.pgf_coeffs), "b")
        return max(len(coeffs) - 1, 0)

    @property
    def mean_batch(self) -> float:
        return float(pgf_derivative(self, 1.0).real)

    def problems(self) -> list[str]:
        errs = []
        coeffs = np.asarray(self.pgf_coeffs)
        if np.any(coeffs < 0):
            bad = [i for i, c in enumerate(coeffs) if c < 0]
            errs.append(f"pgf coefficients must be nonnegative (negative at index {bad})")
        total = coeffs.sum()
        if abs(total - 1.0) > _SUM_TOL:
            errs.append(f"pgf coefficients sum to {total:.12g}")
        if not np.isfinite(self.rate) or self.rate < 0:
            errs.append(f"arrival rate must be nonnegative, got {self.rate}")
        return errs


def pgf_eval(spec: BatchArrivalSpec, x):
    """f(x) = sum_l f_l x^l (Horner)."""
    acc = 0.0
    for c in reversed(spec.pgf_coeffs):
        acc = acc * x + c
    return acc


def pgf_derivative(spec: BatchArrivalSpec, x):
    """f'(x) = sum_l l f_l x^(l-1)."""
    coeffs = spec.pgf_coeffs
    acc = 0.0 * x
    for l in range(len(coeffs) - 1, 0, -1):
        acc = acc * x + l * coeffs[l]
    return acc


def pgf_second_derivative(spec: BatchArrivalSpec, x):
    coeffs = spec.pgf_coeffs
    acc = 0.0 * x
    for l in range(len(coeffs) - 1, 1, -1):
        acc = acc * x + l * (l - 1) * coeffs[l]
    return acc


@dataclass(frozen=True)
class ServiceSpec:
    """Service-requirement law on [0, support_max].

    The law is a piecewise-polynomial density (``pieces`` of ``(lo, hi, coeffs)``
    with coefficients in powers of x) plus finitely many point masses
    (``atoms`` of ``(x, mass)``).
    """

    pieces: tuple[tuple[float, float, tuple[float, ...]], ...] = ()
    atoms: tuple[tuple[float, float], ...] = ()
    support_max: float = field(default=0.0)

    def __post_init__(self):
        pieces = tuple((float(a), float(b), tuple(float(c) for c in cs)) for a, b, cs in self.pieces)
        atoms = tuple((float(x), float(m)) for x, m in self.atoms)
        object.__setattr__(self, "pieces", pieces)
        object.__setattr__(self, "atoms", atoms)
        if self.support_max <= 0:
            ends = [b for _, b, _ in pieces] + [x for x, _ in atoms]
            object.__setattr__(self, "support_max", float(max(ends)) if ends else 0.0)

    # -- constructors -------------------------------------------------------
    @classmethod
    def uniform(cls, lo: float, hi: float) -> "ServiceSpec":
        return cls(pieces=((lo, hi, (1.0 / (hi - lo),)),))

    @classmethod
    def deterministic(cls, value: float) -> "ServiceSpec":
        return cls(atoms=((value, 1.0),))

    @classmethod
    def discrete(cls, values: Sequence[float], probs: Sequence[float]) -> "ServiceSpec":
        return cls(atoms=tuple(zip(values, probs)))

    @classmethod
    def triangular(cls, lo: float, mode: float, hi: float) -> "ServiceSpec":
        h = 2.0 / (hi - lo)
        up = Polynomial.fit([lo, mode], [0.0, h], 1).convert().coef
        down = Polynomial.fit([mode, hi], [h, 0.0], 1).convert().coef
        return cls(pieces=((lo, mode, tuple(up)), (mode, hi, tuple(down))))

    # -- basic quantities ---------------------------------------------------
    def _polys(self):
        return [(a, b, Polynomial(cs)) for a, b, cs in self.pieces]

    def density(self, x):
        """Continuous part of the density (atoms excluded)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for a, b, p in self._polys():
            inside = (x >= a) & (x < b) if b < self.support_max else (x >= a) & (x <= b)
            out = np.where(inside, p(x), out)
        return out if out.ndim else float(out)

    def mass(self, lo: float, hi: float) -> float:
        """P(lo < ell <= hi), with atoms at lo excluded."""
        return self.moment_between(lo, hi, 0)

    def moment_between(self, lo: float, hi: float, k: int) -> float:
        total = 0.0
        for a, b, p in self._polys():
            a2, b2 = max(a, lo), min(b, hi)
            if b2 > a2:
                q = (p * Polynomial([0.0] * k + [1.0])).integ()
                total += q(b2) - q(a2)
        for x, m in self.atoms:
            if lo < x <= hi or (lo == 0.0 and x == 0.0):
                total += m * x**k
        return float(total)

    def total_mass(self) -> float:
        return self.moment_between(-np.inf, np.inf, 0)

    @property
    def mean(self) -> float:
        return self.moment_between(-np.inf, np.inf, 1)

    def cdf(self, x: float) -> float:
        return self.moment_between(-np.inf, x, 0)

    def breakpoints(self) -> list[float]:
        pts = {0.0, self.support_max}
        for a, b, _ in self.pieces:
            pts.update((a, b))
        return sorted(pts)

    def problems(self) -> list[str]:
        errs = []
        total = self.total_mass()
        if abs(total - 1.0) > _MASS_TOL:
            errs.append(f"service law has total mass {total:.12g}, expected 1")
        for a, b, p in self._polys():
            if b <= a:
                errs.append(f"service piece [{a}, {b}] is empty")
                continue
            xs = np.linspace(a, b, 257)
            crit = [r.real for r in p.deriv().roots() if abs(r.imag) < 1e-12 and a < r.real < b]
            vals = p(np.concatenate([xs, crit]))
            if np.min(vals) < -1e-12:
                errs.append(f"service density negative on [{a}, {b}]")
            if a < 0:
                errs.append(f"service support starts below 0 ({a})")
        for x, m in self.atoms:
            if m < 0:
                errs.append(f"service atom at {x} has negative mass {m}")
            if x < 0:
                errs.append(f"service atom at negative value {x}")
        if self.support_max <= 0:
            errs.append("service support_max must be positive")
        return errs

    # -- sampling -----------------------------------------------------------
    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Inverse-CDF sampler; deterministic given the generator state."""
        comps = []
        for a, b, p in self._polys():
            q = p.integ()
            comps.append(("piece", a, b, p, q, float(q(b) - q(a))))
        for x, m in self.atoms:
            comps.append(("atom", x, x, None, None, m))
        weights = np.array([c[-1] for c in comps])
        cum = np.cumsum(weights) / weights.sum()
        uu = rng.random(size)
        vv = rng.random(size)
        which = np.minimum(np.searchsorted(cum, uu, side="right"), len(comps) - 1)
        out = np.empty(size)
        for i, (kind, a, b, p, q, w) in enumerate(comps):
            sel = which == i
            if not np.any(sel):
                continue
            if kind == "atom":
                out[sel] = a
                continue
            target = q(a) + vv[sel] * w
            if p.degree() == 0:
                out[sel] = a + (target - q(a)) / p.coef[0]
                continue
            lo = np.full(sel.sum(), a)
            hi = np.full(sel.sum(), b)
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                below = q(mid) < target
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            out[sel] = 0.5 * (lo + hi)
        assert np.all(out <= self.support_max + 1e-12)
        return out

    def quadrature_cells(self, h: float, lo: float = 0.0, hi: float | None = None):
        """Split the law into cells of width ``h``: returns (nodes, weights).

        Each cell contributes one node at its mass centroid; atoms are kept as
        separate exact nodes. Cell edges sit on multiples of ``h``.
        """
        hi = self.support_max if hi is None else hi
        n_cells = int(np.ceil(hi / h - 1e-12))
        nodes, weights = [], []
        for m in range(n_cells):
            a, b = m * h, min((m + 1) * h, hi)
            w = 0.0
            mom = 0.0
            for pa, pb, p in self._polys():
                a2, b2 = max(a, pa), min(b, pb)
                if b2 > a2:
                    q0 = p.integ()
                    q1 = (p * Polynomial([0.0, 1.0])).integ()
                    w += q0(b2) - q0(a2)
                    mom += q1(b2) - q1(a2)
            if w > 0:
                nodes.append(mom / w)
                weights.append(w)
        for x, m in self.atoms:
            if m > 0:
                nodes.append(x)
                weights.append(m)
        return np.array(nodes), np.array(weights)


@dataclass(frozen=True)
class QueueModel:
    arrival: BatchArrivalSpec
    service: ServiceSpec
    policy: "PolicyKernel | None" = None

    @property
    def rho(self) -> float:
        return traffic_intensity(self)

    @property
    def rate(self) -> float:
        return self.arrival.rate


def traffic_intensity(model: QueueModel) -> float:
    """Batch rate x mean batch size x mean requirement."""
    return float(model.arrival.rate * model.arrival.mean_batch * model.service.mean)


def validate_model(model: QueueModel, stationary: bool = True) -> QueueModel:
    """Check every invariant and raise one error listing all violations."""
    errs = model.arrival.problems() + model.service.problems()
    coeffs = model.arrival.pgf_coeffs
    unstable = False
    if stationary:
        if coeffs and coeffs[0] > 0:
            errs.append(f"batch size 0 has probability {coeffs[0]} (f_0 must be 0)")
        if model.arrival.rate <= 0:
            errs.append("arrival rate must be positive for stationary analysis")
        rho = traffic_intensity(model)
        if rho >= 1:
            unstable = True
            errs.append(f"rho = {rho:.6g} ≥ 1")
    if model.policy is not None:
        errs += model.policy.problems()
    if errs:
        raise ModelValidationError(errs, unstable=unstable)
    return model
