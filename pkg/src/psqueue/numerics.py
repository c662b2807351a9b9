"""Shared numerical substrate: fixed-Talbot Laplace inversion (1-D and nested 2-D),
the complex lower incomplete gamma function and adaptive quadrature."""
from __future__ import annotations

import cmath
import math
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate as _spi
from scipy import special as _sps


class InversionError(ArithmeticError):
    pass


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, value=None, error=None):
        super().__init__(message)
        self.value = value
        self.error = error


class EvalCounter:
    """Counts transform evaluations; safe to share between threads."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


@dataclass(frozen=True)
class ComplexTransform:
    """A Laplace-domain function s -> F(s).

    If ``vectorized`` is true, ``eval`` accepts an array of frequencies.
    """

    eval: Callable
    abscissa_hint: float = 0.0
    vectorized: bool = False

    def __call__(self, s):
        return self.eval(s)


@dataclass(frozen=True)
class TalbotNodes:
    order: int
    deltas: np.ndarray
    gammas: np.ndarray


def _cot(x: float) -> float:
    # guard for tiny arguments; the plain form overflows near 0
    if abs(x) < 1e-8:
        return 1.0 / x - x / 3.0
    return math.cos(x) / math.sin(x)


_NODE_CACHE: dict[int, TalbotNodes] = {}


def talbot_nodes(order: int) -> TalbotNodes:
    """Fixed-Talbot nodes delta_k and weights gamma_k, k = 0..order-1."""
    if int(order) != order or order < 1:
        raise ValueError(f"Talbot order must be a positive integer, got {order}")
    order = int(order)
    if order in _NODE_CACHE:
        return _NODE_CACHE[order]
    deltas = np.empty(order, dtype=complex)
    gammas = np.empty(order, dtype=complex)
    deltas[0] = 2.0 * order / 5.0
    gammas[0] = 0.5 * math.exp(deltas[0].real)
    for k in range(1, order):
        theta = k * math.pi / order
        c = _cot(theta)
        deltas[k] = (2.0 * k * math.pi / 5.0) * complex(c, 1.0)
        gammas[k] = complex(1.0, theta * (1.0 + c * c) - c) * cmath.exp(deltas[k])
    deltas.setflags(write=False)
    gammas.setflags(write=False)
    nodes = TalbotNodes(order, deltas, gammas)
    _NODE_CACHE[order] = nodes
    return nodes


def _evaluate(fhat, points: np.ndarray, counter: EvalCounter | None) -> np.ndarray:
    if isinstance(fhat, ComplexTransform) and fhat.vectorized:
        values = np.asarray(fhat.eval(points), dtype=complex)
    else:
        call = fhat.eval if isinstance(fhat, ComplexTransform) else fhat
        values = np.array([call(complex(p)) for p in points], dtype=complex)
    if counter is not None:
        counter.add(len(points))
    return values


def talbot_invert(fhat, t: float, order: int = 24, counter: EvalCounter | None = None) -> float:
    """f(t) ~ 2/(5t) sum_k Re(gamma_k fhat(delta_k / t))."""
    if not t > 0:
        raise ValueError(f"inversion time must be positive, got {t}")
    nodes = talbot_nodes(order)
    values = _evaluate(fhat, nodes.deltas / t, counter)
    terms = nodes.gammas * values
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise InversionError(
            f"non-finite transform value at node {bad} (s = {nodes.deltas[bad] / t})"
        )
    return float(2.0 / (5.0 * t) * np.sum(terms.real))


def talbot_invert_2d(fhat2, t1: float, t2: float, order1: int = 24, order2: int = 24,
                     counter: EvalCounter | None = None) -> float:
    """Nested Talbot inversion of a two-variable transform of a real function.

    Each outer node is paired with its conjugate so that the inner inversion
    acts on the transform of a real-valued function of ``t2``. The one-sided
    inner rule is exact only for such functions. The real outer node needs
    ``order2`` evaluations and every complex one ``2 * order2``, so the total
    is ``(2 * order1 - 1) * order2``.
    """
    if not (t1 > 0 and t2 > 0):
        raise ValueError(f"inversion times must be positive, got ({t1}, {t2})")
    n1 = talbot_nodes(order1)
    n2 = talbot_nodes(order2)
    s2 = n2.deltas / t2
    total = 0.0
    for k, (d1, g1) in enumerate(zip(n1.deltas, n1.gammas)):
        s1 = complex(d1) / t1
        upper = np.array([fhat2(s1, complex(p)) for p in s2], dtype=complex)
        if k == 0:
            # real node: the conjugate pair collapses to one point
            combined = 2.0 * g1.real * upper
            used = order2
        else:
            lower = np.array([fhat2(s1.conjugate(), complex(p)) for p in s2], dtype=complex)
            combined = g1 * upper + np.conj(g1) * lower
            used = 2 * order2
        if counter is not None:
            counter.add(used)
        terms = n2.gammas * combined
        if not np.all(np.isfinite(terms)):
            raise InversionError(f"non-finite transform value at s1 = {s1}")
        total += 2.0 / (5.0 * t2) * float(np.sum(terms.real))
    return float(total / (5.0 * t1))


def significant_digits(approx: float, exact: float) -> float:
    err = abs(approx - exact)
    if err == 0.0:
        return math.inf
    return -math.log10(err / abs(exact))


# ---------------------------------------------------------------------------
# incomplete gamma

_GAMMA_EPS = 1e-16
_GAMMA_MAXITER = 2000
_TINY = 1e-300
_KUMMER_LOSS = 8.0  # Kummer series loses exp(|x| + Re x) to cancellation
_ASYMPTOTIC_MIN = 40.0
_ASYMPTOTIC_FAR = 1e3


def _series_scaled(s: complex, x: complex) -> complex:
    # e^x gamma(s, x) = x^s sum_n x^n / (s (s+1) ... (s+n))
    term = 1.0 / s
    total = term
    for n in range(1, _GAMMA_MAXITER):
        term *= x / (s + n)
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma series did not converge at s={s}, x={x}")
    return total * cmath.exp(s * cmath.log(x))


def _gamma_kummer(s: complex, x: complex) -> complex:
    # gamma(s, x) = x^s sum_n (-x)^n / (n! (s+n)); no cancellation for x < 0
    term = 1.0 + 0j
    total = 1.0 / s
    for n in range(1, _GAMMA_MAXITER):
        term *= -x / n
        c = term / (s + n)
        total += c
        if n > abs(x) and abs(c) < abs(total) * _GAMMA_EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma Kummer series did not converge at s={s}, x={x}")
    return total * cmath.exp(s * cmath.log(x))


def _upper_cf_scaled(s: complex, x: complex) -> complex:
    # e^x Gamma(s, x) by the Legendre continued fraction, modified Lentz
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_MAXITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    else:
        raise ArithmeticError(f"incomplete gamma continued fraction did not converge at s={s}, x={x}")
    return cmath.exp(s * cmath.log(x)) * h


def _upper_asymptotic_scaled(s: complex, x: complex) -> complex:
    # e^x Gamma(s, x) ~ x^(s-1) sum_k (s-1)...(s-k) / x^k, valid for |arg x| < 3 pi / 2
    term = 1.0 + 0j
    total = term
    for k in range(1, _GAMMA_MAXITER):
        nxt = term * (s - k) / x
        if abs(nxt) > abs(term):
            break
        term = nxt
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * cmath.exp((s - 1.0) * cmath.log(x))


def _near_cut(x: complex) -> bool:
    return x.real < 0 and abs(x) + x.real <= _KUMMER_LOSS


def _upper_scaled(s: complex, x: complex) -> complex:
    # far out the fraction stalls at rounding level while the series is exact
    if abs(x) >= _ASYMPTOTIC_FAR or (_near_cut(x) and abs(x) >= _ASYMPTOTIC_MIN):
        return _upper_asymptotic_scaled(s, x)
    return _upper_cf_scaled(s, x)


def _check_gamma_args(s, x):
    s = complex(s)
    x = complex(x)
    if not s.real > 0:
        raise ValueError(f"lower incomplete gamma needs Re(s) > 0, got s={s}")
    return s, x


def lower_incomplete_gamma(s, x):
    """gamma(s, x) = int_0^x t^(s-1) e^(-t) dt for Re(s) > 0 and complex x (principal branch).

    Raises OverflowError when the value exceeds the double range.
    """
    s, x = _check_gamma_args(s, x)
    if x == 0:
        return 0j
    if abs(x) < abs(s) + 1.0:
        return _series_scaled(s, x) * cmath.exp(-x)
    if _near_cut(x) and abs(x) < _ASYMPTOTIC_MIN:
        return _gamma_kummer(s, x)
    upper = _upper_scaled(s, x)
    return complex(_sps.gamma(s)) - cmath.exp(-x + cmath.log(upper))


def scaled_lower_incomplete_gamma(s, x):
    """e^x gamma(s, x), finite wherever Re x <= 0 (no overflow for large |x|)."""
    s, x = _check_gamma_args(s, x)
    if x == 0:
        return 0j
    if abs(x) < abs(s) + 1.0:
        return _series_scaled(s, x)
    if _near_cut(x) and abs(x) < _ASYMPTOTIC_MIN:
        return cmath.exp(x) * _gamma_kummer(s, x)
    return cmath.exp(x) * complex(_sps.gamma(s)) - _upper_scaled(s, x)


def scaled_upper_incomplete_gamma(s, x):
    """e^x Gamma(s, x) = e^x int_x^inf t^(s-1) e^(-t) dt (principal branch), Re(s) > 0."""
    s, x = _check_gamma_args(s, x)
    if x == 0:
        return complex(_sps.gamma(s))
    if abs(x) < abs(s) + 1.0 or (_near_cut(x) and abs(x) < _ASYMPTOTIC_MIN):
        return cmath.exp(x) * complex(_sps.gamma(s)) - scaled_lower_incomplete_gamma(s, x)
    return _upper_scaled(s, x)


# ---------------------------------------------------------------------------
# quadrature

@dataclass
class QuadResult:
    value: complex | float
    error: float
    intervals: list[tuple[float, float]] = field(default_factory=list)


def _quad_real(f, a, b, tol, limit, points, alg=None):
    kwargs = dict(epsabs=tol, epsrel=0.0, limit=limit, full_output=1)
    if alg is not None:
        kwargs.update(weight="alg", wvar=alg)
    elif points is not None:
        pts = [p for p in points if a < p < b]
        if pts:
            kwargs["points"] = pts
    out = _spi.quad(f, a, b, **kwargs)
    value, err = out[0], out[1]
    if len(out) > 3 and err > tol:
        raise QuadratureError(
            f"quadrature on [{a}, {b}] did not reach tol {tol:g} (error estimate {err:g})",
            value=value, error=err,
        )
    return value, err


def integrate(f: Callable, a: float, b: float = math.inf, tol: float = 1e-10, *,
              complex_valued: bool = False, points=None, limit: int = 500,
              decay_rate: float | None = None, envelope: float = 1.0,
              alg: tuple[float, float] | None = None) -> QuadResult:
    """Adaptive Gauss-Kronrod quadrature (QUADPACK) with an error estimate.

    Infinite upper limits are truncated: with ``decay_rate`` (|f(t)| <= envelope
    e^{-decay_rate t}) the cut is placed so the tail is below tol/10; otherwise
    blocks of doubling length are added until a block contributes under tol/10.
    Complex integrands are split into real and imaginary parts. With
    ``alg = (alpha, beta)`` the integrand is f(x) (x-a)^alpha (b-x)^beta and
    only the smooth factor f is supplied (finite ranges only).
    """
    if not a < b:
        raise ValueError(f"integration needs a < b, got [{a}, {b}]")
    if complex_valued:
        re = integrate(lambda x: complex(f(x)).real, a, b, tol / 2, points=points, limit=limit,
                       decay_rate=decay_rate, envelope=envelope, alg=alg)
        im = integrate(lambda x: complex(f(x)).imag, a, b, tol / 2, points=points, limit=limit,
                       decay_rate=decay_rate, envelope=envelope, alg=alg)
        return QuadResult(complex(re.value, im.value), re.error + im.error, re.intervals)
    if alg is not None and not math.isfinite(b):
        raise ValueError("algebraic endpoint weights need a finite range")
    if math.isfinite(b):
        v, e = _quad_real(f, a, b, tol, limit, points, alg)
        return QuadResult(v, e, [(a, b)])
    if decay_rate is not None:
        cut = a + max(math.log(10.0 * envelope / (tol * decay_rate)), 1.0) / decay_rate
        v, e = _quad_real(f, a, cut, tol, limit, points)
        return QuadResult(v, e + 0.1 * tol, [(a, cut)])
    total, err = 0.0, 0.0
    lo, width = a, 1.0
    intervals = []
    quiet = 0
    for _ in range(200):
        hi = lo + width
        v, e = _quad_real(f, lo, hi, tol / 4, limit, points)
        total += v
        err += e
        intervals.append((lo, hi))
        quiet = quiet + 1 if abs(v) < tol / 10 else 0
        if quiet >= 2:
            return QuadResult(total, err + abs(v), intervals)
        lo, width = hi, width * 2.0
    raise QuadratureError("infinite-range quadrature: integrand did not decay", value=total, error=err)


def gauss_legendre_pieces(breakpoints, n: int = 16):
    """Composite Gauss-Legendre nodes and weights over consecutive breakpoints."""
    x0, w0 = np.polynomial.legendre.leggauss(n)
    xs, ws = [], []
    bp = sorted(set(float(b) for b in breakpoints))
    for a, b in zip(bp[:-1], bp[1:]):
        if b <= a:
            continue
        xs.append(0.5 * (b - a) * x0 + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * w0)
    if not xs:
        return np.empty(0), np.empty(0)
    return np.concatenate(xs), np.concatenate(ws)
