"""Airy function, extended Airy kernel and the tail bounds built on them.

``airy_ai`` / ``airy_ai_prime`` are implemented here (Maclaurin series in a
window around the origin, Poincare asymptotics outside it). Unnamed constants
in the tail bounds are explicit inputs (:class:`TailConstants`); nothing here
claims a value for them.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import AccuracyError, ConditioningWarning, InvalidInputError

# Ai(0) and -Ai'(0)
_C1 = 1.0 / (3.0 ** (2.0 / 3.0) * math.gamma(2.0 / 3.0))
_C2 = 1.0 / (3.0 ** (1.0 / 3.0) * math.gamma(1.0 / 3.0))

# Series window. On the negative side the asymptotic expansion is only good to
# ~e^{-2 zeta}, which needs |x| >= 7 to reach 1e-10; the series is still
# cancellation-safe there (largest term ~1e5).
SERIES_LOW = -7.0
SERIES_HIGH = 5.0
_SERIES_TERMS = 60


def _series(x: np.ndarray, deriv: bool) -> np.ndarray:
    x3 = x**3
    if not deriv:
        f = np.ones_like(x)
        g = x.copy()
        tf = np.ones_like(x)
        tg = x.copy()
        for k in range(1, _SERIES_TERMS):
            tf = tf * x3 / ((3 * k - 1) * (3 * k))
            tg = tg * x3 / ((3 * k) * (3 * k + 1))
            f += tf
            g += tg
        return _C1 * f - _C2 * g
    # derivatives of the two Maclaurin solutions
    fp = x**2 / 2.0
    gp = np.ones_like(x)
    tf = fp.copy()
    tg = gp.copy()
    for k in range(1, _SERIES_TERMS):
        tf = tf * x3 / ((3 * k) * (3 * k + 2))
        tg = tg * x3 / ((3 * k) * (3 * k - 2))
        fp += tf
        gp += tg
    return _C1 * fp - _C2 * gp


def _u_coeffs(n: int) -> np.ndarray:
    u = np.empty(n)
    u[0] = 1.0
    for k in range(1, n):
        u[k] = u[k - 1] * (6 * k - 5) * (6 * k - 3) * (6 * k - 1) / ((2 * k - 1) * 216 * k)
    return u


_U = _u_coeffs(40)
_V = np.array([1.0] + [-(6 * k + 1) / (6 * k - 1) * _U[k] for k in range(1, 40)])


def _asym_sum(coef: np.ndarray, z: np.ndarray, alternate: bool, parity: int | None = None):
    """Sum of coef_k * z^{-k} (optionally alternating / one parity), cut at the smallest term."""
    total = np.zeros_like(z)
    done = np.zeros(z.shape, dtype=bool)
    last = np.full(z.shape, np.inf)
    ks = range(len(coef)) if parity is None else range(parity, len(coef), 2)
    for j, k in enumerate(ks):
        term = coef[k] * z ** (-float(k))
        if alternate:
            term = term * (-1.0) ** (j if parity is not None else k)
        mag = np.abs(term)
        stop = mag >= last
        done |= stop
        total = np.where(done, total, total + term)
        last = np.where(done, last, mag)
    return total


def _asym_pos(x: np.ndarray, deriv: bool) -> np.ndarray:
    zeta = 2.0 / 3.0 * x**1.5
    if not deriv:
        return np.exp(-zeta) / (2 * math.sqrt(math.pi) * x**0.25) * _asym_sum(_U, zeta, True)
    return -(x**0.25) * np.exp(-zeta) / (2 * math.sqrt(math.pi)) * _asym_sum(_V, zeta, True)


def _asym_neg(z: np.ndarray, deriv: bool) -> np.ndarray:
    # value at -z, z > 0
    zeta = 2.0 / 3.0 * z**1.5
    ph = zeta + math.pi / 4
    if not deriv:
        even = _asym_sum(_U, zeta, True, parity=0)
        odd = _asym_sum(_U, zeta, True, parity=1)
        return (np.sin(ph) * even - np.cos(ph) * odd) / (math.sqrt(math.pi) * z**0.25)
    even = _asym_sum(_V, zeta, True, parity=0)
    odd = _asym_sum(_V, zeta, True, parity=1)
    return -(z**0.25) * (np.cos(ph) * even + np.sin(ph) * odd) / math.sqrt(math.pi)


def _airy(x, deriv: bool):
    arr = np.asarray(x, dtype=float)
    flat = np.atleast_1d(arr).ravel()
    out = np.empty_like(flat)
    mid = (flat >= SERIES_LOW) & (flat <= SERIES_HIGH)
    hi = flat > SERIES_HIGH
    lo = flat < SERIES_LOW
    if mid.any():
        out[mid] = _series(flat[mid], deriv)
    if hi.any():
        with np.errstate(under="ignore"):
            out[hi] = _asym_pos(flat[hi], deriv)
    if lo.any():
        out[lo] = _asym_neg(-flat[lo], deriv)
    out = out.reshape(np.shape(arr))
    return float(out) if out.ndim == 0 else out


def airy_ai(x):
    """Airy function Ai(x); scalar or array input."""
    return _airy(x, deriv=False)


def airy_ai_prime(x):
    """Derivative Ai'(x), evaluated from its own series/asymptotics."""
    return _airy(x, deriv=True)


def ai_envelope(x):
    """exp(-(2/3) x^{3/2}) for x >= 0, 1 for x < 0."""
    x = np.asarray(x, dtype=float)
    return np.exp(-2.0 / 3.0 * np.clip(x, 0.0, None) ** 1.5)


def _upper_cutoff(x: float, y: float, decay: float, eps: float) -> float:
    # smallest L with exp(-decay*L) * env(x+L) * env(y+L) below eps
    L = 1.0
    while math.exp(-decay * L) * ai_envelope(x + L) * ai_envelope(y + L) > eps:
        L *= 1.5
        if L > 1e4:
            break
    return L


def airy_kernel(x: float, s: float, y: float, r: float, tol: float = 1e-12,
                envelope: float = 1e-14) -> float:
    """Extended Airy kernel K((x, s); (y, r)) by adaptive quadrature over lambda."""
    vals = airy_kernel_matrix([x], s, [y], r, tol=tol, envelope=envelope)
    return float(vals[0, 0])


def airy_kernel_matrix(xs, s: float, ys, r: float, tol: float = 1e-12,
                       envelope: float = 1e-14) -> np.ndarray:
    """Matrix K((x_i, s); (y_j, r)); one vector-valued adaptive quadrature for all entries."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise InvalidInputError("kernel arguments must be finite")
    dt = s - r
    if dt >= 0:
        upper = max(_upper_cutoff(float(xi), float(yj), dt, envelope) for xi in xs for yj in ys)

        def integrand(lam):
            return np.exp(-lam * dt) * np.outer(airy_ai(xs + lam), airy_ai(ys + lam))

        val, err = integrate.quad_vec(integrand, 0.0, upper, epsabs=tol, epsrel=tol, limit=2000)
    else:
        # |Ai| <= 0.54 everywhere; exp(lam (r - s)) handles the decay
        lower = math.log(envelope / 0.3) / (r - s)

        def integrand(lam):
            return np.exp(-lam * dt) * np.outer(airy_ai(xs + lam), airy_ai(ys + lam))

        val, err = integrate.quad_vec(integrand, lower, 0.0, epsabs=tol, epsrel=tol, limit=4000)
        val = -val
    if not np.all(np.isfinite(val)) or err > max(1e3 * tol, 1e-8):
        raise AccuracyError(f"kernel quadrature error estimate {err:.3g}", estimate=val)
    return val


def airy_kernel_identity(x, y):
    """Equal-time kernel from (Ai(x)Ai'(y) - Ai'(x)Ai(y)) / (x - y); diagonal Ai'^2 - x Ai^2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ax, ay = airy_ai(x), airy_ai(y)
    dx, dy = airy_ai_prime(x), airy_ai_prime(y)
    diff = x - y
    same = np.abs(diff) < 1e-7
    safe = np.where(same, 1.0, diff)
    off = (ax * dy - dx * ay) / safe
    diag = 0.5 * (dx * dx - x * ax * ax + dy * dy - y * ay * ay)
    out = np.where(same, diag, off)
    return float(out) if out.ndim == 0 else out


def det_density_bound(m, method: str = "quadrature") -> float:
    """det_{i,j} K(m_i, 0; m_j, 0): upper bound on the density of the top k Airy points at m."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if m.size > 1 and not np.all(np.diff(m) < 0):
        raise InvalidInputError("points must be strictly decreasing")
    if method == "quadrature":
        K = airy_kernel_matrix(m, 0.0, m, 0.0)
        K = 0.5 * (K + K.T)
    elif method == "identity":
        K = airy_kernel_identity(m[:, None], m[None, :])
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    if m.size > 1:
        d = np.sqrt(np.clip(np.diag(K), 1e-300, None))
        cond = np.linalg.cond(K / np.outer(d, d))
        if not np.isfinite(cond) or cond > 1e12:
            warnings.warn(f"kernel matrix condition number {cond:.3g}", ConditioningWarning,
                          stacklevel=2)
    return float(max(np.linalg.det(K), 0.0))


@dataclass(frozen=True)
class TailConstants:
    c: float = 1.0
    d: float = 1.0
    k: int = 1
    t: float = 1.0

    def __post_init__(self):
        if self.c <= 0 or self.d <= 0:
            raise InvalidInputError("c and d must be positive")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.t < 1:
            raise InvalidInputError("t must be >= 1")


def one_point_upper_rhs(m, constants: TailConstants = TailConstants()) -> float:
    """c * exp(-(4/3) sum m_i^{3/2}) for a nonincreasing m in [0, inf)^k."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    if np.any(m < 0) or np.any(np.diff(m) > 0):
        raise InvalidInputError("m must be nonnegative and nonincreasing")
    return float(constants.c * math.exp(-4.0 / 3.0 * np.sum(m**1.5)))


def one_point_lower_rhs(m: float, constants: TailConstants = TailConstants()) -> dict:
    """Both one-point tails of the affine part: upper exp(-4/3 m^{3/2} + c m^{5/4}), lower 2 exp(-d m^3)."""
    if m <= 0:
        raise InvalidInputError("m must be positive")
    return {
        "upper": math.exp(-4.0 / 3.0 * m**1.5 + constants.c * m**1.25),
        "lower": 2.0 * math.exp(-constants.d * m**3),
    }


def two_point_rhs(m: float, constants: TailConstants = TailConstants()) -> float:
    """exp(-m^2/(4t) - (4k-2)/3 m^{3/2} + c m^{5/4})."""
    if m <= 0:
        raise InvalidInputError("m must be positive")
    k, t, c = constants.k, constants.t, constants.c
    return math.exp(-m * m / (4.0 * t) - (4.0 * k - 2.0) / 3.0 * m**1.5 + c * m**1.25)


def two_point_exponent_coefficient(k: int) -> float:
    return (4.0 * k - 2.0) / 3.0


def _elementary_symmetric(eigs: np.ndarray, order: int) -> np.ndarray:
    e = np.zeros(order + 1, dtype=complex)
    e[0] = 1.0
    for lam in eigs:
        e[1:] = e[1:] + lam * e[:-1]
    return e.real


def tracy_widom_proxy(s_grid, order: int = 4, nodes: int = 40, span: float = 12.0):
    """Truncated inclusion-exclusion estimate of P(top Airy point <= s).

    Sums sum_{j<=order} (-1)^j / j! int det K over [s, s+span]^j using
    Gauss-Legendre nodes. Returns ``(cdf, remainder)`` where ``remainder`` is
    the magnitude of the first omitted term; treat the proxy as meaningful
    only where that remainder is small.
    """
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float))
    z, wq = np.polynomial.legendre.leggauss(nodes)
    cdf = np.empty_like(s_grid)
    rem = np.empty_like(s_grid)
    for i, s in enumerate(s_grid):
        pts = s + 0.5 * span * (z + 1)
        w = 0.5 * span * wq
        K = airy_kernel_identity(pts[:, None], pts[None, :])
        sq = np.sqrt(w)
        eigs = np.linalg.eigvals(sq[:, None] * K * sq[None, :])
        e = _elementary_symmetric(eigs, order + 1)
        signs = (-1.0) ** np.arange(order + 2)
        cdf[i] = float(np.sum(signs[: order + 1] * e[: order + 1]))
        rem[i] = abs(e[order + 1])
    return cdf, rem
