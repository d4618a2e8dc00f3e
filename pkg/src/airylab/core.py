"""Deterministic functionals of function tuples.

The Tetris map stacks recentered functions on a zero floor; ``s_functional``
reads the density exponent off the stacked endpoints. ``theta``/``alpha_k``
and ``opt_g``/``max_g_over_dbeta`` cover the sphere maximization that
controls how small the Airy density can get.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, InvalidInputError
from .grid import FunctionTuple, as_tuple

__all__ = [
    "SphereMaxResult",
    "tetris",
    "tetris_shifts",
    "s_functional",
    "theta",
    "theta_grad",
    "alpha_k",
    "schilder_rate",
    "opt_g",
    "max_g_over_dbeta",
]


def tetris_shifts(values: np.ndarray) -> np.ndarray:
    """Starting heights ``T f_i(0)`` for a (k, m+1) array of node values.

    Layers are dropped bottom-up: the last row rests on the zero floor, each
    earlier row on the already-stacked row below it.
    """
    f = np.atleast_2d(np.asarray(values, dtype=float))
    g = f - f[:, :1]
    k = g.shape[0]
    shifts = np.empty(k)
    below = np.zeros(g.shape[1])
    for i in range(k - 1, -1, -1):
        shifts[i] = np.max(below - g[i])
        below = g[i] + shifts[i]
    return shifts


def tetris(f) -> FunctionTuple:
    """The Tetris map ``T f``: minimal ordered nonnegative stack with ``T f - T f(0) = f - f(0)``."""
    f = as_tuple(f)
    vals = f.as_array()
    shifts = tetris_shifts(vals)
    stacked = vals - vals[:, :1] + shifts[:, None]
    return FunctionTuple.from_array(stacked, f.start, f.end)


def s_functional(f) -> float:
    """(2/3) * sum_i ([T f_i(start)]^{3/2} + [T f_i(end)]^{3/2})."""
    tf = tetris(f).as_array()
    ends = np.clip(tf[:, [0, -1]], 0.0, None)
    return float(2.0 / 3.0 * np.sum(ends**1.5))


def _suffix_sums(x: np.ndarray) -> np.ndarray:
    # along the last axis: out[..., j] = sum_{i >= j} x[..., i]
    return np.flip(np.cumsum(np.flip(x, axis=-1), axis=-1), axis=-1)


def theta(x) -> float | np.ndarray:
    """Theta(x) = 2/3 (sum |x_i|)^{3/2} + 4/3 sum_{j>=2} (sum_{i>=j} |x_i|)^{3/2}.

    Accepts a single vector or a batch with the coordinate axis last.
    """
    x = np.abs(np.asarray(x, dtype=float))
    if x.ndim == 0 or x.shape[-1] < 1:
        raise InvalidInputError("theta needs a vector of length k >= 1")
    tails = _suffix_sums(x)
    out = 2.0 / 3.0 * tails[..., 0] ** 1.5 + 4.0 / 3.0 * np.sum(tails[..., 1:] ** 1.5, axis=-1)
    return float(out) if out.ndim == 0 else out


def theta_grad(x) -> np.ndarray:
    """Gradient of theta on the closed nonnegative orthant."""
    x = np.asarray(x, dtype=float)
    roots = np.sqrt(_suffix_sums(np.abs(x)))
    # d/dx_m = sqrt(T_1) + 2 sum_{j=2}^{m} sqrt(T_j)
    inner = np.concatenate([[0.0], np.cumsum(roots[1:])])
    return (roots[0] + 2.0 * inner) * np.sign(np.where(x == 0, 1.0, x))


@dataclass(frozen=True)
class SphereMaxResult:
    alpha: float
    direction: np.ndarray
    iterations: int


def _ascend(x0: np.ndarray, tol: float, max_iter: int):
    """Normalized-gradient iteration x <- grad/|grad|.

    Theta is convex, so each step cannot decrease it; the iteration stops at a
    KKT point of the sphere-constrained problem.
    """
    x = x0 / np.linalg.norm(x0)
    val = theta(x)
    for it in range(1, max_iter + 1):
        g = theta_grad(x)
        x_new = g / np.linalg.norm(g)
        new_val = theta(x_new)
        if abs(new_val - val) <= 1e-3 * tol and np.linalg.norm(x_new - x) <= math.sqrt(tol):
            return x_new, new_val, it, True
        x, val = x_new, new_val
    return x, val, max_iter, False


def _orthant_sphere_grid(k: int, step: float) -> np.ndarray:
    if k == 2:
        phi = np.arange(0.0, np.pi / 2 + step, step).clip(max=np.pi / 2)
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    th = np.arange(0.0, np.pi / 2 + step, step).clip(max=np.pi / 2)
    tt, pp = np.meshgrid(th, th, indexing="ij")
    return np.stack(
        [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
    ).reshape(-1, 3)


def alpha_k(
    k: int,
    tolerance: float = 1e-10,
    starts: int = 32,
    grid_step: float = 1e-3,
    max_iter: int = 10_000,
    seed: int = 0,
) -> SphereMaxResult:
    """Maximum of theta on the unit sphere.

    Theta only sees |x_i|, so the search runs on the nonnegative orthant:
    multi-start ascent, plus a dense angular grid seed when ``k <= 3``.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if tolerance <= 0:
        raise InvalidInputError("tolerance must be positive")
    if k == 1:
        return SphereMaxResult(2.0 / 3.0, np.array([1.0]), 0)

    rng = np.random.default_rng(seed)
    seeds = [np.eye(k)[-1], np.ones(k)]
    seeds += list(np.abs(rng.standard_normal((starts, k))))
    if k in (2, 3):
        pts = _orthant_sphere_grid(k, grid_step)
        seeds.append(pts[np.argmax(theta(pts))])

    best = None
    total_iter = 0
    any_converged = False
    for x0 in seeds:
        x, val, it, ok = _ascend(np.asarray(x0, dtype=float), tolerance, max_iter)
        total_iter += it
        any_converged |= ok
        if best is None or val > best[1]:
            best = (x, val)
    if not any_converged:
        raise ConvergenceError(f"alpha_k ascent did not converge for k={k}", best=best[1])
    x = np.clip(best[0], 0.0, None)
    x /= np.linalg.norm(x)
    return SphereMaxResult(float(theta(x)), x, total_iter)


def schilder_rate(f) -> float:
    """Mesh version of (1/4) sum_i int |f_i'|^2, forward differences."""
    f = as_tuple(f)
    vals = f.as_array()
    h = (f.end - f.start) / f.mesh
    return float(0.25 * np.sum(np.diff(vals, axis=1) ** 2) / h)


def _check_w(a, b, x, atol=1e-12):
    a, b, x = (np.asarray(v, dtype=float).ravel() for v in (a, b, x))
    if not (a.size == b.size == x.size) or a.size == 0:
        raise InvalidInputError("a, b, x must be vectors of the same length k >= 1")
    if np.any(a < -atol) or np.any(b < -atol) or np.any(x > a + atol) or np.any(x < -b - atol):
        raise InvalidInputError("point outside W^k: need a, b >= 0 and -b <= x <= a")
    return a, b, x


def _y_vector(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Y_i = sum_{j > i} a_j + sum_{j >= i} b_j
    tail_a = _suffix_sums(a)
    return np.append(tail_a[1:], 0.0) + _suffix_sums(b)


def opt_g(a, b, x) -> float:
    """g(a, b, x) = 2/3 sum_i (Y_i^{3/2} + (Y_i + x_i)^{3/2}) on W^k."""
    a, b, x = _check_w(a, b, x)
    y = _y_vector(a, b)
    return float(2.0 / 3.0 * np.sum(y**1.5 + np.clip(y + x, 0.0, None) ** 1.5))


def _dbeta_radius(a, b, x) -> np.ndarray:
    return 2 * a + 2 * b - np.abs(x)


def _reduced_max(k: int, beta: float, starts: int, seed: int) -> float:
    """Max of g over points (x, 0, x) with x >= 0, |x| = beta."""

    def neg(v):
        v = np.abs(v)
        n = np.linalg.norm(v)
        if n == 0:
            return 0.0
        v = beta * v / n
        return -opt_g(v, np.zeros(k), v)

    rng = np.random.default_rng(seed)
    inits = [np.eye(k)[-1], np.ones(k)] + list(np.abs(rng.standard_normal((starts, k))))
    if k in (2, 3):
        pts = _orthant_sphere_grid(k, 1e-2)
        vals = [neg(p) for p in pts[:: max(1, len(pts) // 2000)]]
        inits.append(pts[:: max(1, len(pts) // 2000)][int(np.argmin(vals))])
    best = -math.inf
    for x0 in inits:
        res = optimize.minimize(neg, x0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 20_000})
        best = max(best, -res.fun)
    return best


def _direct_max(k: int, beta: float, starts: int, seed: int) -> float:
    """Generic SLSQP search over all of D_beta (no structural assumption)."""
    rng = np.random.default_rng(seed)

    def unpack(u):
        return u[:k], u[k:2 * k], u[2 * k:]

    def neg(u):
        a, b, x = unpack(u)
        y = _y_vector(np.clip(a, 0, None), np.clip(b, 0, None))
        return -2.0 / 3.0 * np.sum(np.clip(y, 0, None) ** 1.5 + np.clip(y + x, 0.0, None) ** 1.5)

    cons = [
        {"type": "ineq", "fun": lambda u: u[:k]},
        {"type": "ineq", "fun": lambda u: u[k:2 * k]},
        {"type": "ineq", "fun": lambda u: u[:k] - u[2 * k:]},
        {"type": "ineq", "fun": lambda u: u[2 * k:] + u[k:2 * k]},
        {"type": "ineq", "fun": lambda u: beta**2 - np.sum(_dbeta_radius(*unpack(u)) ** 2)},
    ]
    best = -math.inf
    for _ in range(starts):
        a = rng.uniform(0, beta, k)
        b = rng.uniform(0, beta / 2, k)
        x = rng.uniform(-b, a)
        u0 = np.concatenate([a, b, x])
        r = np.sqrt(np.sum(_dbeta_radius(a, b, x) ** 2))
        if r > beta:
            u0 *= beta / r
        res = optimize.minimize(neg, u0, method="SLSQP", constraints=cons,
                                options={"ftol": 1e-12, "maxiter": 1000})
        a, b, x = unpack(res.x)
        feasible = (
            np.all(a >= -1e-7) and np.all(b >= -1e-7) and np.all(x <= a + 1e-7)
            and np.all(x >= -b - 1e-7)
            and np.sum(_dbeta_radius(a, b, x) ** 2) <= beta**2 * (1 + 1e-6)
        )
        if feasible:
            best = max(best, -res.fun)
    if not math.isfinite(best):
        raise ConvergenceError("direct search over D_beta found no feasible optimum")
    return best


def max_g_over_dbeta(k: int, beta: float, method: str = "reduced", starts: int = 32,
                     seed: int = 0) -> float:
    """max {g(u) : u in D_beta}.

    ``method="reduced"`` searches only the points (x, 0, x) where the maximum
    is known to sit; ``method="direct"`` runs a generic constrained search
    over the whole set and is meant as a cross-check.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if beta <= 0:
        raise InvalidInputError("beta must be positive")
    if method == "reduced":
        return _reduced_max(k, beta, starts, seed)
    if method == "direct":
        return _direct_max(k, beta, starts, seed)
    raise InvalidInputError(f"unknown method {method!r}")
