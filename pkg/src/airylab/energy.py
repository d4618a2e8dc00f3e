"""Parabola-avoidance energies.

The cheapest way (in Dirichlet energy) for a variance-2 path to get from
``(0, x)`` to ``(lam, y - lam**2)`` while staying above ``-s**2`` is the least
concave majorant: a tangent line, a stretch of parabola, another tangent line.
``energy_E`` is its closed-form energy; the mesh routines below recompute it
independently (convex hull, obstacle solver).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConvergenceWarning, InfeasibleGeometryError, InvalidInputError
from .grid import GridFunction


@dataclass(frozen=True)
class EnergyParams:
    x: float
    y: float
    lam: float

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise InvalidInputError("x and y must be nonnegative")
        if self.lam <= 0:
            raise InvalidInputError("lambda must be positive")

    @property
    def in_half_domain(self) -> bool:
        """sqrt(x), sqrt(y) < lam/2, the range where the J bounds are stated."""
        return math.sqrt(self.x) < self.lam / 2 and math.sqrt(self.y) < self.lam / 2


def _params(p=None, x=None, y=None, lam=None) -> EnergyParams:
    if isinstance(p, EnergyParams):
        return p
    if p is not None:
        return EnergyParams(*p)
    return EnergyParams(x, y, lam)


@dataclass(frozen=True)
class ConcaveMajorant:
    x: float
    y: float
    lam: float
    a: float
    b: float

    @property
    def left_slope(self) -> float:
        return -2.0 * math.sqrt(self.x)

    @property
    def right_slope(self) -> float:
        return 2.0 * math.sqrt(self.y) - 2.0 * self.lam

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        left = self.x + self.left_slope * s
        right = (self.y - self.lam**2) + self.right_slope * (s - self.lam)
        return np.where(s <= self.a, left, np.where(s >= self.b, right, -s * s))

    def on_mesh(self, mesh: int) -> GridFunction:
        return GridFunction.from_callable(self, 0.0, self.lam, mesh)


def concave_majorant(p=None, *, x=None, y=None, lam=None) -> ConcaveMajorant:
    """Minimal concave function from (0, x) to (lam, y - lam^2) above -s^2."""
    p = _params(p, x, y, lam)
    a = math.sqrt(p.x)
    b = p.lam - math.sqrt(p.y)
    if a > b:
        raise InfeasibleGeometryError(
            f"sqrt(x) + sqrt(y) = {a + math.sqrt(p.y):.6g} exceeds lambda = {p.lam:.6g}"
        )
    return ConcaveMajorant(p.x, p.y, p.lam, a, b)


def dirichlet_energy(g: GridFunction) -> float:
    """(1/4) int |g'|^2 with forward-difference slopes."""
    return float(0.25 * np.sum(np.diff(g.values) ** 2) / g.step)


def energy_E(p=None, *, x=None, y=None, lam=None) -> float:
    p = _params(p, x, y, lam)
    ry = math.sqrt(p.y)
    return 2.0 / 3.0 * p.x**1.5 + (p.lam - ry) ** 2 * ry + (p.lam - ry) ** 3 / 3.0


def bridge_energy_offset(p: EnergyParams) -> float:
    """(x - y + lam^2)^2 / (4 lam): energy of the straight bridge path."""
    return (p.x - p.y + p.lam**2) ** 2 / (4.0 * p.lam)


def energy_J(p=None, *, x=None, y=None, lam=None) -> float:
    p = _params(p, x, y, lam)
    return energy_E(p) - bridge_energy_offset(p)


def _upper_hull(px: np.ndarray, py: np.ndarray):
    """Monotone-chain upper hull of points already sorted by x."""
    hx: list = []
    hy: list = []
    for xi, yi in zip(px, py):
        while len(hx) >= 2:
            # drop the middle point if it lies on or below the chord
            cross = (hx[-1] - hx[-2]) * (yi - hy[-2]) - (hy[-1] - hy[-2]) * (xi - hx[-2])
            if cross >= 0:
                hx.pop()
                hy.pop()
            else:
                break
        hx.append(xi)
        hy.append(yi)
    return np.array(hx), np.array(hy)


def least_concave_majorant(obstacle: GridFunction, left: float, right: float) -> GridFunction:
    """Upper concave envelope of the interior obstacle nodes and the two endpoints.

    Endpoint values are pinned to ``left`` and ``right``; the obstacle is only
    consulted at interior nodes.
    """
    s = obstacle.nodes
    py = np.array(obstacle.values, dtype=float)
    py[0], py[-1] = left, right
    hx, hy = _upper_hull(s, py)
    return GridFunction(obstacle.start, obstacle.end, np.interp(s, hx, hy))


def hull_knots(obstacle: GridFunction, left: float, right: float) -> np.ndarray:
    """Mesh abscissae of the hull vertices (first and last are the endpoints)."""
    s = obstacle.nodes
    py = np.array(obstacle.values, dtype=float)
    py[0], py[-1] = left, right
    hx, _ = _upper_hull(s, py)
    return hx


def _pdas(psi, left, right, h, max_iter):
    """Primal-dual active set iteration for the 1-D discrete obstacle problem."""
    m = psi.size - 1
    n = m - 1
    obs = psi[1:-1]
    rhs = np.zeros(n)
    rhs[0] += left
    rhs[-1] += right
    line = np.linspace(left, right, m + 1)[1:-1]
    u = np.maximum(line, obs)
    lam = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    for it in range(1, max_iter + 1):
        new_active = lam + (obs - u) > 0
        if it > 1 and np.array_equal(new_active, active):
            return u, it, 0.0
        active = new_active
        # rows: active -> u_j = psi_j; inactive -> 2u_j - u_{j-1} - u_{j+1} = rhs_j
        ab = np.zeros((3, n))
        ab[1] = np.where(active, 1.0, 2.0)
        upper = np.where(active[:-1], 0.0, -1.0)
        lower = np.where(active[1:], 0.0, -1.0)
        ab[0, 1:] = upper
        ab[2, :-1] = lower
        b = np.where(active, obs, rhs)
        u = solve_banded((1, 1), ab, b)
        full = np.concatenate([[left], u, [right]])
        residual = 2 * full[1:-1] - full[:-2] - full[2:]
        lam = np.where(active, residual, 0.0)
    full = np.concatenate([[left], u, [right]])
    res = np.max(np.abs(np.minimum(full[1:-1] - obs, np.maximum(lam, 0))))
    return u, max_iter, float(res)


def _relax(psi, left, right, max_iter, tol):
    """Projected Gauss-Seidel: each node becomes the neighbour average, clamped."""
    m = psi.size - 1
    u = np.maximum(np.linspace(left, right, m + 1), psi)
    u[0], u[-1] = left, right
    change = math.inf
    for it in range(1, max_iter + 1):
        change = 0.0
        for j in range(1, m):
            new = max(0.5 * (u[j - 1] + u[j + 1]), psi[j])
            change = max(change, abs(new - u[j]))
            u[j] = new
        if change <= tol:
            return u[1:-1], it, change
    return u[1:-1], max_iter, change


def min_energy_above_obstacle(
    obstacle: GridFunction,
    left: float,
    right: float,
    iterations: int = 1_000_000,
    tol: float = 1e-8,
    method: str = "active-set",
):
    """Minimize the mesh Dirichlet energy over paths pinned at the ends and above the obstacle.

    Returns ``(minimizer, energy)``. ``method="relaxation"`` runs projected
    Gauss-Seidel (only practical for small meshes); the default active-set
    solver converges in a handful of banded solves.
    """
    psi = np.asarray(obstacle.values, dtype=float)
    if psi.size < 3:
        g = GridFunction(obstacle.start, obstacle.end, np.array([left, right]))
        return g, dirichlet_energy(g)
    if method == "active-set":
        u, used, resid = _pdas(psi, left, right, obstacle.step, min(iterations, psi.size + 5))
        done = resid == 0.0
    elif method == "relaxation":
        u, used, resid = _relax(psi, left, right, iterations, tol)
        done = resid <= tol
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    if not done:
        warnings.warn(
            f"obstacle solver stopped after {used} iterations, residual {resid:.3g}",
            ConvergenceWarning,
            stacklevel=2,
        )
    g = GridFunction(obstacle.start, obstacle.end, np.concatenate([[left], u, [right]]))
    return g, dirichlet_energy(g)


def parabola_obstacle(lam: float, mesh: int) -> GridFunction:
    return GridFunction.from_callable(lambda s: -s * s, 0.0, lam, mesh)
