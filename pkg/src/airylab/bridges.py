"""Variance-2 Brownian bridges, nonintersection checks and exact probabilities.

Every sampler takes an explicit :class:`RngState` (or a numpy Generator) so
results are reproducible bit-for-bit. Nonintersection is checked at mesh
nodes; an optional between-node crossing correction is available
(``crossing=True``) and is exact for a single pair of paths.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningWarning, InvalidInputError, LowAcceptanceError
from .grid import FunctionTuple, GridFunction

VARIANCE = 2.0


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: tuple = ()

    def __post_init__(self):
        stream = self.stream
        if isinstance(stream, (int, np.integer)):
            stream = (int(stream),)
        object.__setattr__(self, "stream", tuple(int(s) for s in stream))
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must fit in 64 unsigned bits")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(self.seed), spawn_key=self.stream)))

    def substream(self, i: int) -> "RngState":
        return RngState(self.seed, self.stream + (int(i),))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngState(int(rng)).generator()
    raise InvalidInputError("rng must be an RngState, Generator or integer seed")


@dataclass(frozen=True)
class BridgeSpec:
    s: float
    t: float
    x: tuple
    y: tuple
    mesh: int

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        y = tuple(float(v) for v in np.atleast_1d(self.y))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.s < self.t:
            raise InvalidInputError("need s < t")
        if len(x) != len(y) or not x:
            raise InvalidInputError("x and y must have the same length k >= 1")
        if not all(map(math.isfinite, x + y)):
            raise InvalidInputError("endpoint values must be finite")
        if int(self.mesh) < 1:
            raise InvalidInputError("mesh must be >= 1")

    @property
    def k(self) -> int:
        return len(self.x)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.s, self.t, self.mesh + 1)

    @property
    def ordered(self) -> bool:
        return bool(np.all(np.diff(self.x) < 0) and np.all(np.diff(self.y) < 0))


@dataclass(frozen=True)
class McEstimate:
    value: float
    se: float
    samples: int
    seed: int | None = None
    flag: str | None = None

    def __post_init__(self):
        if self.se < 0:
            raise InvalidInputError("standard error must be nonnegative")
        if self.samples < 1:
            raise InvalidInputError("samples must be >= 1")


def merge_estimates(parts) -> McEstimate:
    """Combine shard estimates by inverse-variance weighting."""
    parts = list(parts)
    if not parts:
        raise InvalidInputError("nothing to merge")
    n = sum(p.samples for p in parts)
    flag = next((p.flag for p in parts if p.flag), None)
    if any(p.se == 0 for p in parts):
        value = sum(p.value * p.samples for p in parts) / n
        return McEstimate(value, 0.0, n, parts[0].seed, flag)
    w = np.array([1.0 / p.se**2 for p in parts])
    value = float(np.sum(w * [p.value for p in parts]) / np.sum(w))
    return McEstimate(value, float(1.0 / math.sqrt(np.sum(w))), n, parts[0].seed, flag)


def bridge_paths(gen: np.random.Generator, s: float, t: float, x, y, mesh: int, n: int,
                 variance: float = VARIANCE) -> np.ndarray:
    """(n, k, mesh + 1) array of independent bridges; increments plus linear correction."""
    x = np.asarray(x, dtype=float).reshape(-1, 1) if np.ndim(x) <= 1 else np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float).reshape(-1, 1) if np.ndim(y) <= 1 else np.asarray(y, dtype=float)[..., None]
    k = x.shape[-2]
    dt = (t - s) / mesh
    inc = gen.standard_normal((n, k, mesh)) * math.sqrt(variance * dt)
    w = np.zeros((n, k, mesh + 1))
    np.cumsum(inc, axis=-1, out=w[..., 1:])
    frac = np.linspace(0.0, 1.0, mesh + 1)
    return x + (y - x) * frac + w - w[..., -1:] * frac


def sample_bridge_tuple(spec: BridgeSpec, rng, variance: float = VARIANCE) -> FunctionTuple:
    paths = bridge_paths(as_generator(rng), spec.s, spec.t, spec.x, spec.y, spec.mesh, 1, variance)[0]
    paths[:, 0] = spec.x
    paths[:, -1] = spec.y
    return FunctionTuple.from_array(paths, spec.s, spec.t)


def window_mask(nodes: np.ndarray, window) -> np.ndarray:
    """Boolean mask of nodes inside J; J is None (everything), (a, b), or a list of such pairs."""
    if window is None:
        return np.ones(nodes.size, dtype=bool)
    pairs = [window] if np.ndim(window) == 1 and len(window) == 2 and np.isscalar(window[0]) else window
    h = (nodes[-1] - nodes[0]) / max(nodes.size - 1, 1)
    eps = 1e-9 * max(h, 1.0)
    mask = np.zeros(nodes.size, dtype=bool)
    for a, b in pairs:
        if a > b:
            raise InvalidInputError(f"window ({a}, {b}) is empty")
        mask |= (nodes >= a - eps) & (nodes <= b + eps)
    return mask


def _lower_values(lower, nodes: np.ndarray):
    if lower is None:
        return None
    if isinstance(lower, (int, float)) and lower == -math.inf:
        return None
    if isinstance(lower, GridFunction):
        if lower.mesh != nodes.size - 1 or not (
            np.isclose(lower.start, nodes[0]) and np.isclose(lower.end, nodes[-1])
        ):
            raise InvalidInputError("lower boundary must share the tuple's mesh")
        return np.asarray(lower.values)
    arr = np.asarray(lower, dtype=float)
    if arr.shape[-1] != nodes.size:
        raise InvalidInputError("lower boundary must share the tuple's mesh")
    return arr


def ni_mask(paths: np.ndarray, lower=None, mask=None) -> np.ndarray:
    """Vectorized NI over a batch (..., k, m+1); ``lower`` broadcasts against (..., m+1)."""
    sel = paths if mask is None else paths[..., mask]
    ok = np.all(sel[..., :-1, :] > sel[..., 1:, :], axis=(-2, -1))
    if lower is not None:
        low = lower if mask is None else lower[..., mask]
        ok &= np.all(sel[..., -1, :] > low, axis=-1)
    return ok


def ni_indicator(f, lower=None, window=None) -> bool:
    """True iff f_1 > ... > f_k > lower at every mesh node in the window."""
    if isinstance(f, GridFunction):
        f = FunctionTuple((f,))
    nodes = f.nodes
    low = _lower_values(lower, nodes)
    return bool(ni_mask(f.as_array(), low, window_mask(nodes, window)))


def crossing_factor(paths: np.ndarray, lower, mask: np.ndarray, step: float,
                    variance: float = VARIANCE, lower_variance: float = 0.0) -> np.ndarray:
    """Probability that no ordered pair touches between consecutive nodes, given the nodes.

    Uses the bridge crossing formula exp(-2 d0 d1 / (sigma^2 h)) cell by cell
    and pair by pair; the product is exact for one pair and an upper bound
    otherwise. Only meaningful where the node values already satisfy NI.
    ``lower_variance`` is the between-node variance rate of the boundary
    itself: 0 for a fixed function, ``variance`` when the boundary is another
    Brownian-like line known only at the nodes.
    """
    cells = mask[:-1] & mask[1:]
    diffs = paths[..., :-1, :] - paths[..., 1:, :]
    logp = _log_no_cross(diffs, cells, 2.0 * variance * step)
    total = np.sum(logp, axis=(-2, -1))
    if lower is not None:
        gap = paths[..., -1, :] - lower
        scale = (variance + lower_variance) * step
        total = total + np.sum(_log_no_cross(gap, cells, scale), axis=-1)
    return np.exp(total)


def _log_no_cross(d: np.ndarray, cells: np.ndarray, scale: float) -> np.ndarray:
    d0 = np.clip(d[..., :-1], 0.0, None)
    d1 = np.clip(d[..., 1:], 0.0, None)
    with np.errstate(divide="ignore"):
        out = np.log1p(-np.exp(-2.0 * d0 * d1 / scale))
    return np.where(cells, out, 0.0)


def _zero_hit_bound(n: int) -> float:
    # one-sided 95% upper confidence bound for a binomial rate with no successes
    return 1.0 - 0.05 ** (1.0 / n)


def acceptance_prob_mc(spec: BridgeSpec, lower=None, window=None, n: int = 10_000, rng=0,
                       crossing: bool = False, chunk: int = 20_000,
                       variance: float = VARIANCE, lower_variance: float = 0.0) -> McEstimate:
    """Monte Carlo estimate of P(NI(lower, J)) for free bridges.

    With ``crossing=True`` each accepted draw is weighted by its
    between-node survival probability (a Rao-Blackwellised continuum estimate).
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    seed = rng.seed if isinstance(rng, RngState) else None
    gen = as_generator(rng)
    nodes = spec.nodes
    low = _lower_values(lower, nodes)
    mask = window_mask(nodes, window)
    step = (spec.t - spec.s) / spec.mesh
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        b = min(chunk, n - done)
        paths = bridge_paths(gen, spec.s, spec.t, spec.x, spec.y, spec.mesh, b, variance)
        vals = ni_mask(paths, low, mask).astype(float)
        if crossing:
            vals = vals * crossing_factor(paths, low, mask, step, variance, lower_variance)
        total += vals.sum()
        total_sq += np.sum(vals * vals)
        done += b
    mean = total / n
    if total == 0:
        return McEstimate(0.0, _zero_hit_bound(n), n, seed, "no-successes")
    var = max(total_sq / n - mean * mean, 0.0)
    return McEstimate(float(mean), float(math.sqrt(var / n)), n, seed)


def km_nonintersect_prob(x, y, t: float, variance: float = VARIANCE) -> float:
    """Exact P(k free bridges from x to y over time t never meet), by Karlin-McGregor."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise InvalidInputError("x and y must have the same length")
    if t <= 0:
        raise InvalidInputError("t must be positive")
    if np.any(np.diff(x) >= 0) or np.any(np.diff(y) >= 0):
        raise InvalidInputError("x and y must be strictly decreasing")
    if x.size == 1:
        return 1.0
    logk = -((x[:, None] - y[None, :]) ** 2) / (2.0 * variance * t)
    rowmax = logk.max(axis=1, keepdims=True)
    scaled = np.exp(logk - rowmax)
    # the Gaussian matrix is totally positive; a tiny condition reciprocal means the
    # determinant is dominated by rounding
    rcond = 1.0 / np.linalg.cond(scaled)
    if not np.isfinite(rcond) or rcond < 1e-12:
        warnings.warn(f"Karlin-McGregor matrix reciprocal condition {rcond:.3g}",
                      ConditioningWarning, stacklevel=2)
    sign, logdet = np.linalg.slogdet(scaled)
    if sign <= 0:
        return 0.0
    val = math.exp(logdet + rowmax.sum() - np.trace(logk))
    return float(min(max(val, 0.0), 1.0))


def km_lower_bound(alpha: float, t: float, k: int) -> float:
    """exp(-k^3 eps / 6) (eps / 2)^{k(k-1)/2} with eps = alpha^2 / t."""
    eps = alpha * alpha / t
    return math.exp(-(k**3) * eps / 6.0) * (eps / 2.0) ** (k * (k - 1) / 2.0)


def sample_conditioned_batch(spec: BridgeSpec, count: int, lower=None, window=None, rng=0,
                             max_tries: int = 10**7, crossing: bool = False, chunk: int = 20_000,
                             variance: float = VARIANCE, lower_variance: float = 0.0):
    """``count`` independent draws of the conditioned law; returns (paths, tries)."""
    gen = as_generator(rng)
    nodes = spec.nodes
    low = _lower_values(lower, nodes)
    mask = window_mask(nodes, window)
    step = (spec.t - spec.s) / spec.mesh
    out = []
    have = 0
    tries = 0
    while have < count:
        if tries >= max_tries:
            raise LowAcceptanceError(
                f"accepted {have} of {count} after {tries} tries", rate=have / max(tries, 1)
            )
        b = min(chunk, max_tries - tries)
        paths = bridge_paths(gen, spec.s, spec.t, spec.x, spec.y, spec.mesh, b, variance)
        ok = ni_mask(paths, low, mask)
        if crossing:
            ok &= gen.random(b) < crossing_factor(paths, low, mask, step, variance, lower_variance)
        idx = np.flatnonzero(ok)[: count - have]
        if idx.size and have + idx.size == count:
            tries += int(idx[-1]) + 1
        else:
            tries += b
        out.append(paths[idx])
        have += idx.size
    paths = np.concatenate(out)
    paths[..., 0] = spec.x
    paths[..., -1] = spec.y
    return paths, tries


def sample_conditioned_bridges(spec: BridgeSpec, lower=None, window=None, rng=0,
                               max_tries: int = 10**6, crossing: bool = False,
                               variance: float = VARIANCE):
    """Rejection sampler for the NI-conditioned law. Returns ``(tuple, tries)``."""
    paths, tries = sample_conditioned_batch(spec, 1, lower, window, rng, max_tries, crossing,
                                            chunk=min(4096, max_tries), variance=variance)
    return FunctionTuple.from_array(paths[0], spec.s, spec.t), tries


@dataclass
class DominanceReport:
    max_violation_se: float
    probe_times: np.ndarray
    table: list = field(default_factory=list)

    def holds(self, threshold: float = 3.0) -> bool:
        return self.max_violation_se <= threshold


def dominance_check(spec_low: BridgeSpec, spec_high: BridgeSpec, lower_low=None, lower_high=None,
                    window=None, n: int = 10_000, rng=0, probe_times=None,
                    levels: int = 21, max_tries: int = 10**7) -> DominanceReport:
    """Compare coordinate marginals of two conditioned laws.

    The high law should dominate: F_high(v) <= F_low(v) at every level. The
    report gives the largest (F_high - F_low) / SE over coordinates, probe
    times and levels.
    """
    if spec_low.k != spec_high.k or spec_low.mesh != spec_high.mesh:
        raise InvalidInputError("specs must have the same k and mesh")
    if np.any(np.array(spec_low.x) > np.array(spec_high.x)) or np.any(
        np.array(spec_low.y) > np.array(spec_high.y)
    ):
        raise InvalidInputError("endpoints of the low spec must not exceed the high spec")
    nodes = spec_low.nodes
    ll, lh = _lower_values(lower_low, nodes), _lower_values(lower_high, nodes)
    if ll is not None and lh is not None and np.any(ll > lh):
        raise InvalidInputError("lower_low must not exceed lower_high")
    if lh is None and ll is not None:
        raise InvalidInputError("lower_low must not exceed lower_high")
    gen = as_generator(rng)
    low_paths, _ = sample_conditioned_batch(spec_low, n, lower_low, window, gen, max_tries)
    high_paths, _ = sample_conditioned_batch(spec_high, n, lower_high, window, gen, max_tries)
    if probe_times is None:
        probe_times = spec_low.s + (spec_low.t - spec_low.s) * np.array([0.25, 0.5, 0.75])
    probe_times = np.atleast_1d(np.asarray(probe_times, dtype=float))
    idx = np.array([int(np.argmin(np.abs(nodes - u))) for u in probe_times])
    worst = -math.inf
    table = []
    for i in range(spec_low.k):
        for u, j in zip(probe_times, idx):
            a = np.sort(low_paths[:, i, j])
            b = np.sort(high_paths[:, i, j])
            grid = np.quantile(np.concatenate([a, b]), np.linspace(0.02, 0.98, levels))
            fl = np.searchsorted(a, grid, side="right") / a.size
            fh = np.searchsorted(b, grid, side="right") / b.size
            se = np.sqrt(fl * (1 - fl) / a.size + fh * (1 - fh) / b.size)
            z = np.where(se > 0, (fh - fl) / np.where(se > 0, se, 1.0), 0.0)
            zmax = float(z.max())
            worst = max(worst, zmax)
            table.append({"coordinate": i + 1, "time": float(u), "max_violation_se": zmax})
    return DominanceReport(worst, probe_times, table)


# ---- sup / inf / endpoint of Brownian motion -------------------------------------------

def _heat(z, t):
    return np.exp(-z * z / (4.0 * t)) / np.sqrt(4.0 * np.pi * t)


def _heat_d1(z, t):
    return -z / (2.0 * t) * _heat(z, t)


def _heat_d2(z, t):
    return (z * z / (4.0 * t * t) - 1.0 / (2.0 * t)) * _heat(z, t)


def _check_reflection_domain(a, b, x, t):
    a, b, x = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, x)))
    if t <= 0:
        raise InvalidInputError("t must be positive")
    tol = 1e-12
    if np.any(a < -tol) or np.any(b < -tol) or np.any(x > a + tol) or np.any(x < -b - tol):
        raise InvalidInputError("need a, b >= 0 and -b <= x <= a")
    return a, b, x


def _image_terms(w, t):
    wmin = float(np.min(w)) if np.size(w) else 1.0
    if wmin <= 0:
        return 400
    return int(min(400, math.ceil(8.0 * math.sqrt(t) / wmin) + 2))


def reflection_density(a, b, x, t: float = 1.0):
    """Joint density of (sup, -inf, endpoint) of variance-2 Brownian motion on [0, t].

    Full method-of-images series; integrates to one over a, b >= 0, -b <= x <= a.
    """
    a, b, x = _check_reflection_domain(a, b, x, t)
    w = a + b
    total = np.zeros(np.broadcast(a, b, x).shape)
    for k in range(1, _image_terms(w, t) + 1):
        total += 4 * k * k * (_heat_d2(x + 2 * k * w, t) + _heat_d2(x - 2 * k * w, t))
        total -= 4 * k * (k + 1) * _heat_d2(2 * a - x + 2 * k * w, t)
        if k >= 2:
            total -= 4 * k * (k - 1) * _heat_d2(2 * a - x - 2 * k * w, t)
    total = np.where(w > 0, total, 0.0)
    return float(total) if total.ndim == 0 else total


def reflection_survival(a, b, x, t: float = 1.0):
    """P(sup >= a, -inf >= b, B(t) in dx) / dx, full image series."""
    a, b, x = _check_reflection_domain(a, b, x, t)
    w = a + b
    total = _heat(2 * b + x, t)
    for k in range(1, _image_terms(w, t) + 1):
        for kk in (k, -k):
            total = total + _heat(x + 2 * kk * w, t) - _heat(2 * a - x + 2 * kk * w, t)
    return float(total) if np.ndim(total) == 0 else total


def reflection_h(a, b, x, t: float = 1.0):
    """Single-image closed form h(a, b, x)."""
    z = 2 * np.asarray(a, dtype=float) + 2 * np.asarray(b, dtype=float) - np.asarray(x, dtype=float)
    sq = math.sqrt(math.pi)
    return (z * z / (8 * sq * t**2.5) - 1.0 / (2 * sq * t**1.5)) * np.exp(-z * z / (4 * t))


def reflection_density_leading(a, b, x, t: float = 1.0):
    """h(a, b, x) + h(a, b, -x), the two-image shortcut; it integrates to 1/6, not 1."""
    a, b, x = _check_reflection_domain(a, b, x, t)
    return reflection_h(a, b, x, t) + reflection_h(a, b, -x, t)


def reflection_survival_leading(a, b, x, t: float = 1.0):
    """(4 pi t)^{-1/2} [exp(-(2a+2b-x)^2/4t) + exp(-(2a+2b+x)^2/4t)]: the two leading images."""
    a, b, x = _check_reflection_domain(a, b, x, t)
    w = a + b
    return _heat(2 * w - x, t) + _heat(2 * w + x, t)


def reflection_cell_prob(a_range, b_range, x_range, t: float = 1.0, nodes: int = 24) -> float:
    """Probability of the box a_range x b_range x x_range under ``reflection_density``.

    The x-integral is done in closed form (p'' integrates to p'); a and b use
    Gauss-Legendre nodes.
    """
    z, wq = np.polynomial.legendre.leggauss(nodes)
    (a0, a1), (b0, b1) = a_range, b_range
    aa = 0.5 * (a1 - a0) * (z + 1) + a0
    bb = 0.5 * (b1 - b0) * (z + 1) + b0
    A, B = np.meshgrid(aa, bb, indexing="ij")
    W = np.outer(wq, wq) * 0.25 * (a1 - a0) * (b1 - b0)
    lo = np.maximum(x_range[0], -B)
    hi = np.minimum(x_range[1], A)
    ok = hi > lo
    lo = np.where(ok, lo, 0.0)
    hi = np.where(ok, hi, 0.0)
    w = A + B
    inner = np.zeros_like(A)
    for k in range(1, _image_terms(w, t) + 1):
        for kk, coef in ((k, 4 * k * k), (-k, 4 * k * k)):
            inner += coef * (_heat_d1(hi + 2 * kk * w, t) - _heat_d1(lo + 2 * kk * w, t))
        for kk in (k, -k):
            c = 4 * kk * (kk + 1)
            if c:
                # d/dx p'(2a - x + c0) = -p''(...)
                inner -= c * (_heat_d1(2 * A - lo + 2 * kk * w, t) - _heat_d1(2 * A - hi + 2 * kk * w, t))
    return float(np.sum(W * np.where(ok, inner, 0.0)))


def brownian_extremes(n: int, t: float = 1.0, steps: int = 64, rng=0, variance: float = VARIANCE,
                      chunk: int = 50_000):
    """Samples of (sup, -inf, endpoint) for Brownian motion from 0 on [0, t].

    Walk values at ``steps`` nodes are exact; within each cell the bridge
    maximum and minimum are drawn from their exact conditional laws (each
    independently of the other, which only matters when both extremes sit
    in one cell).
    """
    gen = as_generator(rng)
    h = t / steps
    sup = np.empty(n)
    inf = np.empty(n)
    end = np.empty(n)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        walk = np.zeros((m, steps + 1))
        np.cumsum(gen.standard_normal((m, steps)) * math.sqrt(variance * h), axis=1, out=walk[:, 1:])
        u, v = walk[:, :-1], walk[:, 1:]
        d2 = (v - u) ** 2
        top = 0.5 * (u + v + np.sqrt(d2 - 2 * variance * h * np.log(gen.random((m, steps)))))
        bot = 0.5 * (u + v - np.sqrt(d2 - 2 * variance * h * np.log(gen.random((m, steps)))))
        sup[done:done + m] = np.maximum(top.max(axis=1), 0.0)
        inf[done:done + m] = np.maximum(-bot.min(axis=1), 0.0)
        end[done:done + m] = walk[:, -1]
        done += m
    return sup, inf, end
