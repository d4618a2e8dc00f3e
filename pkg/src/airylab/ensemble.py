"""Finite-n surrogate of the parabolic Airy line ensemble and the experiments on it.

The surrogate is the eigenvalue process of a Hermitian Brownian bridge on
``[-M, M]`` (diagonal variance 2, off-diagonal real and imaginary parts
variance 1), which is exactly ``n`` nonintersecting variance-2 bridges. Near
the midpoint, ``(lam(theta tau) - 2 sqrt(nM)) / (sqrt(M) n^{-1/6})`` with
``theta = M n^{-1/3}`` approximates the parabolic ensemble.

The patch-freed ensemble ``L`` reweights configurations by ``1/P`` (P the
probability that free bridges on the patch avoid each other and the line
below) and then puts free bridges on the patch.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .bridges import (
    VARIANCE,
    BridgeSpec,
    McEstimate,
    as_generator,
    bridge_paths,
    crossing_factor,
    ni_mask,
    sample_conditioned_batch,
    window_mask,
)
from .core import s_functional
from .errors import InvalidInputError, NumericError, ReliabilityWarning
from .grid import FunctionTuple


# ---- scaling ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeScaling:
    """Affine edge map for a watermelon with ``n`` lines on ``[-M, M]``.

    Rescaled time ``tau`` in ``[0, t]`` sits at raw time ``theta (tau + offset)``;
    the values get ``2 offset tau + offset^2`` added so that a window away from
    tau = 0 still targets the parabolic ensemble on ``[0, t]``.
    """

    n: int
    M: float
    offset: float = 0.0

    @property
    def center(self) -> float:
        return 2.0 * math.sqrt(self.n * self.M)

    @property
    def space_scale(self) -> float:
        return math.sqrt(self.M) * self.n ** (-1.0 / 6.0)

    @property
    def time_scale(self) -> float:
        return self.M * self.n ** (-1.0 / 3.0)

    def raw_times(self, tau) -> np.ndarray:
        return self.time_scale * (np.asarray(tau, dtype=float) + self.offset)

    def to_rescaled(self, tau, raw_values) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        a = self.offset
        return (np.asarray(raw_values) - self.center) / self.space_scale + 2 * a * tau + a * a

    def to_raw(self, tau, values) -> np.ndarray:
        tau = np.asarray(tau, dtype=float)
        a = self.offset
        return (np.asarray(values) - 2 * a * tau - a * a) * self.space_scale + self.center

    def record(self) -> dict:
        return {"n": self.n, "M": self.M, "offset": self.offset, "center": self.center,
                "space_scale": self.space_scale, "time_scale": self.time_scale}

    @classmethod
    def from_record(cls, rec: dict) -> "EdgeScaling":
        return cls(int(rec["n"]), float(rec["M"]), float(rec["offset"]))


def edge_scaling(n: int, M: float, t: float, center: bool = True) -> EdgeScaling:
    """Scaling for a rescaled window of length t; ``center`` puts the window mid-bridge."""
    sc = EdgeScaling(n, M, -t / 2.0 if center else 0.0)
    lo, hi = sc.raw_times([0.0, t])
    if lo <= -M or hi >= M:
        raise InvalidInputError(
            f"window of length {t} needs raw times [{lo:.4g}, {hi:.4g}] inside (-{M}, {M})"
        )
    return sc


def window_times(n: int, M: float, t: float, mesh: int, center: bool = True) -> np.ndarray:
    """Raw times matching the rescaled nodes j t / mesh, j = 0..mesh."""
    return edge_scaling(n, M, t, center).raw_times(np.linspace(0.0, t, mesh + 1))


# ---- watermelon ------------------------------------------------------------------------

@dataclass
class Watermelon:
    n: int
    M: float
    times: np.ndarray
    values: np.ndarray  # (n, len(times)), top line first
    scaling: EdgeScaling | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n, self.times.size):
            raise InvalidInputError("values must have shape (n, len(times))")

    @property
    def uniform(self) -> bool:
        if self.times.size < 2:
            return False
        return bool(np.allclose(np.diff(self.times), self.times[1] - self.times[0]))

    @property
    def paths(self) -> FunctionTuple:
        if not self.uniform:
            raise InvalidInputError("paths as GridFunctions need a uniform time mesh")
        return FunctionTuple.from_array(self.values, self.times[0], self.times[-1])

    def ordered(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.values[:-1] >= self.values[1:] - tol))


def _hermitian_increments(gen: np.random.Generator, shape, n: int) -> np.ndarray:
    z = gen.standard_normal(shape + (n, n)) + 1j * gen.standard_normal(shape + (n, n))
    # diagonal variance 2, off-diagonal real and imaginary parts variance 1
    return (z + np.conj(np.swapaxes(z, -1, -2))) / math.sqrt(2.0)


def watermelon_batch(gen: np.random.Generator, n: int, M: float, times, count: int,
                     keep: int | None = None, chunk: int = 256) -> np.ndarray:
    """(count, keep, len(times)) top eigenvalue paths of independent Hermitian bridges."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise InvalidInputError("times must be a nonempty 1-D array")
    if np.any(np.diff(times) <= 0) or times[0] < -M or times[-1] > M:
        raise InvalidInputError("times must be increasing and inside [-M, M]")
    keep = n if keep is None else keep
    grid = np.concatenate([[-M], times, [M]])
    dt = np.diff(grid)
    out = np.empty((count, keep, times.size))
    done = 0
    while done < count:
        b = min(chunk, count - done)
        inc = _hermitian_increments(gen, (b, dt.size), n) * np.sqrt(dt)[None, :, None, None]
        W = np.cumsum(inc, axis=1)
        frac = ((times + M) / (2.0 * M))[None, :, None, None]
        H = W[:, :-1] - frac * W[:, -1:]
        try:
            eig = np.linalg.eigvalsh(H)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
            bad = next(i for i in range(H.shape[1]) if not np.all(np.isfinite(H[:, i])))
            raise NumericError(f"eigen-solver failed at slice {bad}") from exc
        out[done:done + b] = np.moveaxis(eig[..., ::-1][..., :keep], -1, 1)
        done += b
    return out


def sample_watermelon(n: int, M: float = 1.0, mesh: int = 64, rng=0, times=None) -> Watermelon:
    """n nonintersecting variance-2 bridges from (-M, 0) to (M, 0) via a Hermitian bridge.

    ``times`` (raw, inside [-M, M]) overrides the uniform mesh; only those
    slices are diagonalized.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if times is None:
        if mesh < 2:
            raise InvalidInputError("mesh must be >= 2")
        times = np.linspace(-M, M, mesh + 1)
        inner = watermelon_batch(as_generator(rng), n, M, times[1:-1], 1)[0]
        values = np.zeros((n, times.size))
        values[:, 1:-1] = inner
    else:
        times = np.asarray(times, dtype=float)
        values = watermelon_batch(as_generator(rng), n, M, times, 1)[0]
    return Watermelon(n, M, times, values)


def _time_index(w: Watermelon, raw) -> np.ndarray:
    raw = np.atleast_1d(raw)
    idx = np.searchsorted(w.times, raw)
    idx = np.clip(idx, 0, w.times.size - 1)
    left = np.clip(idx - 1, 0, w.times.size - 1)
    best = np.where(np.abs(w.times[left] - raw) < np.abs(w.times[idx] - raw), left, idx)
    span = max(w.M, 1.0)
    if np.any(np.abs(w.times[best] - raw) > 1e-9 * span):
        raise InvalidInputError("requested window nodes are not sampled times of the watermelon")
    return best


def edge_rescale(w: Watermelon, k: int, t: float = 1.0, mesh: int = 16,
                 center: bool = True, scaling: EdgeScaling | None = None) -> FunctionTuple:
    """Top k lines mapped to rescaled coordinates on [0, t]."""
    if not 1 <= k <= w.n:
        raise InvalidInputError("need 1 <= k <= n")
    sc = scaling or w.scaling or edge_scaling(w.n, w.M, t, center)
    tau = np.linspace(0.0, t, mesh + 1)
    raw = sc.raw_times(tau)
    if raw[0] <= -w.M or raw[-1] >= w.M:
        raise InvalidInputError("window exceeds the rescaled domain")
    idx = _time_index(w, raw)
    w.scaling = sc
    return FunctionTuple.from_array(sc.to_rescaled(tau, w.values[:k, idx]), 0.0, t)


def gibbs_resample(w: Watermelon, k: int, a: float, b: float, rng=0,
                   max_tries: int = 10**6, crossing: bool = False) -> Watermelon:
    """Resample the top k lines strictly inside [a, b] given everything else."""
    if not 1 <= k <= w.n:
        raise InvalidInputError("need 1 <= k <= n")
    if not w.uniform:
        raise InvalidInputError("Gibbs resampling needs a uniform mesh")
    ia, ib = _time_index(w, [a, b])
    if ib - ia < 2:
        raise InvalidInputError("[a, b] must contain interior mesh nodes")
    h = w.times[1] - w.times[0]
    spec = BridgeSpec(w.times[ia], w.times[ib], w.values[:k, ia], w.values[:k, ib], int(ib - ia))
    lower = w.values[k, ia:ib + 1] if k < w.n else None
    lo = w.times[ia] + (h if ia == 0 else 0.0)
    hi = w.times[ib] - (h if ib == w.times.size - 1 else 0.0)
    # the line below is itself a Brownian-like path known only at the nodes
    paths, _ = sample_conditioned_batch(spec, 1, lower, (lo, hi), rng, max_tries, crossing,
                                        chunk=min(4096, max_tries), lower_variance=VARIANCE)
    values = w.values.copy()
    values[:k, ia + 1:ib] = paths[0][:, 1:-1]
    return Watermelon(w.n, w.M, w.times.copy(), values, w.scaling)


# ---- importance weights ----------------------------------------------------------------

def _acceptance_trials(gen, x0, x1, lower, t, mesh, trials, crossing, mask=None):
    """(B, trials) boolean NI outcomes of fresh free-bridge draws for each configuration."""
    paths = _batched_bridges(gen, x0, x1, t, mesh, trials)
    low = None if lower is None else lower[:, None, :]
    ok = ni_mask(paths, low, mask)
    if crossing:
        full = np.ones(mesh + 1, dtype=bool) if mask is None else mask
        f = crossing_factor(paths, low, full, t / mesh, lower_variance=VARIANCE)
        ok &= gen.random(ok.shape) < f
    return ok


def _batched_bridges(gen, x0, x1, t, mesh, trials):
    # (B, trials, k, mesh+1)
    B, k = x0.shape
    dt = t / mesh
    inc = gen.standard_normal((B, trials, k, mesh)) * math.sqrt(VARIANCE * dt)
    w = np.zeros((B, trials, k, mesh + 1))
    np.cumsum(inc, axis=-1, out=w[..., 1:])
    frac = np.linspace(0.0, 1.0, mesh + 1)
    a = x0[:, None, :, None]
    b = x1[:, None, :, None]
    return a + (b - a) * frac + w - w[..., -1:] * frac


@dataclass
class WeightResult:
    weights: np.ndarray
    trials: np.ndarray
    successes: np.ndarray
    censored: np.ndarray

    @property
    def p_hat(self) -> np.ndarray:
        return 1.0 / self.weights


def inverse_binomial_weights(gen, x0, x1, lower, t: float, mesh: int, hits: int = 16,
                             cap: int = 100_000, crossing: bool = True, batch: int = 8,
                             chunk: int = 2048) -> WeightResult:
    """Unbiased 1/P per configuration: draw until ``hits`` successes, weight = trials / hits.

    A configuration that reaches ``cap`` trials first is censored: its
    weight is trials / successes, or cap + 1 with no successes at all.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    B = x0.shape[0]
    lower = None if lower is None else np.atleast_2d(np.asarray(lower, dtype=float))
    trials = np.zeros(B, dtype=np.int64)
    succ = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    while active.any():
        ids = np.flatnonzero(active)
        for start in range(0, ids.size, chunk):
            sub = ids[start:start + chunk]
            ok = _acceptance_trials(gen, x0[sub], x1[sub], None if lower is None else lower[sub],
                                    t, mesh, batch, crossing)
            need = hits - succ[sub]
            csum = np.cumsum(ok, axis=1)
            reached = csum[:, -1] >= need
            first = np.argmax(csum >= need[:, None], axis=1)
            trials[sub] += np.where(reached, first + 1, batch)
            succ[sub] += np.where(reached, need, csum[:, -1])
        active = (succ < hits) & (trials < cap)
    censored = succ < hits
    w = np.where(censored, np.where(succ > 0, trials / np.maximum(succ, 1), cap + 1.0), trials / hits)
    return WeightResult(w.astype(float), trials, succ, censored)


def fixed_budget_weights(gen, x0, x1, lower, t: float, mesh: int, budget: int = 200,
                         crossing: bool = True, chunk: int = 512) -> WeightResult:
    """1/P-hat from a fixed number of draws; zero hits are floored at P-hat = 1/(budget+1) and censored."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    B = x0.shape[0]
    lower = None if lower is None else np.atleast_2d(np.asarray(lower, dtype=float))
    succ = np.zeros(B, dtype=np.int64)
    for start in range(0, B, chunk):
        sl = slice(start, start + chunk)
        ok = _acceptance_trials(gen, x0[sl], x1[sl], None if lower is None else lower[sl], t, mesh,
                                budget, crossing)
        succ[sl] = ok.sum(axis=1)
    censored = succ == 0
    w = np.where(censored, budget + 1.0, budget / np.maximum(succ, 1))
    return WeightResult(w.astype(float), np.full(B, budget), succ, censored)


@dataclass
class LBatch:
    """Configurations of the surrogate on a patch [0, T] plus their importance weights.

    ``lines`` holds the original (unfreed) top k+1 rescaled lines at the
    patch nodes; the top k are replaced by free bridges wherever a
    computation needs the freed ensemble.
    """

    n: int
    k: int
    T: float
    nodes: np.ndarray
    lines: np.ndarray  # (B, k+1, mesh+1)
    weights: np.ndarray
    trials: np.ndarray
    censored: np.ndarray
    scaling: EdgeScaling
    crossing: bool = True

    @property
    def size(self) -> int:
        return self.lines.shape[0]

    @property
    def mesh(self) -> int:
        return self.nodes.size - 1

    @property
    def x0(self) -> np.ndarray:
        return self.lines[:, : self.k, 0]

    @property
    def xT(self) -> np.ndarray:
        return self.lines[:, : self.k, -1]

    @property
    def lower(self) -> np.ndarray:
        return self.lines[:, self.k, :]

    def ess(self) -> float:
        w = self.weights
        return float(w.sum() ** 2 / np.sum(w * w))

    def max_weight_fraction(self) -> float:
        return float(self.weights.max() / self.weights.sum())


def sample_L_batch(n: int, k: int, T: float, budget: int, rng=0, M: float = 1.0,
                   mesh_per_unit: int = 16, mode: str = "inverse-binomial", hits: int = 16,
                   cap: int = 100_000, p_samples: int = 200, crossing: bool = True,
                   center: bool = True) -> LBatch:
    """Draw ``budget`` surrogate configurations on [0, T] and weight them by 1/P."""
    if k >= n:
        raise InvalidInputError("need k < n (the patch needs a line below it)")
    if budget < 1:
        raise InvalidInputError("budget must be positive")
    mesh = max(2, int(round(mesh_per_unit * T)))
    sc = edge_scaling(n, M, T, center)
    tau = np.linspace(0.0, T, mesh + 1)
    gen = as_generator(rng)
    raw = watermelon_batch(gen, n, M, sc.raw_times(tau), budget, keep=k + 1)
    lines = sc.to_rescaled(tau, raw)
    x0, xT, lower = lines[:, :k, 0], lines[:, :k, -1], lines[:, k, :]
    if mode == "inverse-binomial":
        wr = inverse_binomial_weights(gen, x0, xT, lower, T, mesh, hits, cap, crossing)
    elif mode == "fixed":
        wr = fixed_budget_weights(gen, x0, xT, lower, T, mesh, p_samples, crossing)
    else:
        raise InvalidInputError(f"unknown weight mode {mode!r}")
    return LBatch(n, k, T, tau, lines, wr.weights, wr.trials, wr.censored, sc, crossing)


@dataclass
class WeightedSample:
    patch: FunctionTuple
    lower: FunctionTuple
    weight: float
    acceptance: McEstimate
    censored: bool = False


def build_L_patch(w: Watermelon, k: int, t: float = 1.0, rng=0, p_samples: int = 200,
                  mesh: int = 16, mode: str = "fixed", hits: int = 16, crossing: bool = True,
                  center: bool = True) -> WeightedSample:
    """Free the top k lines of one watermelon on the rescaled patch [0, t].

    The watermelon must have been sampled at the raw times of the patch
    nodes (see :func:`window_times`).
    """
    if not 1 <= k < w.n:
        raise InvalidInputError("need 1 <= k < n")
    lines = edge_rescale(w, k + 1, t, mesh, center).as_array()
    gen = as_generator(rng)
    x0, x1, lower = lines[None, :k, 0], lines[None, :k, -1], lines[None, k, :]
    if mode == "fixed":
        wr = fixed_budget_weights(gen, x0, x1, lower, t, mesh, p_samples, crossing)
    elif mode == "inverse-binomial":
        wr = inverse_binomial_weights(gen, x0, x1, lower, t, mesh, hits, crossing=crossing)
    else:
        raise InvalidInputError(f"unknown weight mode {mode!r}")
    free = bridge_paths(gen, 0.0, t, lines[:k, 0], lines[:k, -1], mesh, 1)[0]
    free[:, 0], free[:, -1] = lines[:k, 0], lines[:k, -1]
    p = float(wr.p_hat[0])
    n_draws = int(wr.trials[0])
    se = math.sqrt(max(p * (1 - p), 0.0) / n_draws)
    est = McEstimate(p, se, n_draws, None, "censored" if wr.censored[0] else None)
    return WeightedSample(
        FunctionTuple.from_array(free, 0.0, t),
        FunctionTuple.from_array(lines[k:k + 1], 0.0, t),
        float(wr.weights[0]),
        est,
        bool(wr.censored[0]),
    )


@dataclass
class WeightDiagnostics:
    estimate: McEstimate
    ess: float
    max_weight_fraction: float
    censored_fraction: float
    budget: int


def inverse_acceptance_expectation(n: int, k: int, t: float, samples: int, rng=0,
                                   **batch_kw) -> WeightDiagnostics:
    """E[1/P] over surrogate configurations, with weight-tail diagnostics."""
    batch = sample_L_batch(n, k, t, samples, rng, **batch_kw)
    w = batch.weights
    est = McEstimate(float(w.mean()), float(w.std(ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0,
                     int(w.size), getattr(rng, "seed", None))
    cens = float(batch.censored.mean())
    if cens > 0.01:
        warnings.warn(f"{cens:.1%} of weights censored", ReliabilityWarning, stacklevel=2)
    return WeightDiagnostics(est, batch.ess(), batch.max_weight_fraction(), cens, w.size)


def ratio_estimate(num: np.ndarray, den: np.ndarray):
    """Sum(num)/sum(den) with a delta-method standard error."""
    R = float(num.sum() / den.sum())
    psi = (num - R * den) / den.mean()
    return R, float(psi.std(ddof=1) / math.sqrt(num.size))


@dataclass
class IdentityRow:
    statistic: str
    weighted_conditioned: float
    unweighted: float
    se: float

    @property
    def z(self) -> float:
        return (self.weighted_conditioned - self.unweighted) / self.se if self.se > 0 else 0.0


def importance_identity_check(batch: LBatch, rng=0):
    """Weighted mean of phi 1{NI} over weighted mean of 1{NI} vs the plain mean of phi.

    phi runs over the endpoint values of the top k lines. Returns the rows
    and the effective sample size of the conditioned weights.
    """
    gen = as_generator(rng)
    ok = _acceptance_trials(gen, batch.x0, batch.xT, batch.lower, batch.T, batch.mesh, 1,
                            batch.crossing)[:, 0]
    wi = batch.weights * ok
    rows = []
    for i in range(batch.k):
        for end, vals in (("0", batch.x0[:, i]), ("T", batch.xT[:, i])):
            R = float(np.sum(wi * vals) / np.sum(wi))
            plain = vals.mean()
            # paired influence functions of the two estimators
            psi = wi * (vals - R) / wi.mean() - (vals - plain)
            se = float(psi.std(ddof=1) / math.sqrt(vals.size))
            rows.append(IdentityRow(f"line{i + 1}@{end}", R, float(plain), se))
    ess = float(wi.sum() ** 2 / np.sum(wi * wi))
    return rows, ess


# ---- events ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    """Box constraints on the recentered top lines f_i(r) = line_i(r) - line_i(0).

    ``boxes`` entries are ``(line, time, lo, hi)`` with 1-based lines; either
    bound may be infinite. ``floor`` entries ``(line, start, end, level)``
    require f_i >= level on [start, end]. ``stationary`` adds r^2 to every
    line before recentering.
    """

    family: str
    boxes: tuple = ()
    floor: tuple = ()
    stationary: bool = False
    label: str = ""

    def __post_init__(self):
        if self.family not in ("endpoint-box", "midpoint-box", "increment-threshold", "full"):
            raise InvalidInputError(f"unknown event family {self.family!r}")
        boxes = tuple(tuple(b) for b in self.boxes)
        floor = tuple(tuple(f) for f in self.floor)
        for line, time, lo, hi in boxes:
            if not lo < hi:
                raise InvalidInputError("box bounds must satisfy lo < hi")
            if time <= 0 or line < 1:
                raise InvalidInputError("probe times must be positive and lines 1-based")
        for line, a, b, _ in floor:
            if not 0 <= a < b or line < 1:
                raise InvalidInputError("floor windows must satisfy 0 <= start < end")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "floor", floor)

    @property
    def probe_times(self) -> list:
        return sorted({b[1] for b in self.boxes})

    @property
    def horizon(self) -> float:
        ends = [b[1] for b in self.boxes] + [f[2] for f in self.floor]
        return max(ends) if ends else 0.0

    @property
    def is_full(self) -> bool:
        return not self.boxes and not self.floor

    def representative(self, k: int, t: float, mesh: int = 256) -> FunctionTuple:
        """Box-centre piecewise-linear f_A (half-infinite boxes use their finite end)."""
        s = np.linspace(0.0, t, mesh + 1)
        rows = []
        for i in range(1, k + 1):
            pts = sorted((b[1], _box_center(b[2], b[3])) for b in self.boxes if b[0] == i)
            xs = [0.0] + [p[0] for p in pts]
            ys = [0.0] + [p[1] for p in pts]
            rows.append(np.interp(s, xs, ys))
        return FunctionTuple.from_array(np.array(rows), 0.0, t)

    def s_value(self, k: int, t: float, mesh: int = 256) -> float:
        return s_functional(self.representative(k, t, mesh))


def _box_center(lo: float, hi: float) -> float:
    if math.isinf(lo) and math.isinf(hi):
        return 0.0
    if math.isinf(hi):
        return lo
    if math.isinf(lo):
        return hi
    return 0.5 * (lo + hi)


def _log_box_prob(alpha, beta):
    """log(Phi(beta) - Phi(alpha)), stable in both tails."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    upper = alpha > 0
    la = np.where(upper, special.log_ndtr(-alpha), special.log_ndtr(beta))
    lb = np.where(upper, special.log_ndtr(-beta), special.log_ndtr(alpha))
    with np.errstate(divide="ignore", invalid="ignore"):
        return la + np.log1p(-np.exp(lb - la))


def _truncnorm(gen, mean, sd, lo, hi):
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    z = stats.truncnorm.rvs(a, b, random_state=gen)
    return mean + sd * z, _log_box_prob(a, b)


def _pinned_paths(gen, event: EventSpec, x0, xT, T, nodes, shift, free_end=False):
    """Fill paths through sequentially pinned probe values.

    x0, xT: (N, k). Returns paths (N, k, m+1) and the log importance
    weight (N,) from the truncated pin draws.
    """
    N, k = x0.shape
    logw = np.zeros(N)
    pins = [0.0]
    vals = [x0]
    h = nodes[1] - nodes[0]
    for r in event.probe_times:
        p = pins[-1]
        prev = vals[-1]
        if free_end:
            mean = prev
            var = VARIANCE * (r - p) * np.ones_like(prev)
        else:
            mean = prev + (r - p) / (T - p) * (xT - prev)
            var = VARIANCE * (r - p) * (T - r) / (T - p) * np.ones_like(prev)
        sd = np.sqrt(var)
        new = np.empty_like(prev)
        for i in range(k):
            box = [b for b in event.boxes if b[0] == i + 1 and abs(b[1] - r) < 1e-12]
            if box:
                _, _, lo, hi = box[0]
                lo_abs = x0[:, i] + lo - shift(r)
                hi_abs = x0[:, i] + hi - shift(r)
                v, lp = _truncnorm(gen, mean[:, i], sd[:, i], lo_abs, hi_abs)
                logw += lp
            else:
                v = mean[:, i] + sd[:, i] * gen.standard_normal(N)
            new[:, i] = v
        pins.append(r)
        vals.append(new)
    if not free_end:
        pins.append(T)
        vals.append(xT)
    idx = [int(round(p / h)) for p in pins]
    if any(abs(p - j * h) > 1e-9 for p, j in zip(pins, idx)):
        raise InvalidInputError("probe times must be mesh nodes of the patch")
    m = nodes.size - 1
    paths = np.empty((N, k, m + 1))
    for j in range(len(idx) - 1):
        a, b = idx[j], idx[j + 1]
        if b == a:
            continue
        paths[:, :, a:b + 1] = _batched_bridges(gen, vals[j], vals[j + 1], (b - a) * h, b - a, 1)[:, 0]
    if idx[-1] < m:
        # free Brownian continuation after the last pin
        a = idx[-1]
        inc = gen.standard_normal((N, k, m - a)) * math.sqrt(VARIANCE * h)
        paths[:, :, a] = vals[-1]
        paths[:, :, a + 1:] = vals[-1][..., None] + np.cumsum(inc, axis=-1)
    return paths, logw


def _floor_ok(event: EventSpec, paths, x0, nodes, shift, crossing):
    """Floor indicator times between-node survival (N,)."""
    N = paths.shape[0]
    val = np.ones(N)
    h = nodes[1] - nodes[0]
    for line, a, b, level in event.floor:
        mask = window_mask(nodes, (a, b))
        f = paths[:, line - 1, :]
        bound = x0[:, line - 1][:, None] + level - shift(nodes)[None, :]
        ok = np.all(f[:, mask] >= bound[:, mask], axis=1)
        val = val * ok
        if crossing:
            val = val * _single_cross(f - bound, mask, h)
    return val


def _single_cross(gap, mask, h):
    cells = mask[:-1] & mask[1:]
    d0 = np.clip(gap[:, :-1], 0, None)
    d1 = np.clip(gap[:, 1:], 0, None)
    with np.errstate(divide="ignore"):
        lp = np.log1p(-np.exp(-2 * d0 * d1 / (VARIANCE * h)))
    return np.exp(np.sum(np.where(cells, lp, 0.0), axis=1))


def _zero_shift(r):
    return np.zeros_like(np.asarray(r, dtype=float))


def _square_shift(r):
    return np.asarray(r, dtype=float) ** 2


def event_contributions(batch: LBatch, event: EventSpec, ni_from: float, rng=0, q: int = 8,
                        chunk: int = 4096) -> np.ndarray:
    """Per-configuration E_free[1_A * NI on [ni_from, T]] with the patch bridges free.

    Probe values are drawn inside their boxes (importance sampling with the
    box probability as weight); NI and floors are checked at the nodes with
    the between-node correction when the batch uses one.
    """
    if event.horizon > batch.T + 1e-12:
        raise InvalidInputError("event probes must lie inside the patch")
    gen = as_generator(rng)
    shift = _square_shift if event.stationary else _zero_shift
    nodes = batch.nodes
    mask = window_mask(nodes, (ni_from, batch.T))
    h = nodes[1] - nodes[0]
    out = np.empty(batch.size)
    for start in range(0, batch.size, chunk):
        sl = slice(start, start + chunk)
        x0 = np.repeat(batch.x0[sl], q, axis=0)
        xT = np.repeat(batch.xT[sl], q, axis=0)
        lower = np.repeat(batch.lower[sl], q, axis=0)
        paths, logw = _pinned_paths(gen, event, x0, xT, batch.T, nodes, shift)
        val = np.exp(logw) * ni_mask(paths, lower, mask)
        if batch.crossing:
            val = val * crossing_factor(paths, lower, mask, h, lower_variance=VARIANCE)
        if event.floor:
            val = val * _floor_ok(event, paths, x0, nodes, shift, batch.crossing)
        out[sl] = val.reshape(-1, q).mean(axis=1)
    return out


def brownian_event_prob(event: EventSpec, k: int, t: float, samples: int = 10_000, rng=0,
                        mesh_per_unit: int = 16, crossing: bool = True) -> McEstimate:
    """mu(A) for k independent variance-2 Brownian motions from 0 on [0, t]."""
    gen = as_generator(rng)
    shift = _square_shift if event.stationary else _zero_shift
    if event.is_full:
        return McEstimate(1.0, 0.0, 1)
    mesh = max(2, int(round(mesh_per_unit * t)))
    nodes = np.linspace(0.0, t, mesh + 1)
    if not event.floor:
        # product of exact sequential box probabilities, no sampling noise
        x0 = np.zeros((samples, k))
        _, logw = _pinned_paths(gen, event, x0, x0, t, nodes, shift, free_end=True)
        vals = np.exp(logw)
    else:
        x0 = np.zeros((samples, k))
        paths, logw = _pinned_paths(gen, event, x0, x0, t, nodes, shift, free_end=True)
        vals = np.exp(logw) * _floor_ok(event, paths, x0, nodes, shift, crossing)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    if mean == 0.0:
        return McEstimate(0.0, 1.0 - 0.05 ** (1.0 / samples), samples, None, "no-successes")
    return McEstimate(mean, se, samples)


# ---- experiments -----------------------------------------------------------------------

def _substream(rng, i):
    if hasattr(rng, "substream"):
        return rng.substream(i)
    return as_generator(rng)


def _log_ratio(num, num_se, den, den_se):
    if num <= 0 or den <= 0:
        return float("-inf") if num <= 0 else float("inf"), float("nan")
    return math.log(num / den), math.sqrt((num_se / num) ** 2 + (den_se / den) ** 2)


def density_ratio_experiment(events, n: int = 16, k: int = 1, t: float = 1.0,
                             budget: int = 10_000, rng=0, patch: float | None = None,
                             q: int = 8, mu_samples: int = 20_000, batch: LBatch | None = None,
                             target: str = "L", **batch_kw) -> list:
    """log(nu(A)/mu(A)) for a battery of events, next to -S(f_A).

    ``target="L"`` estimates nu for the patch-freed ensemble on [0, t]
    (a longer auxiliary patch [0, patch] supplies the configurations, so the
    event time t is inside the free region). ``target="original"`` estimates
    the probability for the unfreed surrogate.
    """
    T = patch if patch is not None else 2.0 * t
    if T < t:
        raise InvalidInputError("auxiliary patch must contain [0, t]")
    if batch is None:
        batch = sample_L_batch(n, k, T, budget, _substream(rng, 0), **batch_kw)
    if target == "L":
        ni_from = t
    elif target == "original":
        ni_from = 0.0
    else:
        raise InvalidInputError(f"unknown target {target!r}")
    full = EventSpec("full")
    base = event_contributions(batch, full, ni_from, _substream(rng, 1), q)
    rows = []
    for j, ev in enumerate(events):
        if ev.is_full:
            contrib = base
        else:
            contrib = event_contributions(batch, ev, ni_from, _substream(rng, 100 + j), q)
        w = batch.weights
        if target == "L":
            num, num_se = ratio_estimate(w * contrib, w * base)
        else:
            vals = w * contrib
            num, num_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
        mu = brownian_event_prob(ev, k, t, mu_samples, _substream(rng, 10_000 + j),
                                 crossing=batch.crossing)
        hits = int(np.count_nonzero(contrib))
        flag = ""
        if hits == 0:
            flag = "no-hits"
            num_se = 3.0 / batch.size
        lr, lr_se = _log_ratio(num, num_se, mu.value, mu.se)
        S = ev.s_value(k, t)
        rows.append({
            "event": ev.label or f"event{j}", "family": ev.family, "S": S,
            "nu": num, "nu_se": num_se, "mu": mu.value, "mu_se": mu.se,
            "log_ratio": lr, "log_ratio_se": lr_se, "prediction": -S, "hits": hits, "flag": flag,
        })
    return rows


def endpoint_box_battery(s_values, k: int = 1, t: float = 1.0, half_width: float = 0.1,
                         signs=(1, -1)) -> list:
    """Endpoint boxes [m - h, m + h] on f_1(t) with S(f_A) = s for each s and sign."""
    events = []
    for sgn in signs:
        for s in s_values:
            m = sgn * (1.5 * s) ** (2.0 / 3.0)
            events.append(EventSpec("endpoint-box", ((1, t, m - half_width, m + half_width),),
                                    label=f"end{'+' if sgn > 0 else '-'}{s:g}"))
    return events


def weighted_fit(x, y, se):
    """Weighted least squares y = a + b x; returns (b, se_b, a, pearson r)."""
    x, y, se = (np.asarray(v, dtype=float) for v in (x, y, se))
    w = 1.0 / np.maximum(se, 1e-12) ** 2
    X = np.stack([np.ones_like(x), x], axis=1)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    beta = cov @ (X.T @ (w * y))
    resid = y - X @ beta
    dof = max(len(x) - 2, 1)
    scale = max(float(np.sum(w * resid**2) / dof), 1.0)
    r = float(np.corrcoef(x, y)[0, 1]) if len(x) > 2 else float("nan")
    return float(beta[1]), float(math.sqrt(cov[1, 1] * scale)), float(beta[0]), r


def _weighted_survival(w, indicator):
    return ratio_estimate(w * indicator, w)


def tail_experiment(kind: str, n: int = 16, k: int = 1, t: float = 1.0, m_grid=(0.5, 1.0, 1.5),
                    budget: int = 10_000, rng=0, batch: LBatch | None = None, **batch_kw) -> dict:
    """Weighted survival curves of L-surrogate statistics next to closed-form bounds.

    one-point: P(L_k(0) > m) and P(L_k(0) < -m).
    two-point: P(|L_k(0) - L_k(t)| > m) against a free Brownian increment,
    both empirical (same budget) and exact.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    if np.any(m_grid <= 0):
        raise InvalidInputError("m-grid must be positive")
    if batch is None:
        batch = sample_L_batch(n, k, t, budget, _substream(rng, 0), **batch_kw)
    w = batch.weights
    rows = []
    if kind == "one-point":
        x = batch.x0[:, k - 1]
        for m in m_grid:
            up, up_se = _weighted_survival(w, (x > m).astype(float))
            lo, lo_se = _weighted_survival(w, (x < -m).astype(float))
            rows.append({"m": float(m), "upper": up, "upper_se": up_se, "lower": lo, "lower_se": lo_se})
        ups = [(r["m"], r["upper"]) for r in rows if r["upper"] > 0]
        c_fit = max(((math.log(p) + 4.0 / 3.0 * m**1.5) / m**1.25 for m, p in ups), default=float("nan"))
        lows = [(r["m"], r["lower"]) for r in rows if r["lower"] > 0]
        d_fit = min((-math.log(p / 2.0) / m**3 for m, p in lows), default=float("nan"))
        cubic = float("nan")
        if len(lows) >= 3:
            ms = np.array([m for m, _ in lows])
            cubic = float(np.polyfit(ms**3, np.log([p for _, p in lows]), 1)[0])
        for r in rows:
            m = r["m"]
            r["upper_rhs"] = math.exp(-4.0 / 3.0 * m**1.5 + (c_fit if math.isfinite(c_fit) else 1.0) * m**1.25)
            r["lower_rhs"] = 2.0 * math.exp(-(d_fit if math.isfinite(d_fit) else 1.0) * m**3)
        return {"kind": kind, "rows": rows, "c_fit": c_fit, "d_fit": d_fit, "cubic_coefficient": cubic,
                "ess": batch.ess(), "budget": batch.size}
    if kind == "two-point":
        d = batch.x0[:, k - 1] - batch.xT[:, k - 1]
        gen = as_generator(_substream(rng, 1))
        ctrl = gen.standard_normal(batch.size) * math.sqrt(VARIANCE * t)
        for m in m_grid:
            p, p_se = _weighted_survival(w, (np.abs(d) > m).astype(float))
            c_hits = np.abs(ctrl) > m
            c = float(c_hits.mean())
            c_se = float(math.sqrt(max(c * (1 - c), 0.0) / ctrl.size))
            exact = float(special.erfc(m / math.sqrt(4.0 * t)))
            row = {"m": float(m), "L": p, "L_se": p_se, "control": c, "control_se": c_se,
                   "control_exact": exact, "gaussian_bound": math.exp(-m * m / (4.0 * t))}
            if p > 0 and c > 0:
                row["margin"] = math.log(c) - math.log(p)
                row["margin_se"] = math.sqrt((p_se / p) ** 2 + (c_se / c) ** 2)
            else:
                row["margin"], row["margin_se"] = float("nan"), float("nan")
            rows.append(row)
        pos = [(r["m"], r["L"]) for r in rows if r["L"] > 0]
        c_fit = max(((math.log(p) + m * m / (4 * t) + (4 * k - 2) / 3 * m**1.5) / m**1.25 for m, p in pos),
                    default=float("nan"))
        for r in rows:
            m = r["m"]
            cc = c_fit if math.isfinite(c_fit) else 1.0
            r["rhs"] = math.exp(-m * m / (4 * t) - (4 * k - 2) / 3 * m**1.5 + cc * m**1.25)
        return {"kind": kind, "rows": rows, "c_fit": c_fit, "ess": batch.ess(), "budget": batch.size}
    raise InvalidInputError(f"unknown tail kind {kind!r}")


def counterexample_event(m: float, s: float = 2.0, stationary: bool = False) -> EventSpec:
    """A_{m,s}: f(1/2) >= m, f(1) in [-1, s], inf over [0, 1] of f >= -1."""
    return EventSpec(
        "midpoint-box",
        ((1, 0.5, m, math.inf), (1, 1.0, -1.0, s)),
        ((1, 0.0, 1.0, -1.0),),
        stationary,
        label=f"{'stat' if stationary else 'par'}-m{m:g}",
    )


def stationary_counterexample_experiment(m_grid, budget: int = 10_000, rng=0, n: int = 16,
                                         s: float = 2.0, patch: float = 2.0, q: int = 8,
                                         mu_samples: int = 200_000, batch: LBatch | None = None,
                                         **batch_kw) -> dict:
    """Log-ratios P(top line in A_{m,s}) / mu(A_{m,s}) for the stationary and parabolic top line."""
    m_grid = np.asarray(m_grid, dtype=float)
    if batch is None:
        batch = sample_L_batch(n, 1, patch, budget, _substream(rng, 0), **batch_kw)
    stat_ev = [counterexample_event(m, s, True) for m in m_grid]
    par_ev = [counterexample_event(m, s, False) for m in m_grid]
    stat = density_ratio_experiment(stat_ev, n, 1, 1.0, rng=_substream(rng, 1), q=q,
                                    mu_samples=mu_samples, batch=batch, target="original")
    par = density_ratio_experiment(par_ev, n, 1, 1.0, rng=_substream(rng, 2), q=q,
                                   mu_samples=mu_samples, batch=batch, target="original")
    rows = []
    for m, a, b in zip(m_grid, stat, par):
        rows.append({
            "m": float(m), "mu": a["mu"], "mu_se": a["mu_se"],
            "p_stationary": a["nu"], "p_stationary_se": a["nu_se"],
            "p_parabolic": b["nu"], "p_parabolic_se": b["nu_se"],
            "log_ratio_stationary": a["log_ratio"], "log_ratio_stationary_se": a["log_ratio_se"],
            "log_ratio_parabolic": b["log_ratio"], "log_ratio_parabolic_se": b["log_ratio_se"],
        })
    ok = [r for r in rows if math.isfinite(r["log_ratio_stationary"]) and math.isfinite(r["log_ratio_parabolic"])]
    out = {"rows": rows, "budget": batch.size}
    if len(ok) >= 3:
        ms = [r["m"] for r in ok]
        out["stationary_slope"], out["stationary_slope_se"], _, _ = weighted_fit(
            ms, [r["log_ratio_stationary"] for r in ok], [r["log_ratio_stationary_se"] for r in ok])
        out["parabolic_slope"], out["parabolic_slope_se"], _, _ = weighted_fit(
            ms, [r["log_ratio_parabolic"] for r in ok], [r["log_ratio_parabolic_se"] for r in ok])
    return out


def edge_ks_to_tracy_widom(n: int, samples: int, rng=0, M: float = 1.0, max_remainder: float = 1e-6,
                           grid=None) -> dict:
    """KS distance between the rescaled top line at tau = 0 and the Tracy-Widom proxy.

    Only grid points where the proxy's truncation remainder is below
    ``max_remainder`` enter the distance.
    """
    from .airy import tracy_widom_proxy

    sc = EdgeScaling(n, M, 0.0)
    raw = watermelon_batch(as_generator(rng), n, M, np.array([0.0]), samples, keep=1)[:, 0, 0]
    x = np.sort(sc.to_rescaled(0.0, raw))
    grid = np.linspace(-3.5, 2.0, 56) if grid is None else np.asarray(grid, dtype=float)
    cdf, rem = tracy_widom_proxy(grid)
    use = rem < max_remainder
    emp = np.searchsorted(x, grid[use], side="right") / x.size
    return {"n": n, "ks": float(np.max(np.abs(emp - cdf[use]))), "grid_points": int(use.sum()),
            "samples": samples}
