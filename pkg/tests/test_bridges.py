import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from airylab.bridges import (
    BridgeSpec, McEstimate, RngState, acceptance_prob_mc, bridge_paths, brownian_extremes,
    dominance_check, km_lower_bound, km_nonintersect_prob, merge_estimates, ni_indicator,
    reflection_cell_prob, reflection_density, reflection_density_leading, reflection_survival,
    reflection_survival_leading, sample_bridge_tuple, sample_conditioned_batch,
    sample_conditioned_bridges,
)
from airylab.errors import ConditioningWarning, InvalidInputError, LowAcceptanceError
from airylab.grid import FunctionTuple, GridFunction


def z(est, exact):
    return abs(est.value - exact) / est.se


# ---- sampling ----

def test_bridge_pinned_endpoints():
    f = sample_bridge_tuple(BridgeSpec(0.5, 2.0, [1.0, -1.0], [0.3, -2.0], 37), RngState(1))
    arr = f.as_array()
    assert np.array_equal(arr[:, 0], [1.0, -1.0])
    assert np.array_equal(arr[:, -1], [0.3, -2.0])
    assert f.start == 0.5 and f.end == 2.0


def test_bridge_midpoint_variance_and_mean():
    n = 100_000
    p = bridge_paths(RngState(2).generator(), 0.0, 1.0, [0.0], [0.0], 2, n)[:, 0, 1]
    var = p.var(ddof=1)
    se = math.sqrt(np.var(p**2) / n)
    assert abs(var - 0.5) <= 3 * se
    q = bridge_paths(RngState(3).generator(), 0.0, 2.0, [1.0], [3.0], 8, n)[:, 0, :]
    mean_se = q.std(axis=0, ddof=1)[1:-1] / math.sqrt(n)
    lin = np.linspace(1, 3, 9)[1:-1]
    assert np.all(np.abs(q.mean(axis=0)[1:-1] - lin) <= 3 * mean_se)


def test_bridge_covariance():
    n, t = 100_000, 2.0
    p = bridge_paths(RngState(4).generator(), 0.0, t, [0.0], [0.0], 8, n)[:, 0, :]
    for i, j in ((2, 4), (2, 6), (5, 6)):
        u, v = i * t / 8, j * t / 8
        prod = p[:, i] * p[:, j]
        assert abs(prod.mean() - 2 * u * (t - v) / t) <= 3 * prod.std(ddof=1) / math.sqrt(n)


def test_bit_reproducible():
    spec = BridgeSpec(0, 1, [1.0, 0.0], [1.0, 0.0], 32)
    a = acceptance_prob_mc(spec, None, None, 5000, RngState(7, (1,)))
    b = acceptance_prob_mc(spec, None, None, 5000, RngState(7, (1,)))
    c = acceptance_prob_mc(spec, None, None, 5000, RngState(7, (2,)))
    assert a == b
    assert a.value != c.value
    assert np.array_equal(sample_bridge_tuple(spec, RngState(9)).as_array(),
                          sample_bridge_tuple(spec, RngState(9)).as_array())


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        BridgeSpec(1.0, 1.0, [0], [0], 4)
    with pytest.raises(InvalidInputError):
        BridgeSpec(0, 1, [0, 1], [0], 4)
    with pytest.raises(InvalidInputError):
        McEstimate(0.5, -1.0, 10)


# ---- NI ----

def test_ni_indicator_examples():
    one = FunctionTuple.from_callables([np.sin], 0, 1, 8)
    assert ni_indicator(one)
    pair = FunctionTuple.from_callables([lambda s: 2 + 0 * s, lambda s: 1 + 0 * s], 0, 1, 8)
    assert ni_indicator(pair, GridFunction.from_callable(lambda s: 0 * s, 0, 1, 8))
    tie = FunctionTuple.from_callables([lambda s: 1 + 0 * s, lambda s: 1 + 0 * s], 0, 1, 8)
    assert not ni_indicator(tie)


def test_ni_window_ignores_outside():
    cross = FunctionTuple.from_callables([lambda s: s, lambda s: 0.5 + 0 * s], 0, 1, 10)
    assert not ni_indicator(cross)
    assert ni_indicator(cross, window=(0.6, 1.0))


def test_ni_lower_mesh_mismatch():
    f = FunctionTuple.from_callables([np.cos], 0, 1, 8)
    with pytest.raises(InvalidInputError):
        ni_indicator(f, GridFunction.from_callable(np.sin, 0, 1, 16))


# ---- acceptance and KM ----

def test_acceptance_trivial_k1():
    est = acceptance_prob_mc(BridgeSpec(0, 1, [0.0], [0.0], 16), n=100, rng=RngState(1))
    assert est.value == 1.0 and est.se == 0.0


def test_acceptance_zero_successes_flagged():
    spec = BridgeSpec(0, 1, [0.0], [0.0], 16)
    est = acceptance_prob_mc(spec, GridFunction.from_callable(lambda s: 5 + 0 * s, 0, 1, 16), n=200,
                             rng=RngState(1))
    assert est.value == 0.0 and est.flag == "no-successes"
    assert est.se == pytest.approx(1 - 0.05 ** (1 / 200))


def test_acceptance_symmetric_pair_matches_km():
    spec = BridgeSpec(0, 1, [0.5, -0.5], [0.5, -0.5], 64)
    est = acceptance_prob_mc(spec, n=100_000, rng=RngState(11), crossing=True)
    assert z(est, km_nonintersect_prob(spec.x, spec.y, 1.0)) <= 3


def test_acceptance_monotone_in_y1():
    lo = BridgeSpec(0, 1, [0.5, -0.5], [0.5, -0.5], 32)
    hi = BridgeSpec(0, 1, [0.5, -0.5], [1.0, -0.5], 32)
    a = acceptance_prob_mc(lo, n=50_000, rng=RngState(5))
    b = acceptance_prob_mc(hi, n=50_000, rng=RngState(5))
    assert b.value - a.value >= -3 * math.hypot(a.se, b.se)
    assert b.value > a.value


def test_km_basic_properties():
    assert km_nonintersect_prob([0.3], [1.0], 2.0) == 1.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = rng.integers(2, 5)
        x = np.sort(rng.normal(size=k))[::-1]
        y = np.sort(rng.normal(size=k))[::-1]
        p = km_nonintersect_prob(x, y, 1.3)
        assert 0 < p <= 1
        assert p == pytest.approx(km_nonintersect_prob(-x[::-1], -y[::-1], 1.3), rel=1e-10)


def test_km_conditioning_warning():
    with pytest.warns(ConditioningWarning):
        km_nonintersect_prob([1e-9, 0.0, -1e-9], [1e-9, 0.0, -1e-9], 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.floats(0.05, 3.0), st.floats(0.1, 5.0))
def test_km_lower_bound_holds(k, alpha, t):
    pts = alpha * np.arange(k, 0, -1, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConditioningWarning)
        p = km_nonintersect_prob(pts, pts, t)
    assert p >= km_lower_bound(alpha, t, k) * (1 - 1e-9)


@pytest.mark.parametrize("k", [2, 3])
def test_km_vs_random_endpoints(k):
    rng = np.random.default_rng(k)
    x = np.sort(rng.uniform(-1, 1, k))[::-1] + np.linspace(0.5 * k, 0, k)
    y = np.sort(rng.uniform(-1, 1, k))[::-1] + np.linspace(0.5 * k, 0, k)
    est = acceptance_prob_mc(BridgeSpec(0, 1, x, y, 64), n=100_000, rng=RngState(20 + k), crossing=True)
    assert z(est, km_nonintersect_prob(x, y, 1.0)) <= 3


# ---- conditioned sampling ----

def test_conditioned_first_draw_accepted():
    f, tries = sample_conditioned_bridges(BridgeSpec(0, 1, [0.0], [0.0], 16), rng=RngState(1))
    assert tries == 1
    assert f.k == 1


def test_conditioned_acceptance_rate_matches_km():
    spec = BridgeSpec(0, 1, [3.0, 0.0], [3.0, 0.0], 64)
    paths, tries = sample_conditioned_batch(spec, 5000, rng=RngState(2), crossing=True)
    km = km_nonintersect_prob(spec.x, spec.y, 1.0)
    rate = 5000 / tries
    se = math.sqrt(km * (1 - km) / tries)
    assert abs(rate - km) <= 3 * se + 1 / tries
    assert all(ni_indicator(FunctionTuple.from_array(p, 0, 1)) for p in paths[:200])


def test_conditioned_low_acceptance_error():
    spec = BridgeSpec(0, 1, [0.0], [0.0], 16)
    wall = GridFunction.from_callable(lambda s: 4 + 0 * s, 0, 1, 16)
    with pytest.raises(LowAcceptanceError) as info:
        sample_conditioned_bridges(spec, wall, rng=RngState(1), max_tries=500)
    assert info.value.rate == 0.0


# ---- dominance ----

def test_dominance_identical_specs():
    spec = BridgeSpec(0, 1, [1.0, 0.0], [1.0, 0.0], 32)
    rep = dominance_check(spec, spec, n=20_000, rng=RngState(3))
    # the report is a max over 2 x 3 x 21 z-scores, so 3 SE per entry becomes
    # a Bonferroni threshold for the max at the same 0.27% family-wise level
    cut = stats.norm.isf(0.0027 / 2 / (2 * 3 * 21))
    assert abs(rep.max_violation_se) <= cut


def test_dominance_shifted_endpoint():
    lo = BridgeSpec(0, 1, [0.0], [0.0], 32)
    hi = BridgeSpec(0, 1, [0.0], [1.0], 32)
    assert dominance_check(lo, hi, n=20_000, rng=RngState(4)).holds(3)


def test_dominance_parabolic_floor_on_window():
    mesh = 32
    lo = BridgeSpec(0, 1, [1.0, 0.0], [1.0, 0.0], mesh)
    hi = BridgeSpec(0, 1, [1.5, 0.2], [1.2, 0.1], mesh)
    floor_lo = GridFunction.from_callable(lambda s: -1 - (s - 0.5) ** 2, 0, 1, mesh)
    floor_hi = GridFunction.from_callable(lambda s: -0.5 - (s - 0.5) ** 2, 0, 1, mesh)
    rep = dominance_check(lo, hi, floor_lo, floor_hi, window=(0.25, 0.75), n=100_000, rng=RngState(5))
    assert rep.holds(3)


def test_dominance_rejects_misordered():
    with pytest.raises(InvalidInputError):
        dominance_check(BridgeSpec(0, 1, [1.0], [1.0], 8), BridgeSpec(0, 1, [0.0], [1.0], 8))


def test_merge_estimates_inverse_variance():
    m = merge_estimates([McEstimate(1.0, 1.0, 10), McEstimate(3.0, 1.0, 10)])
    assert m.value == 2.0 and m.se == pytest.approx(1 / math.sqrt(2)) and m.samples == 20


# ---- reflection density ----

def test_reflection_density_nonnegative():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 4, 5000), rng.uniform(0, 4, 5000)
    x = rng.uniform(-b, a)
    for t in (0.5, 1.0, 3.0):
        # the series cancels to roundoff where a + b is tiny and the true density vanishes
        assert np.all(reflection_density(a, b, x, t) >= -1e-12)


def test_reflection_density_is_mixed_derivative_of_survival():
    h = 1e-4
    for (a, b, x, t) in ((0.8, 0.6, 0.1, 1.0), (1.5, 0.3, -0.2, 2.0), (0.4, 0.9, 0.35, 0.5)):
        fd = (reflection_survival(a + h, b + h, x, t) - reflection_survival(a + h, b - h, x, t)
              - reflection_survival(a - h, b + h, x, t) + reflection_survival(a - h, b - h, x, t)) / (4 * h * h)
        assert fd == pytest.approx(reflection_density(a, b, x, t), rel=1e-5, abs=1e-8)


def test_two_image_shortcut_is_leading_part_only():
    # the two-image expression captures only a fraction of the mass
    top = 12.0
    lead, _ = integrate.tplquad(lambda x, b, a: reflection_density_leading(a, b, x, 1.0), 0, top, 0, top,
                                lambda a, b: -b, lambda a, b: a, epsabs=1e-5)
    assert lead == pytest.approx(1 / 6, abs=1e-4)
    # far from the origin the leading images dominate the survival
    a, b, x = 3.0, 3.0, 0.5
    assert reflection_survival(a, b, x) == pytest.approx(reflection_survival_leading(a, b, x), rel=1e-6)


def test_reflection_domain_errors():
    with pytest.raises(InvalidInputError):
        reflection_density(1.0, 1.0, 2.0)
    with pytest.raises(InvalidInputError):
        reflection_density(-1.0, 1.0, 0.0)


def test_reflection_cell_probs_sum_to_one():
    edges = np.linspace(0, 8, 9)
    xe = np.linspace(-8, 8, 9)
    tot = sum(reflection_cell_prob((edges[i], edges[i + 1]), (edges[j], edges[j + 1]), (xe[l], xe[l + 1]))
              for i in range(8) for j in range(8) for l in range(8))
    # 24-point rules per cell; the corner cell carries most of the quadrature error
    assert tot == pytest.approx(1.0, abs=2e-5)


def test_brownian_extremes_marginals():
    s, i, e = brownian_extremes(100_000, 1.0, 32, RngState(6))
    # reflection principle: P(sup > a) = 2 P(B(1) > a) for variance-2 motion
    for a in (0.5, 1.0, 2.0):
        p = np.mean(s > a)
        exact = math.erfc(a / 2)
        assert abs(p - exact) <= 3 * math.sqrt(exact * (1 - exact) / 100_000)
    assert np.all(s >= np.maximum(e, 0)) and np.all(i >= np.maximum(-e, 0))
