import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import ALPHA_2, ALPHA_3
from airylab.core import (
    _orthant_sphere_grid, alpha_k, max_g_over_dbeta, opt_g, s_functional, schilder_rate,
    tetris, tetris_shifts, theta,
)
from airylab.errors import InvalidInputError
from airylab.grid import FunctionTuple, GridFunction

floats = st.floats(-3, 3, allow_nan=False)


def tup(*funcs, mesh=64, end=1.0):
    return FunctionTuple.from_callables(funcs, 0.0, end, mesh)


# ---- tetris ----

def test_tetris_identity_when_min_at_left():
    f = tup(lambda s: s)
    assert np.allclose(tetris(f).as_array(), f.as_array())


def test_tetris_shifts_decreasing_line():
    tf = tetris(tup(lambda s: -s))
    assert np.allclose(tf.as_array()[0], 1 - tf.nodes)


def test_tetris_zero_pair_touches():
    tf = tetris(tup(lambda s: 0 * s, lambda s: 0 * s))
    assert np.allclose(tf.as_array(), 0)


def test_tetris_rejects_mixed_meshes():
    a = GridFunction.from_callable(np.sin, 0, 1, 8)
    b = GridFunction.from_callable(np.sin, 0, 1, 16)
    with pytest.raises(InvalidInputError):
        FunctionTuple((a, b))


def test_tetris_matches_exhaustive_integer_search():
    rng = np.random.default_rng(5)
    for _ in range(10):
        vals = np.cumsum(rng.integers(-1, 2, size=(3, 9)), axis=1)
        got = tetris_shifts(vals)
        want = oracles.tetris_shifts_exhaustive(vals, 12)
        assert np.array_equal(got, want)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_tetris_structure(k, mesh, seed):
    vals = np.random.default_rng(seed).normal(size=(k, mesh + 1)).cumsum(axis=1)
    f = FunctionTuple.from_array(vals, 0.0, 1.0)
    tf = tetris(f).as_array()
    assert np.all(np.diff(tf, axis=0) <= 1e-12)
    assert np.all(tf[-1] >= -1e-12)
    assert np.allclose(tf - tf[:, :1], vals - vals[:, :1])
    below = np.vstack([tf[1:], np.zeros((1, mesh + 1))])
    assert np.allclose(np.min(tf - below, axis=1), 0.0, atol=1e-12)  # every layer touches
    assert np.allclose(tetris(tetris(f)).as_array(), tf)
    shifted = FunctionTuple.from_array(vals + np.arange(k)[:, None] * 3.7, 0.0, 1.0)
    assert np.allclose(tetris(shifted).as_array(), tf)


# ---- S ----

def test_s_zero_and_line():
    assert s_functional(tup(lambda s: 0 * s, lambda s: 0 * s)) == 0.0
    assert s_functional(tup(lambda s: -s)) == pytest.approx(2 / 3)


def test_s_matches_lp_oracle():
    rng = np.random.default_rng(9)
    for _ in range(5):
        vals = rng.normal(size=(2, 33)).cumsum(axis=1)
        c = oracles.tetris_shifts_lp(vals)
        ends = c[:, None] + (vals - vals[:, :1])[:, [0, -1]]
        expect = 2 / 3 * np.sum(np.clip(ends, 0, None) ** 1.5)
        assert s_functional(FunctionTuple.from_array(vals, 0, 1)) == pytest.approx(expect, abs=1e-9)


# ---- theta, alpha ----

def test_theta_examples():
    assert theta([1.0]) == pytest.approx(2 / 3)
    assert theta([-1.0]) == pytest.approx(2 / 3)
    assert theta([1.0, 0.0]) == pytest.approx(2 / 3)
    assert theta([0.0, 1.0]) == pytest.approx(2.0)


@given(st.lists(floats, min_size=1, max_size=5), st.floats(0.01, 10))
def test_theta_homogeneous(x, c):
    assert theta(np.array(x) * c) == pytest.approx(c**1.5 * theta(x), rel=1e-10, abs=1e-12)
    assert theta(x) == pytest.approx(oracles.theta_loop(x), rel=1e-12, abs=1e-12)


def test_alpha_1_exact():
    assert alpha_k(1).alpha == 2 / 3


@pytest.mark.parametrize("k,expect", [(2, ALPHA_2), (3, ALPHA_3)])
def test_alpha_matches_grid_oracle(k, expect):
    res = alpha_k(k)
    assert res.alpha == pytest.approx(expect, abs=1e-6)
    assert res.alpha >= 2 / 3 + 4 * (k - 1) / 3
    assert np.linalg.norm(res.direction) == pytest.approx(1.0)
    assert np.all(res.direction >= 0)
    assert theta(res.direction) == pytest.approx(res.alpha, abs=1e-12)
    assert np.max(theta(_orthant_sphere_grid(k, 1e-2))) <= res.alpha + 1e-10


def test_alpha_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        alpha_k(0)
    with pytest.raises(InvalidInputError):
        alpha_k(2, tolerance=0)


# ---- Schilder rate ----

def test_schilder_rate():
    assert schilder_rate(tup(lambda s: 0 * s)) == 0
    assert schilder_rate(tup(lambda s: s)) == pytest.approx(0.25)
    e1 = abs(schilder_rate(tup(lambda s: s**2, mesh=100)) - 1 / 3)
    e2 = abs(schilder_rate(tup(lambda s: s**2, mesh=200)) - 1 / 3)
    assert e1 / e2 == pytest.approx(4, rel=0.05)


# ---- opt_g ----

def test_opt_g_examples():
    assert opt_g([2.0], [0.0], [2.0]) == pytest.approx(2 / 3 * 2**1.5)
    assert opt_g([0.5], [3.0], [-3.0]) == pytest.approx(2 / 3 * 3**1.5)
    with pytest.raises(InvalidInputError):
        opt_g([1.0], [0.0], [2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_opt_g_two_evaluation_orders(k, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 2, k), rng.uniform(0, 2, k)
    x = rng.uniform(-b, a)
    assert opt_g(a, b, x) == pytest.approx(oracles.opt_g_loop(a, b, x), rel=1e-12)


def test_max_g_k1_closed_form():
    assert max_g_over_dbeta(1, 2.0) == pytest.approx(2 / 3 * 2**1.5, rel=1e-8)


@pytest.mark.parametrize("k", [2, 3])
def test_max_g_scales_like_beta_32(k):
    a = alpha_k(k).alpha
    vals = [max_g_over_dbeta(k, beta) / beta**1.5 for beta in (1.0, 2.0, 4.0)]
    assert np.allclose(vals, a, rtol=1e-6)


def test_max_g_direct_agrees_with_penalized_oracle():
    direct = max_g_over_dbeta(2, 1.0, method="direct")
    ref = oracles.g_penalized_max(2, 1.0)
    assert direct == pytest.approx(ref, rel=1e-3)
    assert direct == pytest.approx(ALPHA_2, rel=1e-3)


def test_max_g_bad_beta():
    with pytest.raises(InvalidInputError):
        max_g_over_dbeta(2, 0.0)
    with pytest.raises(InvalidInputError):
        max_g_over_dbeta(2, 1.0, method="nope")
