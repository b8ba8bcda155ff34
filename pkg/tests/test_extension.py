import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wplab.extension import (annulus_cutoff, extend, extend_points, littlewood_paley_pieces,
                             littlewood_paley_project, parabolic_rescaling_check, propagate,
                             propagate_points, scaling_identity_check)
from wplab.fields import FrequencyField, ResolutionError, e, fractional, paraboloid


def direct(f, h_fn, pts):
    """Brute-force lattice sum ``sum f(xi) e(x.xi + t h(xi)) h^d``."""
    xi = f.nodes().reshape(-1, f.d)
    vals = f.values.reshape(-1)
    pts = np.asarray(pts, float)
    ph = pts[:, :-1] @ xi.T + pts[:, -1:] * h_fn(xi)[None]
    return (np.exp(2j * np.pi * ph) @ vals) * f.h ** f.d


def rand_field(seed, h, d=2, box=1.0):
    rng = np.random.default_rng(seed)
    f = FrequencyField.from_function(lambda x: np.zeros(x.shape[:-1]), h, d, box)
    f.values = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) * (
        np.max(np.abs(f.nodes()), -1) < 0.9 * box)
    return f


def test_zero_field():
    f = FrequencyField.from_function(lambda x: np.zeros(x.shape[:-1]), 1 / 16, 2)
    assert np.all(extend_points(f, paraboloid(3), [[1.0, 2.0, 3.0]]) == 0)
    assert np.all(extend(f, paraboloid(3), [0.0, 1.0]).values == 0)


def test_single_frequency_limit():
    h, R = 1 / 1024, 64.0
    f = FrequencyField(np.zeros((3, 3)), h, (-1, -1))
    f.values[1, 1] = 5.0
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-R / 2, R / 2, (50, 2)), rng.uniform(0, R / 2, 50)])
    assert np.allclose(np.abs(extend_points(f, paraboloid(3), pts)), 5.0 * h * h, rtol=1e-13)
    f.values = np.outer([1, 2, 1], [1, 2, 1]).astype(complex)
    mass = 16 * h * h
    E = np.abs(extend_points(f, paraboloid(3), pts))
    assert np.max(np.abs(E - mass)) / mass <= h * R


def test_fft_grid_matches_direct_sum():
    R = 64.0
    f = rand_field(1, 1 / 512)
    S = paraboloid(3)
    times = [0.0, 13.0, R]
    E = extend(f, S, times, box=[(-R / 2, R / 2)] * 2, hx=0.5)
    rng = np.random.default_rng(2)
    ax = E.axes()
    ii = rng.integers(0, len(ax[0]), 50)
    jj = rng.integers(0, len(ax[1]), 50)
    kk = rng.integers(0, 3, 50)
    pts = np.column_stack([ax[0][ii], ax[1][jj], np.asarray(times)[kk]])
    ref = direct(f, S.h, pts)
    got = E.values[ii, jj, kk]
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-8
    assert np.max(np.abs(extend_points(f, S, pts) - ref)) / np.max(np.abs(ref)) <= 1e-8


def test_resolution_guard():
    f = rand_field(0, 1 / 16)
    with pytest.raises(ResolutionError):
        extend_points(f, paraboloid(3), [[100.0, 0.0, 0.0]])


def test_propagate_initial_condition():
    g = rand_field(3, 1 / 64)
    u = propagate(g, 2.0, [0.0], hx=0.5)
    ax = u.axes()
    X = np.stack(np.meshgrid(ax[0], ax[1], indexing="ij"), -1).reshape(-1, 2)
    pick = np.random.default_rng(0).choice(len(X), 200, replace=False)
    ref = direct(g, lambda xi: 0 * xi[:, 0], np.column_stack([X[pick], np.zeros(200)]))
    got = u.values[..., 0].reshape(-1)[pick]
    assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-10


def test_propagate_radial_symmetry():
    g = FrequencyField.from_function(lambda x: np.exp(-np.sum(x ** 2, -1) / 0.1) * (np.sum(x ** 2, -1) < 0.9),
                                     1 / 32, 2)
    u = propagate(g, 2.0, [0.0, 3.0, 17.5], hx=0.25).values
    scale = np.abs(u).max()
    assert np.abs(u - np.swapaxes(u, 0, 1)).max() / scale <= 1e-10
    # reflection x1 -> -x1 on the centred periodic grid
    refl = np.roll(u[::-1], 1, axis=0)
    assert np.abs(u - refl).max() / scale <= 1e-10


@pytest.mark.parametrize("alpha", [0.5, 2.0, 3.0])
def test_l2_conservation(alpha):
    for seed in range(10):
        g = rand_field(seed, 1 / 32, d=1, box=2.0)
        u = propagate(g, alpha, [0.0, 5.0, 40.0])
        g0 = littlewood_paley_project(g, 1.0) if alpha < 1 else g
        ref = g0.l2()
        dx = u.spacing[0]
        l2 = np.sqrt(np.sum(np.abs(u.values) ** 2, axis=0) * dx)
        assert np.allclose(l2, ref, rtol=1e-10)


def test_littlewood_paley_examples():
    h = 1 / 64
    g = FrequencyField.from_function(lambda x: (np.abs(x[..., 0]) >= 0.75) * (np.abs(x[..., 0]) <= 1.5) * 1.0, h, 1, 2)
    assert np.array_equal(littlewood_paley_project(g, 1.0).values, g.values)
    g2 = FrequencyField.from_function(lambda x: (np.abs(x[..., 0]) <= 0.25) * 1.0, h, 1, 2)
    assert np.all(littlewood_paley_project(g2, 1.0).values == 0)
    g3 = FrequencyField.from_function(lambda x: np.cos(x[..., 0]) * (np.abs(x[..., 0]) >= 0.75)
                                      * (np.abs(x[..., 0]) <= 12), 1 / 32, 1, 13)
    parts = littlewood_paley_pieces(g3, [1, 2, 4, 8])
    assert np.max(np.abs(sum(p.values for p in parts) - g3.values)) <= 1e-10


def test_annulus_cutoff_profile():
    s = np.linspace(0, 3, 301)
    c = annulus_cutoff(s)
    assert np.all(c[(s >= 0.75) & (s <= 1.5)] == 1)
    assert np.all(c[(s <= 0.5) | (s >= 2)] == 0)


def test_scaling_identity():
    g = rand_field(4, 1 / 64)
    z = g.copy(np.zeros(g.shape))
    assert scaling_identity_check(z, 2.0, 16.0, [1.0], [[0.0, 0.0]]) == 0.0
    rng = np.random.default_rng(5)
    t = rng.uniform(0.5, 1.0, 20)
    x = rng.uniform(-4, 4, (20, 2))
    assert scaling_identity_check(g, 2.0, 1.0, t, x) <= 1e-13
    assert scaling_identity_check(g, 2.0, 16.0, t, x) <= 1e-6


@pytest.mark.parametrize("K", [2, 4, 8])
def test_parabolic_rescaling(K):
    rng = np.random.default_rng(K)
    f = FrequencyField.from_function(lambda x: np.exp(-np.sum((K * x) ** 2, -1)), 1 / (64 * K), 2, 1.0 / K)
    f.values = f.values * e(f.nodes() @ rng.normal(size=2))
    pts = np.column_stack([rng.uniform(-4, 4, (100, 2)), rng.uniform(0, 4, 100)])
    assert parabolic_rescaling_check(f, K, pts) <= 1e-6
    # independent oracle: direct sums on both sides
    g = FrequencyField(f.values, f.h * K, f.offset)
    S = paraboloid(3)
    lhs = direct(g, S.h, pts[:5])
    rhs = K ** 2 * direct(f, S.h, np.column_stack([K * pts[:5, :2], K ** 2 * pts[:5, 2]]))
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 5))
def test_modulation_is_translation(seed, a1, a2, t):
    f = rand_field(seed, 1 / 64)
    a = np.array([a1, a2])
    fm = f.copy(f.values * e(-(f.nodes() @ a)))
    x = np.array([[0.7, -0.4, t]])
    S = fractional(3.0)
    lhs = extend_points(fm, S, x)
    rhs = extend_points(f, S, np.column_stack([x[:, :2] - a, x[:, 2:]]))
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False))
def test_propagate_points_linear(seed, c):
    f, g = rand_field(seed, 1 / 16), rand_field(seed + 1, 1 / 16)
    pts = np.array([[0.3, 1.1, 2.0], [-1.0, 0.5, 0.0]])
    lhs = propagate_points(f.copy(f.values + c * g.values), 2.0, pts)
    rhs = propagate_points(f, 2.0, pts) + c * propagate_points(g, 2.0, pts)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)
