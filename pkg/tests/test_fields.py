from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wplab.fields import (DomainError, ExperimentParams, FrequencyField, ParameterError, SpaceTimeField,
                          critical_exponent, dump_bytes, fourier_pair_check, fractional, hyperbolic_paraboloid,
                          load_bytes, lp_norm, make_rng, paraboloid, polynomial_surface)


def test_critical_exponent_examples():
    assert critical_exponent(alpha=2, n=3, p=4) == Fraction(1, 2)
    assert critical_exponent(alpha=2, n=3, p=Fraction(13, 4)) == Fraction(2, 13)
    for alpha in (Fraction(1, 2), 2, 3, Fraction(7, 3)):
        for n in (2, 3, 4, 5):
            assert critical_exponent(alpha=alpha, n=n, p=Fraction(2 * n, n - 1)) == 0


def test_critical_exponent_from_params_and_float():
    prm = ExperimentParams(alpha=2.0, n=3, p=4.0)
    assert critical_exponent(prm) == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        critical_exponent(alpha=2, n=3, p=1)


def test_params_validation():
    assert ExperimentParams().delta == pytest.approx(0.04)
    for bad in (dict(alpha=1.0), dict(n=1), dict(p=1.5), dict(R=2.0), dict(eps=0.3), dict(K=1), dict(seed=-1)):
        with pytest.raises(ParameterError):
            ExperimentParams(**bad)


def test_make_rng_streams():
    a = make_rng(5, 1, 2).random(4)
    assert np.array_equal(a, make_rng(5, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(5, 2, 1).random(4))


def test_lp_norm_zero_and_constant():
    z = SpaceTimeField(np.zeros((8, 8)), [1 / 8, 1 / 8], [0, 0])
    rep = lp_norm(z, 3.0)
    assert rep.value == 0 and rep.std_error == 0
    m = 16
    c = 2.5 - 1.0j
    box = SpaceTimeField(np.full((m, m), c), [1 / m, 1 / m], [0, 0])
    assert lp_norm(box, 2.0).value == pytest.approx(abs(c), rel=1e-14)
    mc = lp_norm(box, 2.0, method="monte_carlo", samples=64)
    assert mc.value == pytest.approx(abs(c), rel=1e-14)


def test_lp_norm_monte_carlo_vs_dense_grid():
    rng = np.random.default_rng(3)
    x = np.arange(200) / 200
    X, Y = np.meshgrid(x, x, indexing="ij")
    vals = np.cos(7 * X) * np.exp(-Y) + 0.3 * rng.normal(size=X.shape)
    fld = SpaceTimeField(vals, [1 / 200, 1 / 200], [0, 0])
    exact = np.sum(np.abs(vals) ** 4 / 200 ** 2) ** 0.25
    for seed in range(5):
        mc = lp_norm(fld, 4.0, method="monte_carlo", samples=2000, seed=seed)
        assert abs(mc.value - exact) <= 3 * mc.std_error


def test_lp_norm_region_errors():
    fld = SpaceTimeField(np.ones((4, 4)), [1.0, 1.0], [0, 0])
    with pytest.raises(DomainError):
        lp_norm(fld, 2.0, region=[(0, 10), (0, 1)])
    with pytest.raises(DomainError):
        lp_norm(lambda q: q[..., 0], 2.0)


def test_lp_norm_callable_constant():
    rep = lp_norm(lambda q: np.full(q.shape[:-1], 3.0), 2.0, region=[(0, 2), (0, 2)], method="monte_carlo")
    assert rep.value == pytest.approx(6.0)


def test_fourier_pair_examples():
    g = FrequencyField.from_function(lambda x: np.exp(-np.sum(x ** 2, -1) / 0.05), 1 / 32, 2)
    assert fourier_pair_check(g) <= 1e-10
    h = 1 / 16
    f = FrequencyField.from_function(lambda x: np.exp(2j * np.pi * 3 * x[..., 0] / (33 * h)), h, 2)
    assert fourier_pair_check(f) <= 1e-12
    assert fourier_pair_check(f.copy(np.zeros(f.shape))) == 0


def test_dump_roundtrip():
    rng = np.random.default_rng(0)
    f = FrequencyField(rng.normal(size=(5, 7)) + 1j * rng.normal(size=(5, 7)), 0.125, (-2, -3))
    g = load_bytes(dump_bytes(f))
    assert isinstance(g, FrequencyField)
    assert np.array_equal(g.values, f.values) and g.h == f.h and g.offset == f.offset
    s = SpaceTimeField(rng.normal(size=(3, 4, 5)), [0.5, 0.25, 1.0], [-1, 0, 2])
    t = load_bytes(dump_bytes(s))
    assert np.array_equal(t.values, s.values) and t.spacing == s.spacing and t.offset == s.offset
    with pytest.raises(ValueError):
        load_bytes(b"garbage" * 20)


def test_surfaces():
    xi = np.array([[0.3, -0.2], [0.5, 0.5]])
    assert np.allclose(paraboloid(3).h(xi), [0.13, 0.5])
    assert np.allclose(hyperbolic_paraboloid().grad_h(xi), xi[:, ::-1])
    assert hyperbolic_paraboloid().curvature_class == "hyperbolic"
    s = fractional(3.0)
    eps = 1e-6
    num = (s.h(xi + [eps, 0]) - s.h(xi - [eps, 0])) / (2 * eps)
    assert np.allclose(num, s.grad_h(xi)[:, 0], atol=1e-8)
    p = polynomial_surface({(2, 0): 1.0, (0, 2): 1.0})
    assert p.curvature_class == "elliptic"
    assert np.allclose(p.hess_h(xi), 2 * np.eye(2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(2, 8), st.integers(0, 1000))
def test_lp_norm_homogeneous(c, p, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(6, 5))
    a = lp_norm(SpaceTimeField(v, [0.5, 0.5], [0, 0]), p).value
    b = lp_norm(SpaceTimeField(c * v, [0.5, 0.5], [0, 0]), p).value
    assert b == pytest.approx(c * a, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.fractions(Fraction(1, 4), 5), st.integers(2, 6), st.fractions(2, 20))
def test_critical_exponent_exact_matches_float(alpha, n, p):
    ex = critical_exponent(alpha=alpha, n=n, p=p)
    assert isinstance(ex, Fraction)
    assert float(ex) == pytest.approx(critical_exponent(alpha=float(alpha), n=n, p=float(p)), abs=1e-12)
