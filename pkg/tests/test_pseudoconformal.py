import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wplab.fields import ParameterError
from wplab.pseudoconformal import (BumpData, KernelSpec, PreconditionError, ER_operator, T_operator, T_tilde,
                                   kernel_Kt, main_term, phase_gradient, phase_value,
                                   pseudo_conformal_chain_check, random_data, rescaling_check,
                                   stationary_constant, stationary_phase_check, stationary_point,
                                   stationary_value, time_rescaling, zero_data)

SPEC = KernelSpec(2.0, 3)


def test_kernel_spec_cutoff():
    r = np.linspace(0, 3, 3001)
    v = SPEC.psi_radial(r)
    assert np.all(v[(r >= 0.75) & (r <= 1.5)] == 1)
    assert np.all(v[(r <= 0.5) | (r >= 2)] == 0)
    assert np.all((v >= 0) & (v <= 1))
    for bad in (dict(alpha=1.0), dict(alpha=-1.0), dict(n=1), dict(lo=0.8)):
        with pytest.raises(ParameterError):
            KernelSpec(**bad)


def test_kernel_at_origin_is_integral_of_psi():
    K0 = kernel_Kt([0.0, 0.0], 0.0, SPEC)
    # independent oracle: polar integral of psi on a fine trapezoid grid
    rho = np.linspace(0.5, 2.0, 200001)
    want = 2 * np.pi * np.trapezoid(SPEC.psi_radial(rho) * rho, rho)
    assert abs(K0.imag) < 1e-14 and K0.real > 0
    assert abs(K0.real - want) <= 1e-8 * want


def test_kernel_tensor_oracle():
    # direct 2D sum of psi(xi) e(x.xi + t|xi|^2) on a fine grid
    x, t = np.array([1.3, -0.7]), 0.9
    g = np.linspace(-2, 2, 1601)
    X, Y = np.meshgrid(g, g, indexing="ij")
    vals = SPEC.psi_radial(np.hypot(X, Y)) * np.exp(2j * np.pi * (x[0] * X + x[1] * Y + t * (X ** 2 + Y ** 2)))
    want = vals.sum() * (g[1] - g[0]) ** 2
    assert abs(kernel_Kt(x, t, SPEC) - want) <= 1e-6 * abs(want)


@pytest.mark.parametrize("x", [[3.0, 1.0], [-10.0, 4.0], [0.2, 0.0]])
def test_kernel_even(x):
    x = np.array(x)
    assert abs(kernel_Kt(x, 7.0, SPEC) - kernel_Kt(-x, 7.0, SPEC)) <= 1e-13 * max(1, abs(kernel_Kt(x, 7.0, SPEC)))


@pytest.mark.parametrize("t", [30.0, 100.0, 300.0])
def test_kernel_nonstationary_decay(t):
    # |x/t| = 8 >= 4 alpha puts xi_c at radius 4, outside supp psi
    far = abs(kernel_Kt(t * np.array([8.0, 0.0]), t, SPEC))
    stat = abs(kernel_Kt(t * np.array([2.0, 0.0]), t, SPEC))
    assert far <= t ** -2 * stat


def test_kernel_dimension_error():
    with pytest.raises(ParameterError):
        kernel_Kt([1.0, 2.0, 3.0], 1.0, SPEC)


def test_stationary_point_examples():
    assert np.allclose(stationary_point([1.0, 0.0], 2.0), [-0.5, 0.0], atol=0, rtol=0)
    assert np.allclose(np.array([1.0, 0.0]) + 2 * stationary_point([1.0, 0.0], 2.0), 0)
    th = 0.3
    xc = stationary_point([np.cos(th), np.sin(th)], 0.5)
    assert abs(np.linalg.norm(xc) - 0.25) <= 1e-15
    with pytest.raises(PreconditionError):
        stationary_point([0.0, 0.0], 2.0)
    with pytest.raises(ParameterError):
        stationary_point([1.0, 0.0], 1.0)


def test_stationary_residual_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.choice([rng.uniform(0.2, 0.9), rng.uniform(1.1, 4.0)])
        x = rng.normal(size=2) * rng.uniform(0.1, 3)
        xc = stationary_point(x, a)
        assert np.linalg.norm(phase_gradient(xc, x, a)) <= 1e-12


def test_stationary_value_examples():
    x = np.array([0.6, -1.7])
    assert stationary_constant(2.0) == -0.25
    assert abs(stationary_value(x, 2.0) + (x @ x) / 4) <= 1e-15
    # alpha = 1/2 on the unit circle: xi_c has length 1/4 and phi(xi_c) = -1/4 + 1/2
    assert abs(stationary_value([0.0, 1.0], 0.5) - 0.25) <= 1e-15
    assert abs(phase_value(stationary_point([0.0, 1.0], 0.5), [0.0, 1.0], 0.5) - 0.25) <= 1e-15
    with pytest.raises(PreconditionError):
        stationary_value([0.0, 0.0], 2.0)


@settings(max_examples=100, deadline=None)
@given(a=st.one_of(st.floats(0.2, 0.9), st.floats(1.1, 4.0)),
       x1=st.floats(-3, 3), x2=st.floats(-3, 3))
def test_stationary_value_closed_form(a, x1, x2):
    x = np.array([x1, x2])
    if np.linalg.norm(x) < 0.05:
        return
    v = stationary_value(x, a)
    assert abs(v - phase_value(stationary_point(x, a), x, a)) <= 1e-12 * max(1.0, abs(v))


def test_time_rescaling_normalises_phase():
    for a in (0.5, 2.0, 3.0):
        k, s = time_rescaling(a)
        b = a / (a - 1)
        x, t = np.array([1.1, 0.4]), 5.0
        lhs = t * stationary_constant(a) * np.linalg.norm(x / t) ** b
        tp = k * t
        rhs = s * tp * np.linalg.norm(x / tp) ** b
        assert np.isclose(lhs, rhs, rtol=1e-12)


def test_stationary_phase_decay():
    ts = 10 ** np.arange(2, 4.01, 0.5)
    slope, info = stationary_phase_check([2.0, 0.0], ts, SPEC, details=True)
    assert slope <= -1.4
    assert abs(info["main_slope"] + 1) <= 1e-9
    assert np.allclose(info["main"] * ts, 0.5, rtol=1e-12)     # |det phi''|^{-1/2} = 1/2


def test_stationary_phase_shell_precondition():
    # |x~| = 1.2 puts xi_c at radius 0.6, inside the transition shell
    with pytest.raises(PreconditionError):
        stationary_phase_check([1.2, 0.0], [100.0, 1000.0], SPEC)
    with pytest.raises(PreconditionError):
        main_term([0.0, 0.0], 10.0, SPEC)


def _pts(seed, R, m=50):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, R, (m, 2)), rng.uniform(R / 2, R, m)])


@pytest.mark.parametrize("seed", range(3))
def test_rescaling_identity(seed):
    R = 32.0
    f = random_data(seed, 2, [R / 2, R / 2], 1.0)
    assert rescaling_check(f, R, SPEC, _pts(seed, R)) <= 1e-6


def test_zero_data():
    z = zero_data(2)
    pts = _pts(0, 32.0, 5)
    for op in (lambda: ER_operator(z, 32.0, SPEC, pts), lambda: T_operator(z, pts, SPEC),
               lambda: T_tilde(z, pts, SPEC)):
        assert np.all(op() == 0)
    rep = pseudo_conformal_chain_check(z, 32.0, SPEC)
    assert rep[0].value == 0 and all(c.passed for c in rep)


def test_operators_linear():
    R = 32.0
    f, g = random_data(1, 2, [16, 16], 1.0), random_data(2, 2, [15, 17], 1.0)
    a, b = 0.3 - 1.2j, 2.5
    pts = _pts(3, R, 20)
    tpts = np.column_stack([pts[:, :2] / pts[:, 2:], 1 / pts[:, 2]])
    for op, P in ((lambda h, P: T_operator(h, P, SPEC), pts), (lambda h, P: T_tilde(h, P, SPEC), tpts),
                  (lambda h, P: ER_operator(h.scaled(R), R, SPEC, P), pts)):
        lhs = op(a * f + b * g, P)
        rhs = a * op(f, P) + b * op(g, P)
        assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(rhs).max()


def test_bump_data_scaled():
    f = random_data(4, 2, [3.0, -2.0], 1.5)
    Y = np.random.default_rng(0).uniform(-1, 5, (40, 2))
    assert np.allclose(f.scaled(8.0)(Y / 8.0), f(Y), rtol=1e-12, atol=1e-14)
    assert isinstance(f * 2, BumpData) and np.allclose((2 * f)(Y), 2 * f(Y))


@pytest.mark.parametrize("R,seed", [(16.0, 0), (32.0, 1)])
def test_chain_check(R, seed):
    f = random_data(seed, 2, [R / 2, R / 2], 1.0)
    rep = pseudo_conformal_chain_check(f, R, SPEC, seed=seed)
    names = [c.name for c in rep]
    assert names == ["identity_T_Ttilde", "norm_ratio", "norm_ratio_literal_region"]
    assert rep[0].value <= 1e-8 and rep[0].passed
    lo, hi = 2 ** (-4 / 4) / 4, 4 * 2 ** (4 / 4)
    assert lo <= rep[1].value <= hi and rep[1].passed
    assert "PASS" in str(rep[0])
