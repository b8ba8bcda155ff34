from fractions import Fraction

import numpy as np
import pytest

from wplab import harness as H
from wplab.fields import ParameterError
from wplab.partition import MonoPoly
from wplab.tubes import (Grain, Multigrain, PredicateError, Variety, build_X_set, fhat_sup,
                         l2_tube_bound_check, nested_tube_check, p_k_exponent, plane, plane_slice_area,
                         saddle, slice_wolff_estimate, sphere, whole_space, wolff_csv_rows)
from wplab.wavepackets import Cap, Tube, TubeSet, decompose


def test_p_k_examples():
    assert p_k_exponent(3, 2) == Fraction(13, 4)
    assert p_k_exponent(4, 3) == Fraction(25, 9)
    assert p_k_exponent(4, 2) == Fraction(113, 39)
    assert p_k_exponent(4, 3) <= p_k_exponent(4, 2)


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_p_k_decreasing(n):
    vals = [p_k_exponent(n, k) for k in range(2, n)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 2


def test_p_k_range():
    for n, k in ((3, 1), (3, 3), (2, 2)):
        with pytest.raises(ParameterError):
            p_k_exponent(n, k)


def test_plane_slice_matches_analytic():
    R, r = 1024.0, 64.0
    area, se, ratio = slice_wolff_estimate(plane([1, 0, 0]), R, r)
    exact = plane_slice_area(R, r)
    assert abs(area - exact) / exact <= 0.15
    assert ratio <= 16


def test_slice_empty():
    # S misses B_r entirely, so no tube fits
    assert slice_wolff_estimate(plane([1, 0, 0], offset=500.0), 1024.0, 64.0) == (0.0, 0.0, 0.0)


def test_slice_sphere_two_seeds():
    S = sphere([0, 0, 0], 32.0)
    a0, s0, _ = slice_wolff_estimate(S, 1024.0, 64.0, seed=0)
    a1, s1, _ = slice_wolff_estimate(S, 1024.0, 64.0, seed=1)
    assert a0 > 0 and a1 > 0
    assert abs(a0 - a1) <= 3 * np.hypot(s0, s1)


def test_slice_monotone_in_directions():
    S = plane([1, 0, 0])
    wide, se_w, _ = slice_wolff_estimate(S, 1024.0, 64.0, max_angle=0.1)
    narrow, se_n, _ = slice_wolff_estimate(S, 1024.0, 64.0, max_angle=0.05)
    assert narrow <= wide + 3 * np.hypot(se_w, se_n)


def test_slice_errors_and_csv():
    with pytest.raises(ParameterError):
        slice_wolff_estimate(plane([1, 0, 0]), 64.0, 128.0)
    with pytest.raises(ParameterError):
        slice_wolff_estimate(plane([1, 0, 0]), 256.0, 16.0, a=1000.0)
    txt = wolff_csv_rows([(1024, 64, 0, 1.5, 0.1, 2.0)])
    assert txt.splitlines()[0] == "R,r,a,area_estimate,std_error,bound_ratio"
    assert txt.splitlines()[1] == "1024.0,64.0,0.0,1.5,0.1,2.0"


def test_x_set_single_vertical_tube():
    R, delta = 1024.0, 0.04
    ts = TubeSet([[0.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0]], np.zeros(3), R, delta)
    region, area = build_X_set(ts)
    want = np.pi * (10 * R ** (0.5 + delta)) ** 2
    assert abs(area - want) / want <= 0.05
    assert region.contains([[0.0, 0.0]])[0] and not region.contains([[R, 0.0]])[0]


def test_x_set_empty():
    assert build_X_set(None)[1] == 0.0
    ts = TubeSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(3), 64.0, 0.04)
    assert build_X_set(ts)[1] == 0.0


def random_tubes(seed, n, R=1024.0, delta=0.04):
    rng = np.random.default_rng(seed)
    om = rng.uniform(-0.5, 0.5, (n, 2))
    return TubeSet(om, 2 * om, rng.uniform(-R / 2, R / 2, (n, 2)), np.zeros(3), R, delta)


def test_x_set_finer_grid():
    ts = random_tubes(0, 50)
    _, area = build_X_set(ts)
    _, fine = build_X_set(ts, resolution=ts.width / 32)
    assert abs(area - fine) / fine <= 0.02


def test_x_set_subadditive():
    ts = random_tubes(1, 40)
    A, B = ts.subset(np.arange(20)), ts.subset(np.arange(20, 40))
    res = ts.width / 8
    a_all = build_X_set(ts, resolution=res)[1]
    a_sep = build_X_set(A, resolution=res)[1] + build_X_set(B, resolution=res)[1]
    assert a_all <= a_sep * 1.01


@pytest.fixture(scope="module")
def packet_case():
    r = 64.0
    f = H._gauss_atoms(3, r, 1 / (4 * r))
    return f, decompose(f, r, 0.04)


def test_l2_check_zero(packet_case):
    f, w = packet_case
    z = f.copy(np.zeros(f.shape, complex))
    assert l2_tube_bound_check(z, w, []) == (0.0, 0.0)


def test_l2_check_full_family(packet_case):
    f, w = packet_case
    lhs, rhs = l2_tube_bound_check(f, w, w.keys())
    assert lhs <= 10 * f.l2() ** 2 <= rhs


def test_l2_check_subfamilies(packet_case):
    f, w = packet_case
    keys = w.keys()
    rng = np.random.default_rng(0)
    sup = fhat_sup(f)
    for _ in range(30):
        sel = [k for k in keys if rng.random() < rng.uniform(0.05, 0.6)]
        lhs, rhs = l2_tube_bound_check(f, w, sel)
        assert lhs <= rhs
        # the right side is exactly 10 |X| sup|f^|^2
        assert np.isclose(rhs, 10 * build_X_set(w.tubes(sel) if sel else None)[1] * sup ** 2)


def vtube(p, x0, r, delta=0.04, om=(0.0, 0.0)):
    """Vertical tube (cap at ``om`` with zero slope) whose core is ``x' = p``."""
    x0 = np.asarray(x0, float)
    return Tube(Cap(tuple(om), r ** -0.5, (0,)), tuple(x0[:-1] - np.asarray(p, float)), tuple(x0), r, delta,
                (0.0, 0.0))


def test_nested_m0():
    mg = Multigrain([Grain(whole_space(), np.zeros(3), 256.0)])
    assert nested_tube_check(mg, vtube([0, 0], [0, 0, 0], 256.0), [], [0.04])


def test_nested_missing_witness():
    mg = Multigrain([Grain(whole_space(), np.zeros(3), 256.0), Grain(plane([0, 0, 1]), np.zeros(3), 64.0)])
    with pytest.raises(PredicateError):
        nested_tube_check(mg, vtube([0, 0], [0, 0, 0], 256.0), [], [0.04, 0.04])


def test_nested_crossing_witness_fails():
    # S_1 is the horizontal plane; a vertical witness through it leaves its neighbourhood
    mg = Multigrain([Grain(whole_space(), np.zeros(3), 256.0), Grain(plane([0, 0, 1]), np.zeros(3), 64.0)])
    mg.validate()
    T = vtube([0, 0], [0, 0, 0], 256.0)
    ok, fails = nested_tube_check(mg, T, [vtube([0, 0], [0, 0, 0], 64.0)], [0.04, 0.04], details=True)
    assert not ok and fails == [("neighbourhood", 1, 1)]


def line_variety(n1, n2, point):
    """Codimension-2 variety ``{n1.(x-p) = 0, n2.(x-p) = 0}``."""
    polys = []
    for nv in (n1, n2):
        ex = np.vstack([np.zeros((1, 3), int), np.eye(3, dtype=int)])
        polys.append(MonoPoly(ex, np.concatenate([[-np.dot(nv, point)], nv]), np.zeros(3), 1.0))
    return Variety(polys, 3, name="line")


@pytest.mark.parametrize("seed", range(8))
def test_nested_valid_and_perturbed(seed):
    rng = np.random.default_rng(seed)
    delta = 0.04
    r = [256.0, 64.0, 16.0]
    phi = rng.uniform(0, np.pi)
    nrm = np.array([np.cos(phi), np.sin(phi), 0.0])        # vertical plane through the origin
    tang = np.array([-np.sin(phi), np.cos(phi)])
    S1 = plane(nrm)
    p = rng.uniform(-20, 20) * tang
    q = p + rng.uniform(-2, 2) * tang                       # within r_1^{1/2} of p, still in S_1
    S2 = line_variety(nrm, np.array([tang[0], tang[1], 0.0]), np.r_[q, 0.0])
    y1 = np.r_[p, rng.uniform(-50, 50)]
    y2 = np.r_[q, y1[2] + rng.uniform(-20, 20)]
    mg = Multigrain([Grain(whole_space(), np.zeros(3), r[0]), Grain(S1, y1, r[1]), Grain(S2, y2, r[2])])
    mg.validate()
    om = rng.uniform(-0.02, 0.02, 2)
    T = vtube(p, [0, 0, 0], r[0], delta, om)
    W = [vtube(p, y1, r[1], delta, om), vtube(q, y2, r[2], delta, om)]
    assert nested_tube_check(mg, T, W, [delta] * 3)
    # move witness 1 off the plane by 10 r_1^{1/2+delta}
    shift = 10 * r[1] ** (0.5 + delta) * nrm[:2]
    Wb = [vtube(p + shift, y1, r[1], delta, om), W[1]]
    ok, fails = nested_tube_check(mg, T, Wb, [delta] * 3, details=True)
    assert not ok and ("neighbourhood", 1, 1) in fails


def test_multigrain_validate_errors():
    bad_codim = Multigrain([Grain(plane([0, 0, 1]), np.zeros(3), 64.0)])
    with pytest.raises(PredicateError):
        bad_codim.validate()
    outside = Multigrain([Grain(whole_space(), np.zeros(3), 64.0), Grain(plane([0, 0, 1]), [100, 0, 0], 16.0)])
    with pytest.raises(PredicateError):
        outside.validate()


@pytest.mark.parametrize("S", [plane([1, 2, 3], 0.5), sphere([1, 0, -1], 7.0), saddle(16.0, axis=1),
                               whole_space()])
def test_variety_text_round_trip(S):
    T = Variety.from_text(S.to_text())
    assert T.n == S.n and T.codim == S.codim and T.name == S.name
    X = np.random.default_rng(0).normal(size=(20, 3)) * 5
    assert np.array_equal(T.values(X), S.values(X))


def test_variety_text_errors():
    with pytest.raises(ParameterError):
        Variety.from_text("not a variety")
    with pytest.raises(ParameterError):
        Variety.from_text("wplab-variety 1\nn 3\npoly\n1 0 0 0\n")


def test_variety_distance_exact_cases():
    X = np.random.default_rng(1).normal(size=(50, 3)) * 10
    assert np.allclose(plane([0, 0, 2.0], 4.0).distance(X), np.abs(X[:, 2] - 2.0))
    assert np.allclose(sphere([0, 0, 0], 3.0).distance(X), np.abs(np.linalg.norm(X, axis=1) - 3.0))
