"""Polynomial partitioning, wall geometry, tube classification and the
cell / transverse / tangent iteration.

The partitioning polynomial is a product of factors.  *Ham* factors are dense
polynomials found by a discrete ham-sandwich search that bisects every current
piece of the mass; *slab* factors are products of axis-aligned planes that cut
the ball into cubes of side ``2R/D``.  Cells are the classes of the sign
pattern (plus slab index) outside the wall ``W = {dist(x, Z(P)) <= R^{1/2+delta}}``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .broad import CapGrid, bilinear_from_caps, broad_from_caps
from .fields import ExperimentParams, FrequencyField, ParameterError, SurfaceSpec, e, make_rng, paraboloid
from .wavepackets import TubeSet, decompose

TRACE_SCHEMA = "wplab.iteration-trace"
TRACE_VERSION = 1
LEDGER_CONST = 16.0


# ---------------------------------------------------------------- polynomials

def monomial_exponents(n: int, d: int) -> np.ndarray:
    """All exponent vectors of total degree ``<= d`` in ``n`` variables."""
    ex = [e for e in itertools.product(range(d + 1), repeat=n) if sum(e) <= d]
    ex.sort(key=lambda t: (sum(t), tuple(-x for x in t)))
    return np.array(ex, int)


class MonoPoly:
    """``sum_m c_m ((x - center) / scale)^{e_m}``."""

    def __init__(self, exps, coef, center, scale):
        self.exps = np.asarray(exps, int)
        self.coef = np.asarray(coef, float)
        self.center = np.asarray(center, float)
        self.scale = float(scale)

    @property
    def degree(self) -> int:
        return int(self.exps.sum(1).max()) if len(self.exps) else 0

    def _y(self, X):
        return (np.asarray(X, float) - self.center) / self.scale

    def __call__(self, X):
        Y = self._y(X)
        return _monomials(Y, self.exps) @ self.coef

    def grad(self, X):
        Y = self._y(X)
        n = Y.shape[-1]
        out = np.zeros(Y.shape)
        for k in range(n):
            ek = self.exps.copy()
            c = self.coef * ek[:, k]
            ek[:, k] = np.maximum(ek[:, k] - 1, 0)
            out[..., k] = _monomials(Y, ek) @ c
        return out / self.scale

    def to_dict(self):
        return {"kind": "mono", "exps": self.exps.tolist(), "coef": self.coef.tolist(),
                "center": self.center.tolist(), "scale": self.scale}


class SlabPoly:
    """``prod_i (x_axis - a_i) / scale``; cells are the slabs between planes."""

    def __init__(self, axis: int, planes, scale):
        self.axis = int(axis)
        self.planes = np.sort(np.asarray(planes, float))
        self.scale = float(scale)

    @property
    def degree(self) -> int:
        return len(self.planes)

    def __call__(self, X):
        x = np.asarray(X, float)[..., self.axis]
        return np.prod((x[..., None] - self.planes) / self.scale, axis=-1)

    def grad(self, X):
        X = np.asarray(X, float)
        x = X[..., self.axis]
        out = np.zeros(X.shape)
        t = (x[..., None] - self.planes) / self.scale
        m = len(self.planes)
        g = np.zeros(x.shape)
        for i in range(m):
            g += np.prod(np.delete(t, i, axis=-1), axis=-1)
        out[..., self.axis] = g / self.scale
        return out

    def slab(self, X):
        return np.searchsorted(self.planes, np.asarray(X, float)[..., self.axis])

    def distance(self, X):
        x = np.asarray(X, float)[..., self.axis]
        if not len(self.planes):
            return np.full(x.shape, np.inf)
        return np.min(np.abs(x[..., None] - self.planes), axis=-1)

    def to_dict(self):
        return {"kind": "slab", "axis": self.axis, "planes": self.planes.tolist(), "scale": self.scale}


def _monomials(Y, exps):
    Y = np.asarray(Y, float)
    dmax = int(exps.max()) if exps.size else 0
    pw = np.empty((dmax + 1,) + Y.shape)
    pw[0] = 1.0
    for k in range(1, dmax + 1):
        pw[k] = pw[k - 1] * Y
    out = pw[exps[:, 0], ..., 0]
    for k in range(1, Y.shape[-1]):
        out = out * pw[exps[:, k], ..., k]
    return np.moveaxis(out, 0, -1)


class PartitionPolynomial:
    """Product of ham factors and slab factors."""

    def __init__(self, ham=(), slabs=()):
        self.ham = list(ham)
        self.slabs = list(slabs)

    @property
    def factors(self):
        return self.ham + self.slabs

    @property
    def total_degree(self) -> int:
        return sum(f.degree for f in self.factors)

    @property
    def ham_degree(self) -> int:
        return sum(f.degree for f in self.ham)

    def __call__(self, X):
        X = np.asarray(X, float)
        out = np.ones(X.shape[:-1])
        for f in self.factors:
            out = out * f(X)
        return out

    def grad(self, X):
        X = np.asarray(X, float)
        vals = [f(X) for f in self.factors]
        out = np.zeros(X.shape)
        for j, f in enumerate(self.factors):
            rest = np.ones(X.shape[:-1])
            for i, v in enumerate(vals):
                if i != j:
                    rest = rest * v
            out += f.grad(X) * rest[..., None]
        return out

    def labels(self, X) -> np.ndarray:
        """Integer label per point: ham signs then slab indices, ``(..., n_factors)``."""
        X = np.asarray(X, float)
        cols = [(f(X) > 0).astype(int) for f in self.ham] + [f.slab(X) for f in self.slabs]
        if not cols:
            return np.zeros(X.shape[:-1] + (0,), int)
        return np.stack(cols, -1)

    def factor_distances(self, X) -> np.ndarray:
        """First-order distance to each factor's zero set, ``(n_factors, ...)``."""
        X = np.asarray(X, float)
        out = []
        for f in self.ham:
            g = np.linalg.norm(f.grad(X), axis=-1)
            v = np.abs(f(X))
            tiny = 1e-9 / f.scale
            out.append(np.where(g > tiny, v / np.where(g > tiny, g, 1.0), 0.0))
        for f in self.slabs:
            out.append(f.distance(X))
        return np.array(out) if out else np.full((0,) + X.shape[:-1], np.inf)

    def wall_distance(self, X, R: float = np.inf) -> np.ndarray:
        """``min_j |P_j| / |grad P_j|`` clipped to ``[0, R]``."""
        fd = self.factor_distances(X)
        X = np.asarray(X, float)
        if fd.shape[0] == 0:
            return np.full(X.shape[:-1], R)
        return np.clip(np.min(fd, axis=0), 0.0, R)

    def to_dict(self):
        return {"factors": [f.to_dict() for f in self.factors], "total_degree": self.total_degree}


# ---------------------------------------------------------------- ham sandwich

def ham_degree_for(pieces: int, n: int) -> int:
    """Least ``d`` with ``binom(d + n, n) >= pieces + 1``."""
    d = 1
    while comb(d + n, n) < pieces + 1:
        d += 1
    return d


def ham_schedule(D: int, n: int, max_levels: int = 3) -> list:
    """Degrees of the successive bisection factors within budget ``D``."""
    degs, tot = [], 0
    while len(degs) < max_levels:
        d = ham_degree_for(2 ** len(degs), n)
        if tot + d > D:
            break
        degs.append(d)
        tot += d
    return degs


def _imbalance(z, w, piece, npieces, W):
    s = np.bincount(piece, weights=w * np.sign(z), minlength=npieces)
    return float(np.max(np.abs(s) / W))


def _ham_search(Y, w, piece, npieces, deg, rng, starts=6, iters=120):
    """Coefficients of a degree-``deg`` polynomial bisecting every piece."""
    n = Y.shape[1]
    exps = monomial_exponents(n, deg)
    Phi = _monomials(Y, exps)
    colscale = np.maximum(np.std(Phi, axis=0), 1e-12)
    colscale[0] = 1.0
    Phi = Phi / colscale
    W = np.maximum(np.bincount(piece, weights=w, minlength=npieces), 1e-300)
    wn = w / W[piece]
    best, best_c = np.inf, None
    big = int(np.argmax(W))
    for s in range(starts):
        c = rng.standard_normal(len(exps))
        z = Phi @ c
        sel = piece == big
        # constant term: weighted median of the largest piece
        zs, ws = z[sel], w[sel]
        o = np.argsort(zs)
        cw = np.cumsum(ws[o])
        c[0] -= zs[o][np.searchsorted(cw, cw[-1] / 2.0)]
        c /= np.linalg.norm(c)
        m1 = np.zeros_like(c)
        m2 = np.zeros_like(c)
        lr = 0.05
        for it in range(iters):
            z = Phi @ c
            J = _imbalance(z, w, piece, npieces, W)
            if J < best:
                best, best_c = J, c.copy()
            if best <= 0.01:
                break
            tau = 0.1 * np.median(np.abs(z)) + 1e-12
            th = np.tanh(z / tau)
            m = np.bincount(piece, weights=wn * th, minlength=npieces)
            gz = 2.0 * m[piece] * wn * (1.0 - th ** 2) / tau
            g = Phi.T @ gz
            g -= (g @ c) * c
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g * g
            c = c - lr * (m1 / (1 - 0.9 ** (it + 1))) / (np.sqrt(m2 / (1 - 0.999 ** (it + 1))) + 1e-12)
            c /= np.linalg.norm(c)
        if best <= 0.01:
            break
    return exps, best_c / colscale, best


# ---------------------------------------------------------------- cells

@dataclass
class Cell:
    label: tuple
    mass: float
    center: np.ndarray
    radius: float
    indices: np.ndarray


@dataclass
class CellSet:
    cells: list
    wall_mask: np.ndarray
    width: float
    R: float
    center: np.ndarray
    retained: list
    median: float
    ratio: float
    retained_fraction: float
    degenerate: bool = False
    imbalances: list = field(default_factory=list)
    polynomial: PartitionPolynomial | None = None

    def wall(self, X) -> np.ndarray:
        """Wall predicate ``dist(x, Z(P)) <= R^{1/2+delta}``."""
        return self.polynomial.wall_distance(X, self.R) <= self.width

    def cell_index(self, X) -> np.ndarray:
        """Index into ``cells`` for each point (-1 on the wall or in no listed cell)."""
        X = np.asarray(X, float)
        lab = self.polynomial.labels(X)
        out = -np.ones(X.shape[:-1], int)
        table = {c.label: i for i, c in enumerate(self.cells)}
        flat = lab.reshape(-1, lab.shape[-1])
        o = out.reshape(-1)
        for k, row in enumerate(map(tuple, flat)):
            o[k] = table.get(row, -1)
        out = o.reshape(X.shape[:-1])
        return np.where(self.wall(X), -1, out)


def _canonical_order(X, w):
    keys = [w] + [X[:, k] for k in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def partition(points, D: int, weights=None, R: float | None = None, center=None, delta: float = 0.05,
              seed: int = 0, starts: int = 6, iters: int = 120, subsample: int = 6000,
              max_levels: int = 3):
    """Partition a weighted point cloud in ``B_R(center)`` with degree budget ``D``.

    Returns ``(P, CellSet)``.  The result does not depend on the order of the
    input points.
    """
    if D < 2:
        raise ParameterError("D must be >= 2")
    X = np.asarray(points, float)
    if X.ndim != 2 or len(X) == 0:
        raise ParameterError("need a non-empty (N, n) point array")
    N, n = X.shape
    w = np.ones(N) if weights is None else np.asarray(weights, float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ParameterError("weights must be finite and non-negative")
    c = np.zeros(n) if center is None else np.asarray(center, float)
    if R is None:
        R = float(np.max(np.linalg.norm(X - c, axis=1)))
    R = max(float(R), 1e-12)
    width = R ** (0.5 + delta)
    spread = np.max(np.abs(X - X[0]))
    if spread <= 1e-12 * max(1.0, R) or w.sum() == 0:
        P = PartitionPolynomial()
        cs = CellSet([Cell((), float(w.sum()), X[0].copy(), 0.0, np.arange(N))], np.zeros(N, bool),
                     width, R, c, [0], float(w.sum()), 1.0, 1.0, degenerate=True, polynomial=P)
        return P, cs
    order = _canonical_order(X, w)
    Xs, ws = X[order], w[order]
    Ys = (Xs - c) / R
    step = max(1, len(Xs) // subsample)
    sub = np.arange(0, len(Xs), step)
    rng = make_rng(seed, 101)
    piece = np.zeros(len(Xs), int)
    ham, imbal = [], []
    for lev, deg in enumerate(ham_schedule(D, n, max_levels)):
        npieces = 2 ** lev
        ps = piece[sub]
        exps, coef, _ = _ham_search(Ys[sub], ws[sub], ps, npieces, deg, rng, starts, iters)
        f = MonoPoly(exps, coef, c, R)
        z = f(Xs)
        Wp = np.maximum(np.bincount(piece, weights=ws, minlength=npieces), 1e-300)
        imbal.append(_imbalance(z, ws, piece, npieces, Wp))
        piece = 2 * piece + (z > 0)
        ham.append(f)
    g = 2.0 * R / D
    slabs = [SlabPoly(k, c[k] - R + g * np.arange(1, D), R) for k in range(n)]
    P = PartitionPolynomial(ham, slabs)
    wall = P.wall_distance(X, R) <= width
    lab = P.labels(X)
    cells = []
    off = np.nonzero(~wall)[0]
    if len(off):
        uniq, inv = np.unique(lab[off], axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        for k, u in enumerate(uniq):
            idx = off[inv == k]
            pts = X[idx]
            lo, hi = pts.min(0), pts.max(0)
            cen = 0.5 * (lo + hi)
            rad = float(np.max(np.linalg.norm(pts - cen, axis=1)))
            cells.append(Cell(tuple(int(a) for a in u), float(w[idx].sum()), cen, rad, np.sort(idx)))
    masses = np.array([cl.mass for cl in cells])
    pos = masses[masses > 0]
    if len(pos):
        med = float(np.median(pos))
        keep = [i for i, m in enumerate(masses) if med / np.sqrt(2) <= m <= np.sqrt(2) * med]
        km = masses[keep]
        ratio = float(km.max() / km.min()) if len(km) else 1.0
        frac = float(km.sum() / masses.sum())
    else:
        med, keep, ratio, frac = 0.0, [], 1.0, 0.0
    cs = CellSet(cells, wall, width, R, c, keep, med, ratio, frac, False, imbal, P)
    return P, cs


# ---------------------------------------------------------------- tube classification

def _perp_basis(u):
    a = np.eye(len(u))[int(np.argmin(np.abs(u)))]
    b1 = a - (a @ u) * u
    b1 /= np.linalg.norm(b1)
    if len(u) == 3:
        return np.stack([b1, np.cross(u, b1)])
    Q, _ = np.linalg.qr(np.column_stack([u, np.eye(len(u))]))
    return Q[:, 1:len(u)].T


def _chords(ts: TubeSet, center, rad):
    """Axis parameter interval ``[s0, s1]`` inside ``B(center, rad)`` per tube (nan if missed)."""
    base = ts.x0 + np.column_stack([-ts.v, np.zeros(len(ts))])
    dirv = np.column_stack([-ts.grad, np.ones(len(ts))])
    rel = base - center
    a = np.sum(dirv * dirv, 1)
    b = 2 * np.sum(dirv * rel, 1)
    c = np.sum(rel * rel, 1) - rad ** 2
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.where(disc > 0, disc, np.nan))
    return base, dirv, (-b - sq) / (2 * a), (-b + sq) / (2 * a)


def _perp_frames(dirv):
    u = dirv / np.linalg.norm(dirv, axis=1, keepdims=True)
    a = np.zeros_like(u)
    a[np.arange(len(u)), np.argmin(np.abs(u), axis=1)] = 1.0
    b1 = a - np.sum(a * u, 1, keepdims=True) * u
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(u, b1)
    return u, b1, b2


def _axis_samples(ts: TubeSet, center, rad, m):
    base, dirv, s0, s1 = _chords(ts, center, rad)
    t = np.linspace(0.0, 1.0, m)
    s = s0[:, None] + (s1 - s0)[:, None] * t[None]
    return base[:, None, :] + s[..., None] * dirv[:, None, :], dirv


def tube_meets(ts: TubeSet, region_pts, slack: float = 0.0) -> np.ndarray:
    """Mask of tubes containing at least one region sample point (width widened by ``slack``)."""
    if len(region_pts) == 0 or len(ts) == 0:
        return np.zeros(len(ts), bool)
    scale = 1.0 + slack / ts.width
    out = np.zeros(len(ts), bool)
    for s in range(0, len(ts), 256):
        sub = ts.subset(np.arange(s, min(len(ts), s + 256)))
        out[s:s + 256] = sub.contains(region_pts, scale).any(1)
    return out


def wall_meeting(ts: TubeSet, P: PartitionPolynomial, ball_center, ball_radius, R, width_w, m=64):
    """Tubes with a sampled point of ``T cap B_k cap W`` (axis plus 16 boundary offsets)."""
    center = np.asarray(ball_center, float)
    ax, dirv = _axis_samples(ts, center, ball_radius + ts.width, m)
    if ts.x0.size != 3:
        raise ParameterError("tube classification is implemented for n = 3")
    _, b1, b2 = _perp_frames(dirv)
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    offs = [np.zeros((len(ts), 3))] + [ts.width * f * (np.cos(a) * b1 + np.sin(a) * b2)
                                       for f in (0.5, 1.0) for a in ang]
    offs = np.stack(offs, 1)                                  # (nt, 17, 3)
    pts = ax[:, :, None, :] + offs[:, None, :, :]             # (nt, m, 17, 3)
    ok = np.isfinite(pts).all(-1)
    pts = np.where(ok[..., None], pts, 0.0)
    ok &= np.linalg.norm(pts - center, axis=-1) <= ball_radius
    ok &= np.linalg.norm(pts - ts.x0, axis=-1) <= ts.r
    meet = np.zeros(len(ts), bool)
    flat_ok = ok.reshape(len(ts), -1)
    if flat_ok.any():
        fp = pts.reshape(len(ts), -1, 3)
        wd = np.full(flat_ok.shape, np.inf)
        wd[flat_ok] = P.wall_distance(fp[flat_ok], R)
        meet = np.any(wd <= width_w, axis=1)
    return meet


def _project(fj, Z0, iters, max_step, tol):
    """Damped Newton projection of ``Z0`` onto ``Z(fj)``; slabs project exactly."""
    z = Z0.copy()
    if isinstance(fj, SlabPoly):
        if len(fj.planes):
            x = z[:, fj.axis]
            k = np.argmin(np.abs(x[:, None] - fj.planes), axis=1)
            z[:, fj.axis] = fj.planes[k]
        return z
    act = np.arange(len(z))
    for _ in range(iters):
        if len(act) == 0:
            break
        za = z[act]
        val = fj(za)
        g = fj.grad(za)
        g2 = np.sum(g * g, 1)
        stepv = np.where(g2 > 0, val / np.where(g2 > 0, g2, 1.0), 0.0)[:, None] * g
        sl = np.linalg.norm(stepv, axis=1, keepdims=True)
        stepv = np.where(sl > max_step, stepv * (max_step / np.maximum(sl, 1e-300)), stepv)
        z[act] = za - stepv
        act = act[sl[:, 0] > tol]
    return z


@dataclass
class Classification:
    tangent: np.ndarray        # indices into the tube set
    transverse: np.ndarray
    meeting: np.ndarray        # mask of tubes meeting B_k cap W
    vacuous: np.ndarray        # indices declared tangent because no zero-set point was found
    max_angle: np.ndarray      # per tube, nan when no point was found


def classify_tubes(ts: TubeSet, P: PartitionPolynomial, ball_center, ball_radius: float, R: float,
                   delta: float, wall=None, samples: int = 256, newton_iters: int = 50, seed: int = 0,
                   meeting=None) -> Classification:
    """Tangent / transverse split of tubes meeting ``B_k cap W``.

    Zero-set points are found by projecting ``samples`` points of ``2B_k cap 10T``
    onto each factor's zero set with damped Newton; a point is kept if it lies
    in ``2B_k cap 10T`` and is away from the other factors (non-singular).
    ``wall`` is the wall width (default ``R^{1/2+delta}``).
    """
    center = np.asarray(ball_center, float)
    width_w = R ** (0.5 + delta) if wall is None else wall
    thr = R ** (-0.5 + 2 * delta)
    if meeting is None:
        meeting = wall_meeting(ts, P, center, ball_radius, R, width_w)
    meeting = np.asarray(meeting, bool)
    mi = np.nonzero(meeting)[0]
    max_angle = np.full(len(ts), np.nan)
    if len(mi):
        sub = ts.subset(mi)
        ax, dirv = _axis_samples(sub, center, 2 * ball_radius, samples)
        u, b1, b2 = _perp_frames(dirv)
        rng = make_rng(seed, 7)
        # uniform in the cross-section disc of 10T
        rad = 10 * sub.width * np.sqrt(rng.random((len(mi), samples, 1)))
        th = 2 * np.pi * rng.random((len(mi), samples, 1))
        seeds = ax + rad * (np.cos(th) * b1[:, None, :] + np.sin(th) * b2[:, None, :])
        valid = np.isfinite(seeds).all(-1)
        seeds = np.where(valid[..., None], seeds, center)
        Z0 = seeds.reshape(-1, 3)
        tube_of = np.repeat(np.arange(len(mi)), samples)
        vflat = valid.reshape(-1)
        factors = P.factors
        best = np.full(len(mi), -np.inf)
        for j, fj in enumerate(factors):
            z = _project(fj, Z0, newton_iters, 10 * sub.width, 1e-9 * R)
            g = fj.grad(z)
            gn = np.linalg.norm(g, axis=1)
            res = np.abs(fj(z)) / np.maximum(gn, 1e-300)
            ok = vflat & (gn > 1e-9 / fj.scale) & (res <= 1e-6 * R)
            ok &= np.linalg.norm(z - center, axis=1) <= 2 * ball_radius
            rel = z - sub.x0
            core = rel[:, :-1] + rel[:, -1:] * sub.grad[tube_of] + sub.v[tube_of]
            ok &= np.linalg.norm(core, axis=1) <= 10 * sub.width
            others = [f for k, f in enumerate(factors) if k != j]
            if others:
                od = PartitionPolynomial([f for f in others if isinstance(f, MonoPoly)],
                                         [f for f in others if isinstance(f, SlabPoly)]).factor_distances(z)
                ok &= np.min(od, axis=0) > 1e-6 * R
            if ok.any():
                ang = np.arcsin(np.clip(np.abs(np.sum(g[ok] * u[tube_of[ok]], 1)) / gn[ok], 0, 1))
                np.maximum.at(best, tube_of[ok], ang)
        found = np.isfinite(best)
        max_angle[mi[found]] = best[found]
    found_all = np.isfinite(max_angle)
    tang = mi[~found_all[mi] | (max_angle[mi] <= thr)]
    trans = mi[found_all[mi] & (max_angle[mi] > thr)]
    vac = mi[~found_all[mi]]
    return Classification(tang, trans, meeting, vac, max_angle)


def _line_roots(fj, p0, p1) -> np.ndarray:
    """Parameters ``s in (0, 1)`` where factor ``fj`` vanishes on ``p0 + s (p1 - p0)``."""
    if isinstance(fj, SlabPoly):
        a, b = p0[fj.axis], p1[fj.axis]
        if a == b:
            return np.zeros(0)
        s = (fj.planes - a) / (b - a)
        return s[(s > 0) & (s < 1)]
    deg = max(fj.degree, 1)
    # exact interpolation of the restricted polynomial on Chebyshev nodes
    x = np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1))
    s_nodes = 0.5 * (x + 1)
    vals = fj(p0 + s_nodes[:, None] * (p1 - p0))
    c = np.polynomial.chebyshev.chebfit(x, vals, deg)
    if not np.any(c):
        return np.zeros(0)
    rt = np.polynomial.chebyshev.chebroots(np.trim_zeros(c, "b")) if np.any(c[1:]) else np.zeros(0)
    rt = rt[np.abs(rt.imag) <= 1e-9].real
    s = 0.5 * (rt + 1)
    return s[(s > 0) & (s < 1)]


def check_cell_crossing(tube, P: PartitionPolynomial, samples: int = 1000) -> int:
    """Number of distinct sign/slab cells met by the tube core.

    The core is sampled at ``samples`` points plus one point inside every
    interval between consecutive zeros of the factors along the core, so thin
    cells are never skipped.
    """
    ts = tube if isinstance(tube, TubeSet) else TubeSet.from_tubes([tube])
    p0, p1 = ts.segments()
    p0, p1 = p0[0], p1[0]
    cuts = [np.zeros(0)] + [_line_roots(fj, p0, p1) for fj in P.factors]
    knots = np.unique(np.concatenate([[0.0, 1.0]] + cuts))
    s = np.concatenate([np.linspace(0.0, 1.0, max(samples, 2)), 0.5 * (knots[1:] + knots[:-1])])
    pts = p0 + s[:, None] * (p1 - p0)
    lab = P.labels(pts)
    if lab.shape[-1] == 0:
        return 1
    return int(len(np.unique(lab, axis=0)))


# ---------------------------------------------------------------- wall functions

def assemble_wall_functions(packets: dict, keys, I, like: FrequencyField) -> FrequencyField:
    """``f_{I,k,+} = sum_{tau in I} sum_{T in keys} f_{tau,T}`` on the lattice of ``like``.

    ``packets`` maps a cap label ``tau`` to its WavePacketSet; ``keys`` is the
    set of tube keys (``(cap index, v index)``) to include.
    """
    out = like.copy(np.zeros(like.shape, complex))
    keys = set(keys)
    for tau in I:
        wps = packets[tau]
        sel = [k for k in wps.keys() if k in keys]
        if sel:
            out.values += wps.sum_packets(sel, like=like).values
    return out


# ---------------------------------------------------------------- grid sampling

class _Sampler:
    """``Ef`` at integer grid points ``(q1, .., q_d, k)`` meaning ``x' = q / (M h)``, ``t = k / (M h)``."""

    def __init__(self, surface: SurfaceSpec, M: int):
        self.surface = surface
        self.M = int(M)

    def spacing(self, h):
        return 1.0 / (self.M * h)

    def eval(self, f: FrequencyField, idx) -> np.ndarray:
        idx = np.asarray(idx, int).reshape(-1, f.d + 1)
        out = np.zeros(len(idx), complex)
        flat = f.values.reshape(-1)
        nz = np.nonzero(flat)[0]
        if len(nz) == 0 or len(idx) == 0:
            return out
        M, d = self.M, f.d
        sub = np.unravel_index(nz, f.shape)
        pos = np.zeros(len(nz), np.int64)
        for k in range(d):
            pos = pos * M + (f.offset[k] + sub[k]) % M
        xi = np.stack([(f.offset[k] + sub[k]) * f.h for k in range(d)], -1)
        hv = self.surface.h(xi)
        a = flat[nz]
        dt = self.spacing(f.h)
        for kt in np.unique(idx[:, -1]):
            sel = idx[:, -1] == kt
            b = a * e(hv * kt * dt)
            A = (np.bincount(pos, weights=b.real, minlength=M ** d)
                 + 1j * np.bincount(pos, weights=b.imag, minlength=M ** d)).reshape((M,) * d)
            F = np.fft.ifftn(A) * M ** d * f.h ** d
            q = idx[sel, :-1] % M
            out[sel] = F[tuple(q.T)]
        return out


# ---------------------------------------------------------------- iteration

@dataclass
class CellRecord:
    id: int
    step: int
    parent: int | None
    kind: str                  # ball | cell | wall
    center: list
    radius: float
    norm2: float
    packets: dict = field(default_factory=dict)    # tau -> list of tube keys
    info: dict = field(default_factory=dict)


@dataclass
class StepRecord:
    u: int
    state: str
    r_prev: float
    r: float
    terms: dict = field(default_factory=dict)
    ledger: list = field(default_factory=list)
    cells: list = field(default_factory=list)


@dataclass
class IterationTrace:
    R: float
    D: int
    delta: float
    eps: float
    states: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def s_c(self) -> int:
        return self.states.count("cell")

    @property
    def s_t(self) -> int:
        return self.states.count("trans")

    @property
    def s(self) -> int:
        return len(self.states)

    def violations(self) -> list:
        return [(st.u, ent) for st in self.steps for ent in st.ledger if not ent["ok"]]

    def ancestors(self, cid) -> list:
        chain = []
        while cid is not None:
            chain.append(cid)
            cid = self.cells[cid].parent
        return chain

    def check_invariants(self) -> list:
        """Names of failed structural invariants (empty when all hold)."""
        bad = []
        r = self.R
        for st, rr in zip(self.states, self.radii[1:]):
            want = r / self.D if st == "cell" else r ** (1 - self.delta) if st == "trans" else r
            if abs(rr - want) > 1e-9 * max(1.0, want):
                bad.append("radii")
            r = rr
        if "tang" in self.states[:-1]:
            bad.append("tang-not-last")
        if self.s_c > int(np.ceil(np.log(self.R) / np.log(self.D))):
            bad.append("s_c")
        if self.s_t > int(np.ceil(self.delta ** -2)):
            bad.append("s_t")
        for cid, c in self.cells.items():
            if c.parent is not None and self.cells[c.parent].step != c.step - 1:
                bad.append("nesting")
        return bad

    def to_dict(self):
        def keyjson(k):
            return [list(k[0]), list(k[1])]
        return {
            "schema": TRACE_SCHEMA, "version": TRACE_VERSION,
            "R": self.R, "D": self.D, "delta": self.delta, "eps": self.eps,
            "states": self.states, "radii": self.radii, "s_c": self.s_c, "s_t": self.s_t,
            "flags": self.flags, "stop_reason": self.stop_reason,
            "steps": [{"u": s.u, "state": s.state, "r_prev": s.r_prev, "r": s.r, "terms": s.terms,
                       "ledger": s.ledger, "cells": s.cells} for s in self.steps],
            "cells": [{"id": c.id, "step": c.step, "parent": c.parent, "kind": c.kind,
                       "center": c.center, "radius": c.radius, "norm2": c.norm2,
                       "packets": {str(t): [keyjson(k) for k in ks] for t, ks in c.packets.items()},
                       "info": c.info} for c in self.cells.values()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def next_radius(r: float, state: str, D: int, delta: float) -> float:
    if state == "cell":
        return r / D
    if state == "trans":
        return r ** (1 - delta)
    return r


def radii_schedule(R: float, D: int, delta: float, states) -> list:
    """``r_0 = R`` followed by the recursion for the given states."""
    out = [float(R)]
    for s in states:
        out.append(next_radius(out[-1], s, D, delta))
    return out


def default_mass(alpha: float, p: float = 13 / 4):
    """``|Br_alpha Ef|^p`` from per-cap values."""
    def F(E_caps):
        br, _ = broad_from_caps(E_caps, alpha)
        return np.abs(br) ** p
    return F


class _Region:
    """Nested region predicate: ball and optional extra tests, chained to a parent."""

    def __init__(self, center, radius, test=None, parent=None):
        self.center = np.asarray(center, float)
        self.radius = float(radius)
        self.test = test
        self.parent = parent

    def __call__(self, X):
        X = np.asarray(X, float)
        ok = np.linalg.norm(X - self.center, axis=-1) <= self.radius
        if self.test is not None:
            ok &= self.test(X)
        if self.parent is not None:
            ok &= self.parent(X)
        return ok


def _grid_points(region: _Region, dx: float, bound: float):
    c, r = region.center, region.radius
    lo = np.floor((c - r) / dx).astype(int)
    hi = np.ceil((c + r) / dx).astype(int)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    idx = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(c))
    X = idx * dx
    ok = region(X) & (np.linalg.norm(X, axis=1) <= bound)
    return idx[ok], X[ok]


def _tubes_for(packets, keys):
    """TubeSet of ``keys`` using whichever packet set knows each cap."""
    om, v, caps = [], [], []
    any_w = None
    for k in keys:
        for wps in packets.values():
            if k[0] in wps.caps:
                any_w = wps
                om.append(wps.caps[k[0]].cap.center)
                v.append(wps.v_of[k[1]])
                break
    om = np.array(om)
    return TubeSet(om, any_w.surface.grad_h(om), np.array(v), any_w.x0, any_w.r, any_w.delta)


def _subset_masks(ncaps, K, n_sample, seed):
    from .broad import _subsets
    return _subsets(ncaps, K, n_sample, seed)


def _subset_integrals(B, E_plus, alpha, p, chunk=4096):
    """Per subset ``sum_x (Br_alpha E_I)^p`` and the per-point total over subsets."""
    absP = np.abs(E_plus)
    per = np.zeros(len(B))
    tot = np.zeros(E_plus.shape[1])
    for s in range(0, len(B), chunk):
        b = B[s:s + chunk]
        S = np.abs(b.astype(float) @ E_plus)
        mx = np.max(np.where(b[:, :, None], absP[None], 0.0), axis=1)
        V = np.where(mx <= alpha * S, S, 0.0) ** p
        per[s:s + chunk] = V.sum(1)
        tot += V.sum(0)
    return per, tot


def iterate(f: FrequencyField | None, params: ExperimentParams, mass_functional=None,
            surface: SurfaceSpec | None = None, forced_states=None, max_cells: int = 2,
            points_per_radius: float = 8.0, drop_tol: float = 1e-4, bil_weight: float | None = None,
            min_scale: float = 16.0, p: float = 13 / 4, n_subsets: int = 256) -> IterationTrace:
    """Run the cell / transverse / tangent iteration on ``Ef`` over ``B_R``.

    With ``f=None`` only the radii and counters are produced for
    ``forced_states``.  Otherwise at every step each current cell ``O`` is
    sampled on a grid of spacing ``r / points_per_radius``, its mass
    ``F = mass_functional(per-cap Ef_O)`` is partitioned, packets of every
    ``f_{O,tau}`` are taken at scale ``r`` anchored at the cell centre, and the
    three terms (cells, transverse subsets, weighted bilinear) decide the
    state unless ``forced_states`` prescribes it.  At most ``max_cells``
    children (largest mass first) are followed.  ``bil_weight`` multiplies the
    bilinear term (default 1).
    """
    R, D, delta, eps, K = float(params.R), int(params.D), float(params.delta), float(params.eps), int(params.K)
    tr = IterationTrace(R, D, delta, eps, radii=[R])
    r_stop = R ** (eps / 10)
    sc_max = int(np.ceil(np.log(R) / np.log(D)))
    st_max = int(np.ceil(delta ** -2))
    forced = list(forced_states) if forced_states is not None else None
    if f is None:
        if forced is None:
            raise ParameterError("forced_states required without a field")
        r = R
        for u, st in enumerate(forced, 1):
            r = next_radius(r, st, D, delta)
            tr.states.append(st)
            tr.radii.append(r)
            tr.steps.append(StepRecord(u, st, tr.radii[-2], r))
            if st == "tang":
                tr.stop_reason = "tangent"
                break
            if r <= r_stop:
                tr.stop_reason = "small-radius"
                break
        else:
            tr.stop_reason = "forced-sequence-exhausted"
        return tr
    if R < D ** 2:
        raise ParameterError("need R >= D^2")
    surface = paraboloid(f.d + 1) if surface is None else surface
    alpha = K ** (-eps)
    F = default_mass(alpha, p) if mass_functional is None else mass_functional
    grid = CapGrid(K, f.d)
    nonadj = ~grid.adjacency()
    bil_w = 1.0 if bil_weight is None else float(bil_weight)
    root = CellRecord(0, 0, None, "ball", [0.0] * (f.d + 1), R, float(f.l2() ** 2))
    tr.cells[0] = root
    current = [(0, f, _Region(np.zeros(f.d + 1), R))]
    r = R
    nid = 1
    u = 0
    while True:
        u += 1
        if forced is not None and u > len(forced):
            tr.stop_reason = "forced-sequence-exhausted"
            break
        if r < min_scale:
            tr.flags.append("scale-floor")
            tr.stop_reason = "scale-floor"
            break
        M = max(8, int(round(points_per_radius / (f.h * r))))
        samp = _Sampler(surface, M)
        dx = samp.spacing(f.h)
        vol = dx ** (f.d + 1)
        alpha_u = 2 ** (u - 1) * alpha
        work = []
        terms = {"cell": 0.0, "trans": 0.0, "tang": 0.0}
        for cid, fO, region in current:
            idx, X = _grid_points(region, dx, R)
            if len(X) < 8:
                continue
            fts = grid.split(fO)
            E = np.array([samp.eval(ft, idx) for ft in fts])
            mass = np.asarray(F(E), float)
            if mass.sum() <= 0:
                continue
            P, cs = partition(X, D, mass, R=r, center=region.center, delta=delta, seed=params.seed + u)
            if cs.degenerate:
                tr.flags.append(f"degenerate@{u}")
                continue
            x0 = region.center
            packets = {t: decompose(ft, r, delta, x0=x0, surface=surface, drop_tol=drop_tol)
                       for t, ft in enumerate(fts) if np.any(ft.values)}
            terms["cell"] += float(sum(c.mass for c in cs.cells)) * vol
            # wall pieces B_k cap W: cubes of side r^{1-delta}
            side = r ** (1 - delta)
            widx = np.nonzero(cs.wall_mask)[0]
            cube = np.floor((X[widx] - x0) / side).astype(int)
            pieces = []
            if len(widx):
                uc, inv = np.unique(cube, axis=0, return_inverse=True)
                inv = inv.reshape(-1)
                for k, q in enumerate(uc):
                    sel = widx[inv == k]
                    bc = x0 + (q + 0.5) * side
                    pieces.append((bc, sel))
            wdata = []
            for bc, sel in pieces:
                brad = side * np.sqrt(f.d + 1) / 2
                plus, minus = {}, {}
                allkeys = sorted(set().union(*[set(wps.keys()) for wps in packets.values()]))
                if allkeys:
                    ts = _tubes_for(packets, allkeys)
                    meet = tube_meets(ts, X[sel], slack=dx * np.sqrt(f.d + 1) / 2)
                    cl = classify_tubes(ts, P, bc, brad, r, delta, meeting=meet, seed=params.seed + u)
                    kp = set(allkeys[i] for i in cl.transverse)
                    km = set(allkeys[i] for i in cl.tangent)
                    for t, wps in packets.items():
                        plus[t] = [k for k in wps.keys() if k in kp]
                        minus[t] = [k for k in wps.keys() if k in km]
                Ep = np.zeros((len(grid), len(sel)), complex)
                Em = np.zeros((len(grid), len(sel)), complex)
                for t in packets:
                    if plus.get(t):
                        Ep[t] = samp.eval(packets[t].sum_packets(plus[t], like=fO), idx[sel])
                    if minus.get(t):
                        Em[t] = samp.eval(packets[t].sum_packets(minus[t], like=fO), idx[sel])
                B, _ = _subset_masks(len(grid), K, n_subsets, params.seed + u)
                per, tot = _subset_integrals(B, Ep, 2 * alpha_u, p)
                bil = bilinear_from_caps(Em, nonadj)
                tterm = float(tot.sum()) * vol
                gterm = bil_w * float(np.sum(bil ** p)) * vol
                terms["trans"] += tterm
                terms["tang"] += gterm
                wdata.append(dict(bc=bc, sel=sel, plus=plus, minus=minus, per=per, B=B,
                                  tterm=tterm, gterm=gterm, side=side))
            work.append(dict(cid=cid, fO=fO, region=region, X=X, idx=idx, P=P, cs=cs,
                             packets=packets, wdata=wdata, mass=mass))
        if not work:
            tr.flags.append(f"empty@{u}")
            tr.stop_reason = "no-cells"
            break
        if forced is not None:
            state = forced[u - 1]
        else:
            state = max(("cell", "trans", "tang"), key=lambda s: (terms[s], s == "cell"))
        r_new = next_radius(r, state, D, delta)
        step = StepRecord(u, state, r, r_new, terms)
        parent_total = sum(tr.cells[w["cid"]].norm2 for w in work)
        children = []
        for w in work:
            par = tr.cells[w["cid"]]
            fO, packets, cs, X = w["fO"], w["packets"], w["cs"], w["X"]
            if state == "cell":
                cand = []
                for ci, cl in enumerate(cs.cells):
                    pts = X[cl.indices]
                    pk, fi = {}, fO.copy(np.zeros(fO.shape, complex))
                    for t, wps in packets.items():
                        keys = wps.keys()
                        if not keys:
                            continue
                        meet = tube_meets(wps.tubes(keys), pts, slack=dx * np.sqrt(f.d + 1) / 2)
                        ks = [keys[i] for i in np.nonzero(meet)[0]]
                        if ks:
                            pk[t] = ks
                            fi.values += wps.sum_packets(ks, like=fO).values
                    cand.append((ci, cl, pk, fi, float(fi.l2() ** 2)))
                n2 = np.array([c[4] for c in cand])
                med = float(np.median(n2)) if len(n2) else 0.0
                kept = [c for c in cand if c[4] <= 2 * med]
                step.ledger.append(dict(name="cell-pigeonhole", parent=par.id, n_cells=len(cand),
                                        n_kept=len(kept), fraction=len(kept) / max(1, len(cand)), ok=True))
                sum_all = float(n2.sum())
                step.ledger.append(dict(name="cell-sum-all", parent=par.id, lhs=sum_all,
                                        rhs=LEDGER_CONST * D * par.norm2, ratio=sum_all / max(par.norm2, 1e-300),
                                        ok=bool(sum_all <= LEDGER_CONST * D * par.norm2)))
                kept.sort(key=lambda c: (-c[1].mass, c[0]))
                for ci, cl, pk, fi, nn in kept[:max_cells]:
                    lab = cl.label
                    P = w["P"]

                    def test(Z, P=P, lab=lab, cs=cs):
                        ok = np.all(P.labels(Z) == np.array(lab), axis=-1)
                        return ok & ~cs.wall(Z)
                    reg = _Region(cl.center, max(cl.radius, dx), test, w["region"])
                    rec = CellRecord(nid, u, par.id, "cell", cl.center.tolist(), float(cl.radius), nn, pk,
                                     {"label": list(lab), "mass": cl.mass * vol})
                    step.ledger.append(dict(name="cell-max", parent=par.id, cell=nid, lhs=nn,
                                            rhs=LEDGER_CONST * D ** -2 * par.norm2,
                                            ratio=nn / max(par.norm2, 1e-300),
                                            ok=bool(nn <= LEDGER_CONST * D ** -2 * par.norm2)))
                    tr.cells[nid] = rec
                    children.append((nid, fi, reg))
                    nid += 1
            elif w["wdata"]:
                wd = w["wdata"]
                if state == "trans":
                    chosen = sorted(wd, key=lambda q: -q["tterm"])[:max_cells]
                else:
                    chosen = [max(wd, key=lambda q: q["gterm"])]
                for q in chosen:
                    if state == "trans":
                        I = np.nonzero(q["B"][int(np.argmax(q["per"]))])[0]
                        pk = {int(t): q["plus"][int(t)] for t in I if q["plus"].get(int(t))}
                    else:
                        best_t, best_n = None, -1.0
                        for t, ks in q["minus"].items():
                            if ks:
                                nn = float(packets[t].sum_packets(ks, like=fO).l2() ** 2)
                                if nn > best_n:
                                    best_t, best_n = t, nn
                        pk = {best_t: q["minus"][best_t]} if best_t is not None else {}
                    fi = fO.copy(np.zeros(fO.shape, complex))
                    for t, ks in pk.items():
                        fi.values += packets[t].sum_packets(ks, like=fO).values
                    nn = float(fi.l2() ** 2)
                    bc, side = q["bc"], q["side"]
                    cube_lo = bc - side / 2

                    def test(Z, lo=cube_lo, side=side, cs=cs):
                        inside = np.all((Z >= lo) & (Z < lo + side), axis=-1)
                        return inside & cs.wall(Z)
                    reg = _Region(bc, side * np.sqrt(f.d + 1) / 2, test, w["region"])
                    rec = CellRecord(nid, u, par.id, "wall", bc.tolist(), float(side * np.sqrt(f.d + 1) / 2),
                                     nn, pk, {"subset": sorted(int(t) for t in pk)})
                    step.ledger.append(dict(name=f"{state}-cell", parent=par.id, cell=nid, lhs=nn,
                                            rhs=LEDGER_CONST * par.norm2, ratio=nn / max(par.norm2, 1e-300),
                                            ok=bool(nn <= LEDGER_CONST * par.norm2)))
                    tr.cells[nid] = rec
                    children.append((nid, fi, reg))
                    nid += 1
        if state == "trans":
            tot_c = sum(tr.cells[c[0]].norm2 for c in children)
            step.ledger.append(dict(name="trans-sum", lhs=tot_c, rhs=LEDGER_CONST * D ** 3 * parent_total,
                                    ratio=tot_c / max(parent_total, 1e-300),
                                    ok=bool(tot_c <= LEDGER_CONST * D ** 3 * parent_total)))
        if state == "cell":
            tot_c = sum(tr.cells[c[0]].norm2 for c in children)
            step.ledger.append(dict(name="cell-sum", lhs=tot_c, rhs=LEDGER_CONST * D * parent_total,
                                    ratio=tot_c / max(parent_total, 1e-300),
                                    ok=bool(tot_c <= LEDGER_CONST * D * parent_total)))
        if len(children) > max_cells:
            children.sort(key=lambda c: (-tr.cells[c[0]].norm2, c[0]))
            for c in children[max_cells:]:
                tr.cells[c[0]].info["followed"] = False
            children = sorted(children[:max_cells], key=lambda c: c[0])
        step.cells = [c[0] for c in children]
        tr.steps.append(step)
        tr.states.append(state)
        tr.radii.append(r_new)
        r = r_new
        current = children
        if state == "tang":
            tr.stop_reason = "tangent"
            break
        if r <= r_stop:
            tr.stop_reason = "small-radius"
            break
        if tr.s_c >= sc_max and state == "cell" or tr.s_t >= st_max:
            tr.stop_reason = "counter-limit"
            break
        if not children:
            tr.flags.append(f"empty@{u}")
            tr.stop_reason = "no-cells"
            break
    return tr
