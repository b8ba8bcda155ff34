"""Tube geometry: slice measure of polynomial-Wolff sets, X-sets, grains and
nested tube witnesses, and the multilinear exponent ``p_n(k)``.

Varieties are common zero sets of ``MonoPoly`` lists.  Distances to a variety
are estimated by Gauss-Newton projection onto the zero set, which is exact
for planes and spheres and first-order accurate for curved quadrics.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .extension import slice_transform
from .fields import FrequencyField, ParameterError, make_rng
from .partition import MonoPoly, _perp_frames
from .wavepackets import Tube, TubeSet, WavePacketSet

NESTED_CONST = 4.0
VARIETY_HEADER = "wplab-variety 1"


class PredicateError(ValueError):
    """Malformed input to a geometric predicate (for example a missing witness level)."""


# ---------------------------------------------------------------- exponent

def p_k_exponent(n: int, k: int) -> Fraction:
    """``2 + 6 / (2(n-1) + (k-1) prod_{i=k}^{n-1} 2i/(2i+1))`` as an exact rational."""
    if int(n) != n or int(k) != k:
        raise ParameterError("n and k must be integers")
    n, k = int(n), int(k)
    if not (2 <= k <= n - 1):
        raise ParameterError(f"need 2 <= k <= n-1, got n={n}, k={k}")
    prod = Fraction(1)
    for i in range(k, n):
        prod *= Fraction(2 * i, 2 * i + 1)
    return 2 + Fraction(6) / (2 * (n - 1) + (k - 1) * prod)


# ---------------------------------------------------------------- varieties

class Variety:
    """Common zero set of a list of polynomials in ``R^n``.

    ``codim`` defaults to the number of polynomials (complete intersection).
    An empty list is the whole space.
    """

    def __init__(self, polys=(), n: int = 3, codim: int | None = None, name: str = ""):
        self.polys = list(polys)
        self.n = int(n)
        self.codim = len(self.polys) if codim is None else int(codim)
        self.name = name
        for P in self.polys:
            if P.exps.shape[1] != self.n:
                raise ParameterError("polynomial dimension does not match n")

    @property
    def complexity(self) -> int:
        return max([P.degree for P in self.polys], default=0) * max(len(self.polys), 1)

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        return np.stack([P(X) for P in self.polys], -1) if self.polys else np.zeros(X.shape[:-1] + (0,))

    def jacobian(self, X) -> np.ndarray:
        X = np.asarray(X, float)
        if not self.polys:
            return np.zeros(X.shape[:-1] + (0, self.n))
        return np.stack([P.grad(X) for P in self.polys], -2)

    def project(self, X, iters: int = 40, tol: float = 1e-10):
        """Gauss-Newton projection; returns ``(Z, converged)``."""
        X = np.asarray(X, float).reshape(-1, self.n)
        Z = X.copy()
        if not self.polys:
            return Z, np.ones(len(Z), bool)
        scale = tol * (1.0 + np.abs(X).max(1))
        active = np.ones(len(Z), bool)
        for _ in range(iters):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            F = self.values(Z[idx])
            J = self.jacobian(Z[idx])
            if len(self.polys) == 1:
                g = J[:, 0, :]
                g2 = np.sum(g * g, 1)
                step = np.where(g2[:, None] > 0, F[:, :1] * g / np.where(g2 > 0, g2, 1)[:, None], 0.0)
            else:
                step = np.einsum("kij,kj->ki", np.linalg.pinv(J), F)
            Z[idx] -= step
            active[idx] = np.linalg.norm(step, axis=1) > scale[idx]
        F = self.values(Z)
        gn = np.linalg.norm(self.jacobian(Z), axis=-1)
        res = np.max(np.abs(F) / np.maximum(gn, 1e-300), axis=1)
        return Z, res <= 1e3 * scale

    def distance(self, X) -> np.ndarray:
        """Distance estimate ``|X - proj(X)|``; ``inf`` where projection fails."""
        X = np.asarray(X, float).reshape(-1, self.n)
        Z, ok = self.project(X)
        d = np.linalg.norm(X - Z, axis=1)
        d[~ok] = np.inf
        return d

    def sample(self, center, radius, count: int, seed: int = 0) -> np.ndarray:
        """Points of the variety near ``B_radius(center)`` by projecting uniform samples."""
        rng = make_rng(seed, 31)
        center = np.asarray(center, float)
        X = rng.normal(size=(4 * count, self.n))
        X *= (radius * rng.random(4 * count) ** (1 / self.n) / np.linalg.norm(X, axis=1))[:, None]
        Z, ok = self.project(center + X)
        Z = Z[ok & (np.linalg.norm(Z - center, axis=1) <= radius)]
        return Z[:count]

    def to_text(self) -> str:
        """Text schema: header, ``n``, then ``poly`` blocks of ``coef e_1 .. e_n`` rows ended by ``end``."""
        out = io.StringIO()
        out.write(f"{VARIETY_HEADER}\n")
        out.write(f"n {self.n}\n")
        out.write(f"codim {self.codim}\n")
        if self.name:
            out.write(f"name {self.name}\n")
        for P in self.polys:
            c = ",".join(repr(float(v)) for v in P.center)
            out.write(f"poly center={c} scale={P.scale!r}\n")
            for cf, ex in zip(P.coef, P.exps):
                out.write(repr(float(cf)) + " " + " ".join(str(int(v)) for v in ex) + "\n")
            out.write("end\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Variety":
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines or lines[0] != VARIETY_HEADER:
            raise ParameterError("missing variety header")
        n, codim, name, polys = None, None, "", []
        i = 1
        while i < len(lines):
            key, _, rest = lines[i].partition(" ")
            if key == "n":
                n = int(rest)
            elif key == "codim":
                codim = int(rest)
            elif key == "name":
                name = rest
            elif key == "poly":
                if n is None:
                    raise ParameterError("'n' must precede polynomial blocks")
                opts = dict(kv.split("=", 1) for kv in rest.split())
                center = [float(v) for v in opts.get("center", ",".join(["0"] * n)).split(",")]
                scale = float(opts.get("scale", "1"))
                exps, coef = [], []
                i += 1
                while i < len(lines) and lines[i] != "end":
                    parts = lines[i].split()
                    if len(parts) != n + 1:
                        raise ParameterError(f"bad monomial row: {lines[i]!r}")
                    coef.append(float(parts[0]))
                    exps.append([int(v) for v in parts[1:]])
                    i += 1
                if i == len(lines):
                    raise ParameterError("unterminated poly block")
                polys.append(MonoPoly(np.reshape(exps, (-1, n)), coef, center, scale))
            else:
                raise ParameterError(f"unknown variety key {key!r}")
            i += 1
        if n is None:
            raise ParameterError("variety spec lacks 'n'")
        return cls(polys, n, codim, name)


def whole_space(n: int = 3) -> Variety:
    return Variety([], n, 0, "space")


def plane(normal, offset: float = 0.0) -> Variety:
    """``{x : normal . x = offset}``."""
    nv = np.asarray(normal, float)
    n = nv.size
    exps = np.vstack([np.zeros((1, n), int), np.eye(n, dtype=int)])
    coef = np.concatenate([[-offset], nv])
    return Variety([MonoPoly(exps, coef, np.zeros(n), 1.0)], n, name="plane")


def sphere(center, radius: float) -> Variety:
    center = np.asarray(center, float)
    n = center.size
    exps = np.vstack([np.zeros((1, n), int), 2 * np.eye(n, dtype=int)])
    coef = np.concatenate([[-1.0], np.ones(n)])
    return Variety([MonoPoly(exps, coef, center, radius)], n, name="sphere")


def saddle(scale: float, axis: int = 0, center=(0.0, 0.0, 0.0)) -> Variety:
    """``x_a = (x_b^2 - x_c^2) / scale`` relative to ``center``, ``(a, b, c)`` cyclic from ``axis``."""
    n = 3
    a, b, c = axis % n, (axis + 1) % n, (axis + 2) % n
    exps = np.zeros((3, n), int)
    exps[0, a] = 1
    exps[1, b] = 2
    exps[2, c] = 2
    return Variety([MonoPoly(exps, [1.0, -1.0, 1.0], center, scale)], n, name="saddle")


# ---------------------------------------------------------------- slice Wolff

@dataclass
class _Core:
    """Occupancy of the r-scale tube union ``U`` and its erosion, on a cubic grid."""
    origin: np.ndarray
    res: float
    U: np.ndarray
    E: np.ndarray | None = None

    def lookup(self, Z, grid=None) -> np.ndarray:
        grid = self.E if grid is None else grid
        idx = np.rint((Z - self.origin) / self.res).astype(np.int64)
        shp = np.array(grid.shape)
        ok = np.all((idx >= 0) & (idx < shp), axis=-1)
        out = np.zeros(idx.shape[:-1], bool)
        out[ok] = grid[tuple(idx[ok].T)]
        return out


def _piece_distance(S: Variety, X, y, r):
    """Distance estimate to ``S cap B_r(y)``."""
    Z, ok = S.project(X)
    d2 = np.sum((X - Z) ** 2, 1) + np.maximum(0.0, np.linalg.norm(Z - y, axis=1) - r) ** 2
    d = np.sqrt(d2)
    d[~ok] = np.inf
    return d, Z


def _run_ok(ok, mid, need, margin=1):
    """Rows where the run of ``True`` through column ``mid`` has length ``>= need`` and
    extends at least ``margin`` samples on both sides."""
    left = np.cumprod(ok[:, mid::-1], axis=1).sum(1)
    right = np.cumprod(ok[:, mid:], axis=1).sum(1)
    return (left > margin) & (right > margin) & (left + right - 1 >= need)


def _hemisphere(count: int) -> np.ndarray:
    """Fibonacci directions on the upper unit hemisphere."""
    k = np.arange(count) + 0.5
    z = k / count
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    s = np.sqrt(1.0 - z * z)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def _small_core(S: Variety, y, r, w, chunk=200000):
    """Grid of ``U``: union of ``w``-balls about points lying on an admissible
    length-``r`` axis inside ``N_w(S cap B_r)``.  Returns ``None`` when empty."""
    n = S.n
    res = w / 8.0
    half = int(np.ceil((r + 2 * w) / res)) + 4
    half += (-half) % 4  # coarse lattice (every 4th node) passes through y
    ax = (np.arange(-half, half + 1)) * res
    origin = y - half * res
    shape = (ax.size,) * n
    # near mask N_w(S cap B_r) on the fine grid
    G = np.zeros(shape, bool)
    flat = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
    for s in range(0, len(flat), chunk):
        d, _ = _piece_distance(S, y + flat[s:s + chunk], y, r)
        G.reshape(-1)[s:s + chunk] = d <= w * (1 + 1e-9)
    core = _Core(origin, res, G)
    # candidate axis points on the coarse lattice (spacing w/2)
    cidx = np.stack(np.nonzero(G), -1)
    cidx = cidx[np.all(cidx % 4 == 0, axis=1)]
    if len(cidx) == 0:
        return None
    Zc = origin + cidx * res
    _, proj = _piece_distance(S, Zc, y, r)
    if S.codim == 1:
        nrm = S.jacobian(proj)[:, 0, :]
    else:
        raise ParameterError("slice estimate needs a hypersurface (codimension 1)")
    _, b1, b2 = _perp_frames(nrm)
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    step = w / r
    phis = np.arange(int(np.ceil(np.pi / step))) * (np.pi / np.ceil(np.pi / step))
    tilts = np.array([-step, 0.0, step])
    ns = 24
    ts = np.arange(-ns, ns + 1) * (r / ns)
    accepted = np.zeros(len(Zc), bool)

    def trial(rem, u):
        pts = Zc[rem, None, :] + ts[None, :, None] * u[..., None, :]
        ok = core.lookup(pts, G)
        accepted[rem[_run_ok(ok, ns, ns + 1, margin=0)]] = True

    # near-tangent directions first, then a full hemisphere for secant chords
    for tau in tilts:
        for phi in phis:
            rem = np.nonzero(~accepted)[0]
            if rem.size == 0:
                break
            trial(rem, np.cos(tau) * (np.cos(phi) * b1[rem] + np.sin(phi) * b2[rem])
                  + np.sin(tau) * nrm[rem])
    for u in _hemisphere(int(np.ceil(2 * np.pi / step ** 2))):
        rem = np.nonzero(~accepted)[0]
        if rem.size == 0:
            break
        trial(rem, u)
    if not accepted.any():
        return None
    marks = np.zeros(shape, bool)
    marks[tuple(cidx[accepted].T)] = True
    dist = ndimage.distance_transform_edt(~marks) * res
    core.U = dist <= w * (1 + 1e-9)
    return core


def slice_wolff_estimate(S: Variety, R: float, r: float, delta: float = 0.04, a: float = 0.0,
                         samples: int = 20000, seed: int = 0, y=None, max_angle: float = 0.1,
                         details: bool = False):
    """Monte Carlo estimate of the slice area ``|S~' cap {x_n = a}|``.

    ``S~`` is ``B_{10R}`` intersected with the ``R/r`` dilation (about the ball
    centre ``y``) of the union of ``r x r^{1/2+delta}`` tubes inside
    ``N_{2 r^{1/2+delta}}(S cap B_r(y))``.  ``S~'`` is the union of
    ``R x R^{1/2+delta}`` tubes within ``max_angle`` of ``e_n`` contained in
    ``S~``.  Returns ``(area, std_error, bound_ratio)`` with
    ``bound_ratio = area / (R^2 r^{-1/2})``.

    Candidate tubes cross the slice at points of a ``R^{1/2+delta}/2`` lattice
    with directions on a ``1/64`` angular grid.  A tube counts as contained
    when 50 axis samples spanning its length lie in ``S~`` eroded by the tube
    radius.  Each accepted tube contributes the disc of radius
    ``R^{1/2+delta}`` about its crossing point.
    """
    n = S.n
    if n != 3:
        raise ParameterError("slice estimate is implemented for n = 3")
    if not (R > r > 1):
        raise ParameterError("need R > r > 1")
    if abs(a) > 2 * R:
        raise ParameterError("slice height must satisfy |a| <= 2R")
    y = np.zeros(n) if y is None else np.asarray(y, float)
    if np.linalg.norm(y) + r > 10 * R:
        raise ParameterError("B_r(y) must lie in B_{10R}")
    w = r ** (0.5 + delta)
    lam = R / r
    rho = R ** (0.5 + delta)
    empty = (0.0, 0.0, 0.0) if not details else (0.0, 0.0, 0.0, {"crossings": 0})
    core = _small_core(S, y, r, w)
    if core is None:
        return empty
    edt = ndimage.distance_transform_edt(core.U) * core.res
    core.E = edt > rho / lam

    def inside(X):
        Z = y + (X - y) / lam
        return core.lookup(Z) & (np.linalg.norm(X, axis=-1) <= 10 * R)

    # crossing lattice on the slice, restricted to the eroded set
    zc = y[-1] + (a - y[-1]) / lam
    k = int(np.rint((zc - core.origin[-1]) / core.res))
    if not (0 <= k < core.E.shape[-1]) or not core.E[..., k].any():
        return empty
    ii = np.nonzero(core.E[..., k])
    lo = core.origin[:-1] + np.array([i.min() for i in ii]) * core.res - core.res
    hi = core.origin[:-1] + np.array([i.max() for i in ii]) * core.res + core.res
    lo, hi = y[:-1] + lam * (lo - y[:-1]), y[:-1] + lam * (hi - y[:-1])
    sp = rho / 2.0
    axes = [y[j] + sp * np.arange(np.floor((lo[j] - y[j]) / sp), np.ceil((hi[j] - y[j]) / sp) + 1)
            for j in range(n - 1)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n - 1)
    P = np.column_stack([P, np.full(len(P), a)])
    P = P[inside(P)]
    if len(P) == 0:
        return empty
    g = np.arange(-64, 65) / 64.0
    TX, TY = np.meshgrid(g, g, indexing="ij")
    th = np.hypot(TX, TY)
    sel = th < max_angle
    order = np.lexsort((TY[sel], TX[sel], th[sel]))
    TX, TY, th = TX[sel][order], TY[sel][order], th[sel][order]
    ns = 49
    ts = np.arange(-ns, ns + 1) * (R / ns)
    accepted = np.zeros(len(P), bool)
    for tx, ty, t in zip(TX, TY, th):
        rem = np.nonzero(~accepted)[0]
        if rem.size == 0:
            break
        if t > 0:
            u = np.array([np.sin(t) * tx / t, np.sin(t) * ty / t, np.cos(t)])
        else:
            u = np.array([0.0, 0.0, 1.0])
        for s in range(0, rem.size, 4096):
            blk = rem[s:s + 4096]
            pts = P[blk, None, :] + ts[None, :, None] * u
            ok = inside(pts)
            accepted[blk[_run_ok(ok, ns, ns + 1)]] = True
    C = P[accepted, :-1]
    if len(C) == 0:
        return empty
    blo, bhi = C.min(0) - rho, C.max(0) + rho
    box = float(np.prod(bhi - blo))
    tree = cKDTree(C)
    hits, total, shard = 0, 0, 0
    while total < samples:
        m = min(4096, samples - total)
        X = blo + (bhi - blo) * make_rng(seed, 13, shard).random((m, n - 1))
        d, _ = tree.query(X, distance_upper_bound=rho)
        hits += int(np.count_nonzero(d <= rho))
        total += m
        shard += 1
    q = hits / total
    area = box * q
    se = box * np.sqrt(q * (1 - q) / total)
    ratio = area / (R ** 2 * r ** -0.5)
    if details:
        return area, se, ratio, {"crossings": int(len(C)), "candidates": int(len(P)),
                                 "box": box, "rho": rho, "dilated_width": lam * w}
    return area, se, ratio


def plane_slice_area(R: float, r: float, delta: float = 0.04, max_angle: float = 0.1,
                     npts: int = 4000) -> float:
    """Closed-form slice area at ``a = 0`` for ``S`` a plane through the ball centre.

    Here ``S~`` is ``N_{2W}(D_R)`` with ``D_R`` the dilated disc and
    ``W = (R/r) r^{1/2+delta}``.  Tube axes live in the erosion
    ``N_m(D_R)``, ``m = 2W - R^{1/2+delta}``, and an axis point at in-plane
    offset ``z_1`` reaches ``|z_2| <= sqrt(R_z^2 - R^2/4) / cos(max_angle)``
    with ``R_z = R + sqrt(m^2 - z_1^2)``.  The slice is the
    ``R^{1/2+delta}``-neighbourhood of that convex region (Steiner formula).
    """
    w = r ** (0.5 + delta)
    W = (R / r) * w
    rho = R ** (0.5 + delta)
    m = 2 * W - rho
    if m <= 0:
        return 0.0
    phi = np.linspace(-np.pi / 2, np.pi / 2, npts)
    z1 = m * np.sin(phi)
    Rz = R + np.sqrt(np.maximum(m * m - z1 * z1, 0.0))
    g = np.minimum(np.sqrt(np.maximum(Rz ** 2 - R ** 2 / 4, 0.0)) / np.cos(max_angle), Rz)
    xs = np.concatenate([z1, z1[::-1]])
    ys = np.concatenate([g, -g[::-1]])
    area = 0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))
    perim = np.sum(np.hypot(np.diff(np.append(xs, xs[0])), np.diff(np.append(ys, ys[0]))))
    return float(area + perim * rho + np.pi * rho ** 2)


def wolff_csv_rows(rows) -> str:
    """CSV body for ``(R, r, a, area_estimate, std_error, bound_ratio)`` rows."""
    out = ["R,r,a,area_estimate,std_error,bound_ratio"]
    for row in rows:
        out.append(",".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- X set

@dataclass
class XRegion:
    """Union of planar discs (slices of dilated tubes) clipped to the ball slice."""
    centers: np.ndarray
    radius: float
    clip_center: np.ndarray
    clip_radius: np.ndarray
    origin: np.ndarray
    res: float
    mask: np.ndarray

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.res ** self.centers.shape[1] if self.mask.size else 0.0

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        if len(self.centers) == 0:
            return np.zeros(len(pts), bool)
        tree = cKDTree(self.centers)
        out = np.zeros(len(pts), bool)
        for i, nb in enumerate(tree.query_ball_point(pts, self.radius)):
            for j in nb:
                if np.linalg.norm(pts[i] - self.clip_center[j]) <= self.clip_radius[j]:
                    out[i] = True
                    break
        return out


def build_X_set(tubes: TubeSet | None, scale: float = 10.0, height: float = 0.0,
                resolution: float | None = None):
    """``X = (union of scale*T) cap {x_n = height}`` and its area by grid counting.

    The tube ``T`` is the horizontal ``R^{1/2+delta}``-neighbourhood of its
    core inside ``B_R(x0)``, so each slice is a disc about the core crossing
    point clipped to the slice of the ball.  The grid resolution defaults to
    ``R^{1/2+delta} / 8``.
    """
    if tubes is None or len(tubes) == 0:
        z = np.zeros((0, 2))
        return XRegion(z, 0.0, z, np.zeros(0), np.zeros(2), 1.0, np.zeros((0, 0), bool)), 0.0
    d = tubes.x0.size - 1
    rad = scale * tubes.width
    res = tubes.width / 8.0 if resolution is None else float(resolution)
    x0 = tubes.x0
    c = x0[:-1] - (height - x0[-1]) * tubes.grad - tubes.v
    crad2 = tubes.r ** 2 - (height - x0[-1]) ** 2
    if crad2 <= 0:
        z = np.zeros((0, d))
        return XRegion(z, rad, z, np.zeros(0), np.zeros(d), res, np.zeros((0,) * d, bool)), 0.0
    crad = np.sqrt(crad2)
    keep = np.linalg.norm(c - x0[:-1], axis=1) <= crad + rad
    c = c[keep]
    cc = np.repeat(x0[None, :-1], len(c), 0)
    cr = np.full(len(c), crad)
    if len(c) == 0:
        return XRegion(c, rad, cc, cr, np.zeros(d), res, np.zeros((0,) * d, bool)), 0.0
    lo = np.maximum(c.min(0) - rad, x0[:-1] - crad)
    hi = np.minimum(c.max(0) + rad, x0[:-1] + crad)
    axes = [lo[j] + res * (np.arange(int(np.ceil((hi[j] - lo[j]) / res))) + 0.5) for j in range(d)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    inball = np.linalg.norm(G - x0[:-1], axis=1) <= crad
    mask = np.zeros(len(G), bool)
    tree = cKDTree(G[inball])
    hit = np.zeros(int(inball.sum()), bool)
    for nb in tree.query_ball_point(c, rad):
        hit[nb] = True
    mask[np.nonzero(inball)[0][hit]] = True
    mask = mask.reshape([a.size for a in axes])
    region = XRegion(c, rad, cc, cr, lo, res, mask)
    return region, region.area


def fhat_sup(f: FrequencyField, oversample: int = 4) -> float:
    """``sup |f^|`` on an oversampled periodic grid, ``f^(x) = sum f(xi) e(x.xi) h^d``."""
    M = int(oversample * max(f.shape))
    return float(np.abs(slice_transform(f, None, 0.0, M)).max())


def l2_tube_bound_check(f: FrequencyField, packets: WavePacketSet, keys,
                        area: float | None = None, oversample: int = 4):
    """``(||f#||_2^2, 10 |X| ||f^||_inf^2)`` where ``f#`` sums the packets in ``keys``.

    ``|X|`` is the area of the slice of the 10-fold dilated tubes; it is
    computed with ``build_X_set`` when not supplied.
    """
    keys = list(keys)
    if area is None:
        area = build_X_set(packets.tubes(keys) if keys else None)[1]
    if keys:
        fs = packets.sum_packets(keys, like=f)
        lhs = float(np.sum(np.abs(fs.values) ** 2) * fs.h ** fs.d)
    else:
        lhs = 0.0
    sup = fhat_sup(f, oversample)
    return lhs, 10.0 * area * sup ** 2


# ---------------------------------------------------------------- grains

@dataclass
class Grain:
    """Pair ``(S, B_r(y))``."""
    S: Variety
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.radius = float(self.radius)

    @property
    def codim(self) -> int:
        return self.S.codim


@dataclass
class Multigrain:
    """Nested grains ``G_0, .., G_m`` with ``codim S_i = i`` and decreasing scales."""
    grains: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.grains) - 1

    @property
    def scales(self):
        return [g.radius for g in self.grains]

    def validate(self, samples: int = 64, tol: float = 1e-6, seed: int = 0) -> None:
        """Raise ``PredicateError`` when the declared structure fails (sampled containment)."""
        for i, g in enumerate(self.grains):
            if g.codim != i:
                raise PredicateError(f"grain {i} has codim {g.codim}")
        for i in range(1, len(self.grains)):
            a, b = self.grains[i - 1], self.grains[i]
            if not b.radius < a.radius:
                raise PredicateError("scales must strictly decrease")
            if np.linalg.norm(b.center - a.center) + b.radius > a.radius * (1 + 1e-12):
                raise PredicateError(f"ball {i} not inside ball {i - 1}")
            pts = b.S.sample(b.center, b.radius, samples, seed + i)
            if len(pts) and np.max(a.S.distance(pts)) > tol * (1 + b.radius):
                raise PredicateError(f"S_{i} not contained in S_{i - 1}")


def _tube_core(T: Tube):
    p0, p1 = T.segment()
    return p0[0], p1[0]


def _point_seg_dist(X, A, B):
    d = B - A
    L2 = float(d @ d)
    s = np.clip(((X - A) @ d) / L2, 0, 1) if L2 > 0 else np.zeros(len(X))
    return np.linalg.norm(X - (A + s[:, None] * d), axis=1)


def tube_samples(T: Tube, count: int = 200) -> np.ndarray:
    """Axis and boundary points of ``T``: half on the core, half on the surface."""
    A, B = _tube_core(T)
    na = count // 2
    nb = count - na
    s = np.linspace(0, 1, na)
    axis = A + s[:, None] * (B - A)
    u, b1, b2 = _perp_frames(np.atleast_2d(T.direction))
    sb = (np.arange(nb) + 0.5) / nb
    ang = 2 * np.pi * np.arange(nb) * 0.6180339887498949
    # horizontal offsets keep the points inside the horizontally measured tube
    off = np.cos(ang)[:, None] * b1 + np.sin(ang)[:, None] * b2
    off[:, -1] = 0.0
    off /= np.linalg.norm(off, axis=1, keepdims=True)
    bnd = A + sb[:, None] * (B - A) + T.width * off
    return np.vstack([axis, bnd])


def nested_tube_check(mg: Multigrain, T: Tube, witnesses, delta_vec, const: float = NESTED_CONST,
                      samples: int = 200, details: bool = False):
    """Nested tube hypothesis for ``T`` (level 0) and ``witnesses[j-1]`` at level ``j``.

    For ``0 <= i <= j <= m``: cap centres within ``const r_j^{-1/2}``; every
    core point of ``T_j`` within ``const r_i^{1/2+delta_i}`` of the core of
    ``T_i``; and ``samples`` points of ``T_j`` within
    ``const r_j^{1/2+delta_j}`` of ``S_j``.
    """
    m = mg.m
    witnesses = list(witnesses)
    if len(witnesses) != m or any(wt is None for wt in witnesses):
        raise PredicateError(f"need {m} witness tubes, got {len(witnesses)}")
    delta_vec = list(delta_vec)
    if len(delta_vec) < m + 1:
        raise PredicateError("delta_vec must have one entry per level")
    tubes = [T] + witnesses
    r = mg.scales
    fails = []
    cores = [_tube_core(t) for t in tubes]
    for j in range(m + 1):
        pts = tube_samples(tubes[j], samples)
        nbhd = const * r[j] ** (0.5 + delta_vec[j])
        if mg.grains[j].S.codim > 0 and np.max(mg.grains[j].S.distance(pts)) > nbhd:
            fails.append(("neighbourhood", j, j))
        Aj, Bj = cores[j]
        core_pts = Aj + np.linspace(0, 1, 33)[:, None] * (Bj - Aj)
        for i in range(j):
            cap = np.linalg.norm(np.subtract(tubes[i].cap.center, tubes[j].cap.center))
            if cap > const * r[j] ** -0.5:
                fails.append(("direction", i, j))
            dist = np.max(_point_seg_dist(core_pts, *cores[i]))
            if dist > const * r[i] ** (0.5 + delta_vec[i]):
                fails.append(("position", i, j))
    ok = not fails
    return (ok, fails) if details else ok
