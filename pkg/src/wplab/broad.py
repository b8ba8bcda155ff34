"""Cap decompositions, broad functions, bilinear term and bad-line machinery.

Caps are the squares of side ``2/K`` tiling ``[-1, 1]^2`` (``K^2`` caps, dyadic
when ``K`` is a power of two).  A lattice node belongs to the cap containing
it, half-open on the right except at ``+1``, so the caps split ``f`` exactly.

Two-variable polynomials of degree ``<= d`` are stored as dicts
``{(i, j): c}`` meaning ``c * xi1**(i-j) * xi2**j`` (total degree ``i``).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .extension import extend_points, slice_transform
from .fields import FrequencyField, ParameterError, SurfaceSpec, make_rng, polynomial_surface


class FormError(ValueError):
    """Polynomial is not of the expected normal form."""


class ConsistencyError(RuntimeError):
    """An internal consistency assertion failed."""


# ---------------------------------------------------------------- caps

@dataclass
class CapGrid:
    """``K x K`` squares of side ``2/K`` covering ``[-1, 1]^2``.

    ``region`` optionally restricts to caps whose centre lies in a box
    ``[(lo, hi), (lo, hi)]``.
    """
    K: int
    d: int = 2
    region: list | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError("K must be positive")
        self.side = 2.0 / self.K
        idx = list(itertools.product(range(self.K), repeat=self.d))
        cen = -1.0 + self.side * (np.array(idx, float) + 0.5)
        if self.region is not None:
            keep = np.all([(cen[:, k] >= lo) & (cen[:, k] <= hi)
                           for k, (lo, hi) in enumerate(self.region)], axis=0)
            idx = [i for i, ok in zip(idx, keep) if ok]
            cen = cen[keep]
        self.index = np.array(idx, int).reshape(-1, self.d)
        self.centers = cen.reshape(-1, self.d)

    def __len__(self):
        return len(self.index)

    def box(self, i):
        lo = -1.0 + self.side * self.index[i]
        return [(float(a), float(a + self.side)) for a in lo]

    def cell_of(self, xi) -> np.ndarray:
        """Multi-index of the cap containing each point ``(..., d)``."""
        k = np.floor((np.asarray(xi, float) + 1.0) / self.side).astype(int)
        return np.clip(k, 0, self.K - 1)

    def label_of(self, xi) -> np.ndarray:
        """Position in ``self.index`` of the cap containing each point (-1 if excluded)."""
        k = self.cell_of(xi)
        flat = np.ravel_multi_index(np.moveaxis(k, -1, 0), (self.K,) * self.d)
        lut = -np.ones(self.K ** self.d, int)
        lut[np.ravel_multi_index(self.index.T, (self.K,) * self.d)] = np.arange(len(self))
        return lut[flat]

    def adjacency(self) -> np.ndarray:
        """``A[i, j]`` true iff the closed caps intersect (diagonal contact included)."""
        diff = np.abs(self.index[:, None, :] - self.index[None, :, :])
        return np.all(diff <= 1, axis=-1)

    def split(self, f: FrequencyField) -> list:
        """``f_tau = f 1_tau`` for every cap, on the lattice of ``f``."""
        lab = self.label_of(f.nodes())
        return [f.copy(np.where(lab == i, f.values, 0)) for i in range(len(self))]


def cap_extensions(f: FrequencyField, surface: SurfaceSpec, K: int, points, check=True) -> np.ndarray:
    """``Ef_tau`` at ``points`` for every cap: array ``(K^2, npts)``."""
    pts = np.asarray(points, float).reshape(-1, f.d + 1)
    return np.array([extend_points(ft, surface, pts, check=check) for ft in CapGrid(K, f.d).split(f)])


def cap_extensions_grid(f: FrequencyField, surface: SurfaceSpec, K: int, times, M: int) -> np.ndarray:
    """``Ef_tau`` on the periodic grid ``q/(M h)`` x ``times``: ``(K^2, M, .., M, nt)``."""
    times = np.atleast_1d(np.asarray(times, float))
    out = []
    for ft in CapGrid(K, f.d).split(f):
        out.append(np.stack([slice_transform(ft, surface, t, M) for t in times], -1))
    return np.array(out)


# ---------------------------------------------------------------- broad function

def broad_from_caps(E_caps, alpha: float):
    """``(Br_alpha Ef, Ef)`` from per-cap values; ``Ef`` is the sum over caps."""
    E_caps = np.asarray(E_caps)
    Ef = np.sum(E_caps, axis=0)
    mask = np.max(np.abs(E_caps), axis=0, initial=0.0) <= alpha * np.abs(Ef)
    return np.where(mask, Ef, 0), Ef


def broad_function(f: FrequencyField, surface: SurfaceSpec, alpha: float, K: int, points) -> np.ndarray:
    """``Br_alpha Ef`` at ``points``: ``Ef`` where ``max_tau |Ef_tau| <= alpha |Ef|``, else 0."""
    if not 0 < alpha < 1:
        raise ParameterError("broadness threshold must lie in (0, 1)")
    pts = np.asarray(points, float)
    E = cap_extensions(f, surface, K, pts)
    return broad_from_caps(E, alpha)[0].reshape(pts.shape[:-1])


def broad_narrow_check(f: FrequencyField, surface: SurfaceSpec, alpha: float, K: int, points) -> float:
    """``max_x |Ef| - |Br_alpha Ef| - alpha^{-1} max_tau |Ef_tau|`` (never positive up to rounding)."""
    if not 0 < alpha < 1:
        raise ParameterError("broadness threshold must lie in (0, 1)")
    E = cap_extensions(f, surface, K, points)
    if E.size == 0:
        return 0.0
    br, Ef = broad_from_caps(E, alpha)
    gap = np.abs(Ef) - np.abs(br) - np.max(np.abs(E), axis=0) / alpha
    return float(np.max(gap))


def bilinear_from_caps(E_caps, nonadjacent) -> np.ndarray:
    """``sum`` over ordered non-adjacent pairs of ``|E_tau|^{1/2} |E_tau'|^{1/2}``."""
    A = np.sqrt(np.abs(np.asarray(E_caps)))
    return np.einsum("ip,ij,jp->p", A, np.asarray(nonadjacent, float), A)


def bilinear_term(f: FrequencyField, surface: SurfaceSpec, K: int, points, nonadjacent=None) -> np.ndarray:
    """``Bil(Ef)`` at ``points``; each unordered pair is counted twice.

    ``nonadjacent`` is an optional boolean matrix over caps; default is the
    complement of closure contact.
    """
    if K < 4:
        raise ParameterError("bilinear term needs K >= 4")
    grid = CapGrid(K, f.d)
    N = ~grid.adjacency() if nonadjacent is None else np.asarray(nonadjacent, bool)
    pts = np.asarray(points, float)
    E = cap_extensions(f, surface, K, pts)
    return bilinear_from_caps(E, N).reshape(pts.shape[:-1])


# ---------------------------------------------------------------- wall check

def _subsets(ncaps, K, n_sample, seed):
    if K <= 4:
        m = np.arange(2 ** ncaps, dtype=np.int64)[1:]
        regime = "exhaustive"
    else:
        rng = make_rng(seed, 31)
        m = None
        regime = f"sampled-{n_sample}"
        B = rng.random((n_sample, ncaps)) < 0.5
        B[np.arange(n_sample), rng.integers(0, ncaps, n_sample)] = True
        return B, regime
    B = ((m[:, None] >> np.arange(ncaps)) & 1).astype(bool)
    return B, regime


def wall_broad_terms(E_full, E_plus, E_minus, alpha: float, K: int, n_sample: int = 256,
                     seed: int = 0, chunk: int = 4096):
    """Pointwise terms of the wall inequality.

    Returns ``(lhs, sum_I, bil, regime)`` where ``lhs = Br_alpha |Ef|``,
    ``sum_I = sum_I Br_{2 alpha} Ef_{I,k,+}`` over the subset family and
    ``bil = Bil(Ef_{k,-})``.
    """
    E_full, E_plus, E_minus = (np.asarray(a) for a in (E_full, E_plus, E_minus))
    ncaps, npts = E_plus.shape
    br, _ = broad_from_caps(E_full, alpha)
    lhs = np.abs(br)
    grid = CapGrid(K)
    bil = bilinear_from_caps(E_minus, ~grid.adjacency()) if ncaps > 1 else np.zeros(npts)
    B, regime = _subsets(ncaps, K, n_sample, seed)
    absP = np.abs(E_plus)
    tot = np.zeros(npts)
    for s in range(0, len(B), chunk):
        b = B[s:s + chunk]
        S = np.abs(b.astype(float) @ E_plus)
        mx = np.max(np.where(b[:, :, None], absP[None], 0.0), axis=1)
        tot += np.sum(np.where(mx <= 2 * alpha * S, S, 0.0), axis=0)
    return lhs, tot, bil, regime


def wall_broad_check(E_full, E_plus, E_minus, alpha: float, K: int, n_sample: int = 256, seed: int = 0):
    """``max_x Br_alpha|Ef| - 2 (sum_I Br_{2 alpha} Ef_{I,k,+} + K^100 Bil(Ef_{k,-}))``.

    Inputs are per-cap values at sampled wall points, shape ``(K^2, npts)``.
    Returns ``(value, regime)``; ``regime`` says whether subsets were enumerated.
    """
    lhs, tot, bil, regime = wall_broad_terms(E_full, E_plus, E_minus, alpha, K, n_sample, seed)
    if lhs.size == 0:
        return 0.0, regime
    with np.errstate(over="ignore"):
        rhs = 2.0 * (tot + float(K) ** 100 * bil)
    return float(np.max(lhs - rhs)), regime


# ---------------------------------------------------------------- normal form

def _check_poly(coeffs: dict, d: int):
    for (i, j) in coeffs:
        if not (0 <= j <= i):
            raise FormError(f"bad monomial index {(i, j)}")
        if i > d and coeffs[(i, j)] != 0:
            raise FormError(f"monomial {(i, j)} exceeds degree {d}")


def normal_form_check(coeffs: dict, eps0: float, d: int) -> bool:
    """``|a20| + |a22| + 100^d sum_{i>=3} |a_ij| <= eps0`` for ``h = xi1 xi2 + ...``."""
    _check_poly(coeffs, d)
    c = {k: float(v) for k, v in coeffs.items() if v != 0}
    if c.get((2, 1), 0.0) != 1.0:
        raise FormError("coefficient of xi1*xi2 must be 1")
    if any(i < 2 for (i, _) in c):
        raise FormError("normal form has no terms of degree below 2")
    s = abs(c.get((2, 0), 0.0)) + abs(c.get((2, 2), 0.0))
    s += 100.0 ** d * sum(abs(v) for (i, _), v in c.items() if i >= 3)
    return bool(s <= eps0)


def _to_array(coeffs: dict, d: int) -> np.ndarray:
    A = np.zeros((d + 1, d + 1))
    for (i, j), v in coeffs.items():
        A[i - j, j] += v
    return A


def _polymul(A, B):
    out = np.zeros((A.shape[0] + B.shape[0] - 1, A.shape[1] + B.shape[1] - 1))
    for (a, b), v in np.ndenumerate(A):
        if v != 0:
            out[a:a + B.shape[0], b:b + B.shape[1]] += v * B
    return out


def compose_affine(coeffs: dict, d: int, lin, shift) -> dict:
    """Coefficients of ``h(lin @ eta + shift)`` in the ``(i, j)`` convention."""
    A = _to_array(coeffs, d)
    lin = np.asarray(lin, float)
    # xi_k as a polynomial in eta: shift_k + lin[k, 0] eta1 + lin[k, 1] eta2
    X = []
    for k in range(2):
        P = np.zeros((2, 2))
        P[0, 0], P[1, 0], P[0, 1] = shift[k], lin[k, 0], lin[k, 1]
        X.append(P)
    pw = [[np.ones((1, 1))], [np.ones((1, 1))]]
    for k in range(2):
        for _ in range(d):
            pw[k].append(_polymul(pw[k][-1], X[k]))
    out = np.zeros((d + 1, d + 1))
    for (a, b), v in np.ndenumerate(A):
        if v != 0 and a + b <= d:
            T = _polymul(pw[0][a], pw[1][b])
            out[:T.shape[0], :T.shape[1]] += v * T[:d + 1, :d + 1]
    return {(a + b, b): float(out[a, b]) for a in range(d + 1) for b in range(d + 1) if a + b <= d}


def normal_form_surface(coeffs: dict) -> SurfaceSpec:
    """SurfaceSpec of a polynomial given in the ``(i, j)`` convention."""
    return polynomial_surface({(i - j, j): v for (i, j), v in coeffs.items()})


# ---------------------------------------------------------------- bad lines

@dataclass
class Strip:
    iota: int
    a: float
    v: tuple


@dataclass
class BadStripFamily:
    """Bad strips ``L_{iota,a,v}``: ``c1``-neighbourhoods of bad lines."""
    d: int = 3
    eps0: float = 1e-3
    K_L: float = 2.0 ** 7
    c1: float | None = None
    strips: list = field(default_factory=list)

    def __post_init__(self):
        if self.c1 is None:
            self.c1 = 10.0 ** (-10 * self.d) * self.eps0 / self.K_L
        self.M = 10.0 ** (20 * self.d) / self.eps0

    @property
    def threshold(self) -> float:
        return 10.0 ** (-5 * self.d) * self.eps0 / self.K_L

    def contains(self, pts) -> np.ndarray:
        """Membership matrix ``(n_strips, npts)`` of planar points."""
        pts = np.asarray(pts, float).reshape(-1, 2)
        out = np.zeros((len(self.strips), len(pts)), bool)
        for k, s in enumerate(self.strips):
            p = np.array([0.0, s.a]) if s.iota == 1 else np.array([s.a, 0.0])
            v = np.asarray(s.v, float)
            rel = pts - p
            out[k] = np.abs(rel[:, 0] * v[1] - rel[:, 1] * v[0]) <= self.c1
        return out


def line_transform(iota: int, a: float, v):
    """Inverse map ``M_l^{-1}`` as ``(lin, shift)`` with ``xi = lin @ eta + shift``.

    ``iota = 1``: line through ``(0, a)``, ``v`` rotated to ``(1, 0)``.
    ``iota = 2``: line through ``(a, 0)``, ``v`` rotated to ``(0, 1)``.
    """
    v = np.asarray(v, float)
    v = v / np.linalg.norm(v)
    if iota == 1:
        lin = np.array([[v[0], -v[1]], [v[1], v[0]]])
        shift = np.array([0.0, a])
    elif iota == 2:
        lin = np.array([[v[1], v[0]], [-v[0], v[1]]])
        shift = np.array([a, 0.0])
    else:
        raise ParameterError("iota must be 1 or 2")
    return lin, shift


def is_bad_line(coeffs: dict, iota: int, a: float, v, family: BadStripFamily):
    """Bad-line test.  Returns ``(bad, c)`` with ``c[(i, j)]`` the transformed table.

    For ``iota = 2`` the table is written with the roles of the variables
    exchanged, so the test always reads the pure powers ``c[(i, 0)]``.
    """
    d = family.d
    _check_poly(coeffs, d)
    lin, shift = line_transform(iota, a, v)
    c = compose_affine(coeffs, d, lin, shift)
    if iota == 2:
        c = {(i, j): c[(i, i - j)] for (i, j) in c}
    bad = max((abs(c[(i, 0)]) for i in range(2, d + 1)), default=0.0) <= family.threshold
    if bad and abs(c[(2, 1)]) < 0.01:
        raise ConsistencyError(f"|c21| = {abs(c[(2, 1)]):.3g} < 1/100 on a bad line")
    return bool(bad), c


def line_lattice(family: BadStripFamily, max_lines: int = 200_000):
    """All lattice lines ``(iota, a, v)``; ``v`` runs over a maximal ``c1``-separated
    half circle, ``a`` over ``c1 Z`` in ``[-10, 10]``."""
    c1 = family.c1
    m = int(np.floor(np.pi / np.arcsin(min(1.0, c1 / 2.0))))
    na = 2 * int(np.floor(10.0 / c1)) + 1
    if (m // 2 + 1) * na > max_lines:
        raise ParameterError(f"line lattice too large ({m // 2 + 1} x {na}); raise c1")
    th = np.arange(m) * (2 * np.pi / m)
    th = th[(th >= -np.pi / 2) & (th < np.pi / 2) | (th >= 3 * np.pi / 2)]
    th = np.where(th >= 3 * np.pi / 2, th - 2 * np.pi, th)
    avals = c1 * np.arange(-(na // 2), na // 2 + 1)
    out = []
    for t in np.sort(th):
        v = (float(np.cos(t)), float(np.sin(t)))
        iota = 1 if abs(v[1]) <= abs(v[0]) else 2
        out.extend((iota, float(a), v) for a in avals)
    return out


def build_bad_strips(coeffs: dict, family: BadStripFamily, max_lines: int = 200_000) -> BadStripFamily:
    """Fill ``family.strips`` with every bad lattice line of ``h``."""
    family.strips = [Strip(i, a, v) for i, a, v in line_lattice(family, max_lines)
                     if is_bad_line(coeffs, i, a, v, family)[0]]
    return family


def bad_line_csv(coeffs: dict, family: BadStripFamily, lines) -> str:
    """CSV table ``iota,a,v1,v2,bad,c_20..c_d0``."""
    d = family.d
    head = "iota,a,v1,v2,bad," + ",".join(f"c_{i}0" for i in range(2, d + 1))
    rows = [head]
    for iota, a, v in lines:
        bad, c = is_bad_line(coeffs, iota, a, v, family)
        vals = ",".join(repr(c[(i, 0)]) for i in range(2, d + 1))
        rows.append(f"{iota},{a!r},{v[0]!r},{v[1]!r},{int(bad)},{vals}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- multi-scale broad

def strip_tuple_max(E_caps, members, S, M: float, search_budget: int = 8, seed: int = 0,
                    exhaustive: bool | None = None):
    """``max`` over tuples of at most ``M`` strips of ``|sum_{tau in members & cap strips} E_tau|``.

    ``members`` (ncaps,) bool restricts the caps (the region ``upsilon``),
    ``S`` (nstrips, ncaps) says which cap centres lie in each strip.
    Returns ``(value, upper)``: the exhaustive or greedy maximum per point and
    the upper bound ``max_L sum_{tau in L} |E_tau|``.
    """
    E = np.asarray(E_caps)
    S = np.asarray(S, bool) & np.asarray(members, bool)[None]
    ns, npts = len(S), E.shape[1]
    if ns == 0:
        z = np.zeros(npts)
        return z, z
    absE = np.abs(E)
    upper = np.max(S.astype(float) @ absE, axis=0)
    kmax = int(min(M, ns))
    if exhaustive is None:
        exhaustive = ns <= 8
    best = np.zeros(npts)
    if exhaustive:
        for k in range(1, kmax + 1):
            for comb in itertools.combinations(range(ns), k):
                m = np.all(S[list(comb)], axis=0)
                best = np.maximum(best, np.abs(m.astype(float) @ E))
        return best, upper
    rng = make_rng(seed, 47)
    if search_budget >= ns:
        starts = range(ns)
    else:
        starts = np.sort(rng.choice(ns, max(search_budget, 1), replace=False))
    for s0 in starts:
        cur = np.broadcast_to(S[s0], (npts, S.shape[1])).copy()
        val = np.abs(np.einsum("pc,cp->p", cur.astype(float), E))
        best = np.maximum(best, val)
        for _ in range(kmax - 1):
            cand = cur[None, :, :] & S[:, None, :]
            vals = np.abs(np.einsum("spc,cp->sp", cand.astype(float), E))
            k = np.argmax(vals, axis=0)
            nv = vals[k, np.arange(npts)]
            upd = nv > val
            if not upd.any():
                break
            cur[upd] = cand[k[upd], np.nonzero(upd)[0]]
            val = np.where(upd, nv, val)
            best = np.maximum(best, val)
    return best, upper


def multiscale_broad(f: FrequencyField, surface: SurfaceSpec, alpha_vec, K_vec, family: BadStripFamily,
                     points, search_budget: int = 8, seed: int = 0, M: float | None = None,
                     exhaustive: bool | None = None, details: bool = False):
    """Multi-scale broad restriction ``|Ef|`` at broad points, 0 elsewhere.

    Caps are taken at the finest scale ``K_vec[0]``; a cap belongs to a strip
    or region iff its centre does.  With the exhaustive strip search the
    predicate is exact; otherwise a point is declared broad only when the
    upper bound ``max_L sum |Ef_tau|`` already satisfies every condition, so
    the result never overstates the broad set.
    """
    alpha_vec = np.asarray(alpha_vec, float)
    K_vec = [int(k) for k in K_vec]
    if len(alpha_vec) != len(K_vec):
        raise ParameterError("alpha_vec and K_vec must have equal length")
    if np.any((alpha_vec <= 0) | (alpha_vec >= 1)):
        raise ParameterError("broadness thresholds must lie in (0, 1)")
    K0 = K_vec[0]
    if any(K0 % k for k in K_vec):
        raise ParameterError("K_vec must be dyadic divisors of K_vec[0]")
    pts = np.asarray(points, float)
    E = cap_extensions(f, surface, K0, pts)
    Ef = np.sum(E, axis=0)
    aEf = np.abs(Ef)
    if not family.strips:
        br, _ = broad_from_caps(E, alpha_vec[0])
        out = np.abs(br)
        return (out, {"undecided": 0, "mode": "fallback"}) if details else out
    M = family.M if M is None else M
    grid = CapGrid(K0)
    S = family.contains(grid.centers)
    allc = np.ones(len(grid), bool)
    exact = exhaustive if exhaustive is not None else len(family.strips) <= 8
    G, U = strip_tuple_max(E, allc, S, M, search_budget, seed, exact)
    ok_lo = (U if not exact else G) <= alpha_vec[-1] * aEf
    ok_hi = G <= alpha_vec[-1] * aEf
    for j, Kj in enumerate(K_vec):
        ratio = K0 // Kj
        parent = grid.index // ratio
        pid = parent[:, 0] * Kj + parent[:, 1]
        coarse = np.zeros((Kj * Kj, E.shape[1]), complex)
        np.add.at(coarse, pid, E)
        mcap = np.max(np.abs(coarse), axis=0)
        gj = np.zeros_like(aEf)
        uj = np.zeros_like(aEf)
        for u in range(Kj * Kj):
            g, up = strip_tuple_max(E, pid == u, S, M, search_budget, seed + u, exact)
            gj = np.maximum(gj, g)
            uj = np.maximum(uj, up)
        ok_lo &= mcap + (uj if not exact else gj) <= alpha_vec[j] * aEf
        ok_hi &= mcap + gj <= alpha_vec[j] * aEf
    out = np.where(ok_lo, aEf, 0.0).reshape(pts.shape[:-1])
    if details:
        return out, {"undecided": int(np.sum(ok_hi & ~ok_lo)), "mode": "exhaustive" if exact else "greedy"}
    return out
