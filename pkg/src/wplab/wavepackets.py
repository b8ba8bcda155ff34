"""Wave packet decomposition at scale r.

Frequency caps are balls of radius ``r^{-1/2}`` centred on the lattice
``r^{-1/2} Z^d``; spatial translates sit on a lattice of spacing close to
``r^{(1+delta)/2}`` on the period-``1/h`` torus dual to the sampling lattice.
Both partitions of unity are normalised C^infinity bumps, so summing every
packet returns ``f`` exactly; the only loss comes from dropping negligible
packets and clipping ``|v| <= truncation_radius``.

A packet is ``f_{theta,v} = psi~_theta * IDFT(eta_v * DFT(psi_theta f))`` computed
on a zero-padded window around the cap.  It is stored as the handful of
nonzero dual-grid coefficients of ``eta_v * DFT(psi_theta f)``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .fields import FrequencyField, ParameterError, SurfaceSpec, dump_bytes, e, load_bytes

TUBE_ORDER_CONST = 4.0


def bump(t):
    """C^infinity radial profile ``exp(-1/(1 - t^2))`` on ``|t| < 1``."""
    t = np.asarray(t, float)
    out = np.zeros_like(t)
    m = np.abs(t) < 1
    out[m] = np.exp(-1.0 / (1.0 - t[m] ** 2))
    return out


def smooth_step(u):
    """C^infinity step: 0 for u <= 0, 1 for u >= 1."""
    u = np.asarray(u, float)

    def f(s):
        return np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    a, b = f(u), f(1.0 - u)
    return a / (a + b)


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class Cap:
    center: tuple
    radius: float
    index: tuple

    def dist(self, other: "Cap") -> float:
        """Distance between the two closed balls."""
        c = np.linalg.norm(np.subtract(self.center, other.center))
        return max(0.0, c - self.radius - other.radius)


def cap_spacing(r: float, h: float | None = None) -> float:
    """Cap lattice spacing: ``r^{-1/2}``, snapped to a multiple of ``h`` if given."""
    rho = r ** -0.5
    if h is None:
        return rho
    return h * max(1, int(round(rho / h)))


def cap_cover(r: float, d: int = 2, box: float = 1.0, h: float | None = None) -> list:
    """Caps of radius ``r^{-1/2}`` centred on a lattice of spacing ``cap_spacing``
    meeting ``[-box, box]^d``.  Each point lies in at most ``2^d`` caps."""
    rho = r ** -0.5
    s = cap_spacing(r, h)
    m = int(np.ceil((box + rho) / s - 1e-12))
    ks = np.arange(-m, m + 1)
    grid = np.stack(np.meshgrid(*([ks] * d), indexing="ij"), -1).reshape(-1, d)
    keep = np.all(np.abs(grid * s) < box + rho - 1e-12, axis=1)
    return [Cap(tuple(float(c) for c in k * s), rho, tuple(int(i) for i in k)) for k in grid[keep]]


@dataclass(frozen=True)
class Tube:
    """``T = {x in B_r(x0): |x' - x0' + (x_n - x0_n) grad h(omega) + v| <= r^{1/2+delta}}``."""
    cap: Cap
    v: tuple
    x0: tuple
    r: float
    delta: float
    grad: tuple

    @property
    def width(self) -> float:
        return self.r ** (0.5 + self.delta)

    @property
    def direction(self) -> np.ndarray:
        u = np.append(-np.asarray(self.grad), 1.0)
        return u / np.linalg.norm(u)

    def axis(self, xn):
        """Tube core ``x'`` at height ``xn``."""
        xn = np.asarray(xn, float)
        x0 = np.asarray(self.x0)
        return x0[:-1] - (xn - x0[-1])[..., None] * np.asarray(self.grad) - np.asarray(self.v)

    def core_distance(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        return np.linalg.norm(pts[..., :-1] - self.axis(pts[..., -1]), axis=-1)

    def contains(self, pts, scale: float = 1.0) -> np.ndarray:
        """Membership in ``scale * T`` (radius scaled, same ball)."""
        pts = np.asarray(pts, float)
        inball = np.linalg.norm(pts - np.asarray(self.x0), axis=-1) <= self.r
        return inball & (self.core_distance(pts) <= scale * self.width)

    def segment(self):
        """Endpoints of the core inside ``B_r(x0)`` (closest point if it misses)."""
        return TubeSet.from_tubes([self]).segments()


class TubeSet:
    """Struct-of-arrays tube family sharing one anchor, scale and delta."""

    def __init__(self, omega, grad, v, x0, r, delta, cap_index=None, caps=None):
        self.omega = np.atleast_2d(np.asarray(omega, float))
        self.grad = np.atleast_2d(np.asarray(grad, float))
        self.v = np.atleast_2d(np.asarray(v, float))
        self.x0 = np.asarray(x0, float)
        self.r = float(r)
        self.delta = float(delta)
        self.cap_index = (np.arange(len(self.omega)) if cap_index is None
                          else np.asarray(cap_index, int))
        self.caps = caps

    def __len__(self):
        return len(self.omega)

    @property
    def width(self):
        return self.r ** (0.5 + self.delta)

    @property
    def cap_radius(self):
        return self.r ** -0.5

    @classmethod
    def from_tubes(cls, tubes):
        tubes = list(tubes)
        if not tubes:
            raise ValueError("empty tube list")
        t0 = tubes[0]
        return cls([t.cap.center for t in tubes], [t.grad for t in tubes], [t.v for t in tubes],
                   t0.x0, t0.r, t0.delta, caps=[t.cap for t in tubes])

    def tube(self, i) -> Tube:
        cap = self.caps[i] if self.caps is not None else Cap(
            tuple(self.omega[i]), self.cap_radius, (int(self.cap_index[i]),))
        return Tube(cap, tuple(self.v[i]), tuple(self.x0), self.r, self.delta, tuple(self.grad[i]))

    def subset(self, mask) -> "TubeSet":
        idx = np.nonzero(mask)[0] if np.asarray(mask).dtype == bool else np.asarray(mask)
        caps = [self.caps[i] for i in idx] if self.caps is not None else None
        return TubeSet(self.omega[idx], self.grad[idx], self.v[idx], self.x0, self.r, self.delta,
                       self.cap_index[idx], caps)

    def segments(self):
        """Core segments inside ``B_r(x0)``: arrays ``(K, d+1)`` for both ends."""
        g, v = self.grad, self.v
        # axis point at parameter s: (-s g - v, s) relative to x0
        a = np.sum(g * g, 1) + 1.0
        b = 2.0 * np.sum(g * v, 1)
        c = np.sum(v * v, 1) - self.r ** 2
        disc = b * b - 4 * a * c
        s_mid = -b / (2 * a)
        half = np.where(disc > 0, np.sqrt(np.maximum(disc, 0)) / (2 * a), 0.0)
        s0, s1 = s_mid - half, s_mid + half

        def pt(s):
            return self.x0 + np.column_stack([-s[:, None] * g - v, s])
        return pt(s0), pt(s1)

    def nonempty(self) -> np.ndarray:
        """Tube meets its ball (core line within ``r + width`` of the anchor)."""
        p0, p1 = self.segments()
        mid = 0.5 * (p0 + p1)
        return np.linalg.norm(mid - self.x0, axis=1) <= self.r + self.width

    def contains(self, pts, scale=1.0) -> np.ndarray:
        """Membership matrix ``(K, npts)``."""
        pts = np.asarray(pts, float).reshape(-1, self.x0.size)
        rel = pts - self.x0
        inball = np.linalg.norm(rel, axis=1) <= self.r
        ax = -rel[None, :, -1:] * self.grad[:, None, :] - self.v[:, None, :]
        dist = np.linalg.norm(rel[None, :, :-1] - ax, axis=2)
        return (dist <= scale * self.width) & inball[None, :]


def tube_lattice(r: float, delta: float, surface: SurfaceSpec, x0=None, d: int = 2,
                 spacing: float | None = None, v_clip: float | None = None) -> TubeSet:
    """All nonempty tubes ``T_{theta,v}(x0)`` of the scale-``r`` cover."""
    x0 = np.zeros(d + 1) if x0 is None else np.asarray(x0, float)
    L = r ** ((1 + delta) / 2) if spacing is None else spacing
    v_clip = 2 * r if v_clip is None else v_clip
    caps = cap_cover(r, d)
    m = int(np.floor(v_clip / L))
    ks = np.arange(-m, m + 1)
    vs = np.stack(np.meshgrid(*([ks] * d), indexing="ij"), -1).reshape(-1, d) * L
    vs = vs[np.linalg.norm(vs, axis=1) <= v_clip]
    om = np.array([c.center for c in caps])
    gr = surface.grad_h(om)
    ci = np.repeat(np.arange(len(caps)), len(vs))
    ts = TubeSet(om[ci], gr[ci], np.tile(vs, (len(caps), 1)), x0, r, delta, ci)
    ts.caps = None
    ts.cap_list = caps
    keep = ts.nonempty()
    out = ts.subset(keep)
    out.cap_list = caps
    return out


def _seg_dist(P0, P1, Q0, Q1):
    """Vectorised distance between segments ``[P0, P1]`` and ``[Q0, Q1]``."""
    d1, d2, rr = P1 - P0, Q1 - Q0, P0 - Q0
    a = np.sum(d1 * d1, -1)
    ee = np.sum(d2 * d2, -1)
    f = np.sum(d2 * rr, -1)
    c = np.sum(d1 * rr, -1)
    b = np.sum(d1 * d2, -1)
    den = a * ee - b * b
    tiny = 1e-12
    s = np.where(den > tiny, np.clip((b * f - c * ee) / np.where(den > tiny, den, 1), 0, 1), 0.0)
    s = np.where(a > tiny, s, 0.0)
    t = np.where(ee > tiny, (b * s + f) / np.where(ee > tiny, ee, 1), 0.0)
    # clamp t and recompute s where needed
    t_cl = np.clip(t, 0, 1)
    s = np.where(t != t_cl, np.where(a > tiny, np.clip((b * t_cl - c) / np.where(a > tiny, a, 1), 0, 1), 0.0), s)
    t = t_cl
    diff = (P0 + s[..., None] * d1) - (Q0 + t[..., None] * d2)
    return np.linalg.norm(diff, axis=-1)


def _cap_dist(om1, rad1, om2, rad2):
    return np.maximum(0.0, np.linalg.norm(om1 - om2, axis=-1) - rad1 - rad2)


def tube_order(T_small: Tube, T_big: Tube, const: float = TUBE_ORDER_CONST) -> bool:
    """``T_small < T_big``: caps within ``const * r'^{-1/2}`` and tubes within
    ``const * r^{1/2+delta}`` (``r'`` small scale, ``r`` big scale)."""
    if T_small.r > T_big.r:
        raise ParameterError("first tube must have the smaller scale")
    if T_small.cap.dist(T_big.cap) > const * T_small.r ** -0.5:
        return False
    p0, p1 = T_small.segment()
    q0, q1 = T_big.segment()
    sd = float(_seg_dist(p0, p1, q0, q1)[0])
    return max(0.0, sd - T_small.width - T_big.width) <= const * T_big.width


def lift_tubes(W, parents: TubeSet, const: float = TUBE_ORDER_CONST) -> np.ndarray:
    """Boolean mask over ``parents`` of tubes ``T`` with ``T' < T`` for some ``T'`` in ``W``."""
    lifted = np.zeros(len(parents), bool)
    if W is None or len(W) == 0 or len(parents) == 0:
        return lifted
    Ws = W if isinstance(W, TubeSet) else TubeSet.from_tubes(W)
    w0, w1 = Ws.segments()
    q0, q1 = parents.segments()
    rho_cap = Ws.cap_radius
    for i in range(len(Ws)):
        todo = np.nonzero(~lifted)[0]
        if len(todo) == 0:
            break
        cd = _cap_dist(Ws.omega[i], rho_cap, parents.omega[todo], parents.cap_radius)
        ok = cd <= const * rho_cap
        if not ok.any():
            continue
        cand = todo[ok]
        sd = _seg_dist(w0[i][None], w1[i][None], q0[cand], q1[cand])
        hit = np.maximum(0.0, sd - Ws.width - parents.width) <= const * parents.width
        lifted[cand[hit]] = True
    return lifted


# ---------------------------------------------------------------- decomposition

@dataclass
class _CapData:
    cap: Cap
    offset: tuple
    psit: np.ndarray          # psi-tilde on the window
    phase: list               # per-axis offset phases


@dataclass
class WavePacketSet:
    """Sparse packet family.  ``coef[key]`` holds ``(flat dual indices, values)``."""
    r: float
    delta: float
    x0: np.ndarray
    h: float
    N: int
    L: float
    d: int
    surface: SurfaceSpec
    truncation_radius: float
    caps: dict = field(default_factory=dict)      # cap index -> _CapData
    coef: dict = field(default_factory=dict)      # (cap index, v index) -> (idx, vals)
    v_of: dict = field(default_factory=dict)      # v index -> v vector
    dropped_bound: float = 0.0
    norm_f: float = 0.0

    def __len__(self):
        return len(self.coef)

    def keys(self):
        return sorted(self.coef)

    def tube(self, key) -> Tube:
        cd = self.caps[key[0]]
        om = np.asarray(cd.cap.center)
        g = self.surface.grad_h(om[None])[0]
        return Tube(cd.cap, tuple(self.v_of[key[1]]), tuple(self.x0), self.r, self.delta, tuple(g))

    def tubes(self, keys=None) -> TubeSet:
        keys = self.keys() if keys is None else list(keys)
        if not keys:
            raise ValueError("no packets")
        om = np.array([self.caps[k[0]].cap.center for k in keys])
        v = np.array([self.v_of[k[1]] for k in keys])
        ts = TubeSet(om, self.surface.grad_h(om), v, self.x0, self.r, self.delta,
                     [hash(k[0]) for k in keys], caps=[self.caps[k[0]].cap for k in keys])
        ts.keys = keys
        return ts

    def _field_from_dual(self, ci, A) -> FrequencyField:
        cd = self.caps[ci]
        A = A.reshape((self.N,) * self.d)
        for k, ph in enumerate(cd.phase):
            shape = [1] * self.d
            shape[k] = self.N
            A = A / ph.reshape(shape)
        vals = cd.psit * sfft.ifftn(A)
        fld = FrequencyField(vals, self.h, cd.offset)
        return _unanchor(fld, self.x0, self.surface)

    def packet(self, key) -> FrequencyField:
        """Materialise ``f_{theta,v}`` on its cap window."""
        idx, vals = self.coef[key]
        A = np.zeros(self.N ** self.d, complex)
        A[idx] = vals
        return self._field_from_dual(key[0], A)

    def packet_norms(self) -> dict:
        """Exact ``||f_{theta,v}||_2`` for every stored packet.

        With ``B = psit * ifft(a)`` the windowed norm is the quadratic form
        ``a^H G a`` where ``G[j, k] = ifft(|psit|^2)[k - j] / N^d``, so one FFT
        per cap replaces one FFT per packet.
        """
        out = {}
        bycap = {}
        for k in self.keys():
            bycap.setdefault(k[0], []).append(k)
        shp = (self.N,) * self.d
        Nd = self.N ** self.d
        for ci, keys in bycap.items():
            cd = self.caps[ci]
            inv = np.ones(shp, complex)
            for k, ph in enumerate(cd.phase):
                shape = [1] * self.d
                shape[k] = self.N
                inv = inv / ph.reshape(shape)
            inv = inv.ravel()
            G = sfft.ifftn(np.abs(cd.psit) ** 2).ravel() / Nd
            for k in keys:
                idx, vals = self.coef[k]
                a = vals * inv[idx]
                mi = np.array(np.unravel_index(idx, shp))
                diff = np.ravel_multi_index(tuple((mi[:, None, :] - mi[:, :, None]) % self.N), shp)
                q = np.real(np.conj(a) @ G[diff] @ a)
                out[k] = float(np.sqrt(max(q, 0.0) * self.h ** self.d))
        return out

    def sum_packets(self, keys=None, like: FrequencyField | None = None) -> FrequencyField:
        """``sum f_{theta,v}`` over ``keys`` (default all) on the lattice of ``like``."""
        keys = self.keys() if keys is None else keys
        bycap = {}
        for k in keys:
            idx, vals = self.coef[k]
            A = bycap.setdefault(k[0], np.zeros(self.N ** self.d, complex))
            A[idx] += vals
        if like is None:
            lo = min((self.caps[c].offset for c in bycap), default=(0,) * self.d)
            hi = max((tuple(o + self.N for o in self.caps[c].offset) for c in bycap),
                     default=(1,) * self.d)
            off = tuple(min(self.caps[c].offset[k] for c in bycap) for k in range(self.d)) if bycap else (0,) * self.d
            shape = tuple(max(self.caps[c].offset[k] + self.N for c in bycap) - off[k]
                          for k in range(self.d)) if bycap else (1,) * self.d
        else:
            off, shape = like.offset, like.shape
        out = np.zeros(shape, complex)
        for ci in sorted(bycap):
            pk = self._field_from_dual(ci, bycap[ci]).embed(off, shape)
            out += pk.values
        return FrequencyField(out, self.h, off)

    # -------------------------------------------------------- serialization
    def to_bytes(self) -> bytes:
        """Index table (cap centre, v, byte offsets) as JSON, then packet dumps."""
        keys = self.keys()
        blobs, table, pos = [], [], 0
        for k in keys:
            b = dump_bytes(self.packet(k))
            table.append({"cap": list(self.caps[k[0]].cap.center), "cap_index": list(k[0]),
                          "v": list(map(float, self.v_of[k[1]])), "v_index": list(k[1]),
                          "offset": pos, "length": len(b)})
            blobs.append(b)
            pos += len(b)
        head = json.dumps({"format": "wplab-packets", "version": 1, "r": self.r,
                           "delta": self.delta, "x0": list(map(float, self.x0)), "h": self.h,
                           "packets": table}, sort_keys=True).encode()
        return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def load_packets(buf: bytes):
    """Read ``WavePacketSet.to_bytes`` output: (metadata dict, {key: FrequencyField})."""
    (n,) = struct.unpack("<Q", buf[:8])
    meta = json.loads(buf[8:8 + n].decode())
    base = 8 + n
    out = {}
    for row in meta["packets"]:
        a = base + row["offset"]
        out[(tuple(row["cap_index"]), tuple(row["v_index"]))] = load_bytes(buf[a:a + row["length"]])
    return meta, out


def _phi(x0, nodes, surface):
    return nodes @ x0[:-1] + x0[-1] * surface.h(nodes)


def _anchor(f: FrequencyField, x0, surface):
    if not np.any(x0):
        return f
    return f.copy(f.values * e(_phi(x0, f.nodes(), surface)))


def _unanchor(f: FrequencyField, x0, surface):
    if not np.any(x0):
        return f
    return f.copy(f.values * e(-_phi(x0, f.nodes(), surface)))


def _eta_table(N, d, P, L, v_clip):
    """Normalised bumps ``eta_v`` on the dual torus grid ``q P / N``.

    Returns ``(vkeys, starts, q, w)``: lattice indices of every ``v`` with
    ``|v| <= v_clip`` and, grouped by ``v``, the dual indices and weights.
    """
    y = sfft.fftfreq(N, 1.0 / N) * (P / N)
    m = int(round(P / L))
    Y = np.stack(np.meshgrid(*([y] * d), indexing="ij"), -1).reshape(-1, d)
    kk = np.floor(Y / L + 0.5).astype(np.int64)  # nearest lattice point
    offs = np.stack(np.meshgrid(*([np.arange(-1, 2)] * d), indexing="ij"), -1).reshape(-1, d)
    den = np.zeros(len(Y))
    ws, ks, qs = [], [], []
    for o in offs:
        kv = kk + o
        w = bump(np.linalg.norm(Y - kv * L, axis=1) / L)
        den += w
        nz = np.nonzero(w > 0)[0]
        ws.append(w[nz])
        ks.append((kv[nz] + m // 2) % m - m // 2)  # torus representative
        qs.append(nz)
    q = np.concatenate(qs)
    w = np.concatenate(ws) / den[q]
    k = np.concatenate(ks)
    code = np.zeros(len(q), np.int64)
    for ax in range(d):
        code = code * (m + 1) + (k[:, ax] + m // 2)
    order = np.lexsort((q, code))
    q, w, k, code = q[order], w[order], k[order], code[order]
    # repeated (v, q) pairs come from images of the same v; merge them
    dup = np.zeros(len(q), bool)
    dup[1:] = (code[1:] == code[:-1]) & (q[1:] == q[:-1])
    if dup.any():
        grp = np.cumsum(~dup) - 1
        w = np.bincount(grp, weights=w)
        keep = ~dup
        q, k, code = q[keep], k[keep], code[keep]
    starts = np.flatnonzero(np.r_[True, code[1:] != code[:-1]])
    vkeys = k[starts]
    ends = np.r_[starts[1:], len(q)]
    ok = np.linalg.norm(vkeys * L, axis=1) <= v_clip + 1e-9
    sel = np.concatenate([np.arange(a, b) for a, b in zip(starts[ok], ends[ok])]) if ok.any() else np.zeros(0, int)
    lens = (ends - starts)[ok]
    return vkeys[ok], np.r_[0, np.cumsum(lens)], q[sel], w[sel]


def decompose(f: FrequencyField, r: float, delta: float, x0=None, surface: SurfaceSpec | None = None,
              window: float = 2.5, drop_tol: float = 1e-6, truncation_radius: float | None = None) -> WavePacketSet:
    """Wave packet decomposition of ``f`` at scale ``r`` anchored at ``x0``.

    ``window`` is the half width of the per-cap frequency window in units of
    the cap radius (at least 2 so the window contains ``2 theta``).  Packets
    whose norm bound ``||eta_v DFT(psi f)||`` is below ``drop_tol * ||f||`` are
    not stored; the root-sum-square of the dropped bounds is kept in
    ``dropped_bound``.
    """
    if r < 16:
        raise ParameterError("scale r must be >= 16")
    if window < 2.0:
        raise ParameterError("window must be at least 2 cap radii")
    d = f.d
    from .fields import paraboloid
    surface = paraboloid(d + 1) if surface is None else surface
    x0 = np.zeros(d + 1) if x0 is None else np.asarray(x0, float)
    trunc = 2.0 * r if truncation_radius is None else truncation_radius
    h = f.h
    P = 1.0 / h
    L0 = r ** ((1 + delta) / 2)
    m = max(1, int(np.floor(P / L0)))
    L = P / m
    rho = r ** -0.5
    H = int(np.ceil(window * rho / h))
    N = sfft.next_fast_len(2 * H)
    wps = WavePacketSet(r, delta, x0, h, N, L, d, surface, trunc)
    nf = f.l2()
    wps.norm_f = nf
    if nf == 0:
        return wps
    fa = _anchor(f, x0, surface)
    vkeys, starts, q_all, w_all = _eta_table(N, d, P, L, trunc)
    vid = np.repeat(np.arange(len(vkeys)), np.diff(starts))
    vtuples = [tuple(int(a) for a in kv) for kv in vkeys]
    for kv in vtuples:
        wps.v_of[kv] = np.asarray(kv, float) * L
    sb = fa.support_box()
    caps = cap_cover(r, d, h=h)
    step = int(round(cap_spacing(r, h) / h))
    qf = sfft.fftfreq(N, 1.0 / N)
    # every window is centred on a cap centre, so psi and psi~ share one template
    loc = (np.arange(N) - N // 2) * h
    nodes = np.stack(np.meshgrid(*([loc] * d), indexing="ij"), -1)
    lat_offs = np.stack(np.meshgrid(*([np.arange(-2, 3)] * d), indexing="ij"), -1).reshape(-1, d)
    den = np.zeros(nodes.shape[:-1])
    for o in lat_offs:
        den += bump(np.linalg.norm(nodes - o * step * h, axis=-1) / rho)
    dist = np.linalg.norm(nodes, axis=-1)
    num = bump(dist / rho)
    psi = np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)
    psit = 1.0 - smooth_step((dist - rho) / rho)
    dropped = 0.0
    scale = h ** d / N ** d
    for cap in caps:
        c = np.asarray(cap.center)
        if any(c[k] + rho < sb[k][0] or c[k] - rho > sb[k][1] for k in range(d)):
            continue
        off = tuple(int(i * step - N // 2) for i in cap.index)
        win = fa.embed(off, (N,) * d)
        if not np.any(win.values):
            continue
        g = psi * win.values
        if not np.any(g):
            continue
        phase = [np.exp(-2j * np.pi * o * qf / N) for o in off]
        G = sfft.fftn(g)
        for k, ph in enumerate(phase):
            shape = [1] * d
            shape[k] = N
            G = G * ph.reshape(shape)
        Gf = G.reshape(-1)
        wps.caps[cap.index] = _CapData(cap, off, psit, phase)
        vals = w_all * Gf[q_all]
        b2 = np.bincount(vid, weights=np.abs(vals) ** 2, minlength=len(vkeys)) * scale
        small = b2 <= (drop_tol * nf) ** 2
        dropped += float(b2[small].sum())
        for i in np.nonzero(~small)[0]:
            a, b = starts[i], starts[i + 1]
            wps.coef[(cap.index, vtuples[i])] = (q_all[a:b], vals[a:b])
    wps.dropped_bound = float(np.sqrt(dropped))
    return wps


def reconstruction_residual(f: FrequencyField, wps: WavePacketSet) -> float:
    """``||f - sum f_{theta,v}||_2 / ||f||_2`` on the lattice of ``f``."""
    nf = f.l2()
    if nf == 0:
        return 0.0
    s = wps.sum_packets(like=f)
    return float(np.sqrt(np.sum(np.abs(f.values - s.values) ** 2) * f.h ** f.d) / nf)


def leakage(wps: WavePacketSet, key) -> float:
    """Largest packet magnitude outside ``2 theta`` (zero by construction)."""
    pk = wps.packet(key)
    c = np.asarray(wps.caps[key[0]].cap.center)
    out = np.linalg.norm(pk.nodes() - c, axis=-1) > 2 * wps.caps[key[0]].cap.radius
    return float(np.max(np.abs(pk.values[out]), initial=0.0))


# ---------------------------------------------------------------- decay

def packet_extension_decay(packet: FrequencyField, tube: Tube, surface: SurfaceSpec,
                           n_slices: int = 41, hx: float = 1.0):
    """``(sup_T |Ef|, sup_{B_r \\ 2T} |Ef|)`` sampled on horizontal slices.

    Slices are evenly spaced in ``x_n`` over the ball; each slice is one FFT
    of spatial spacing at most ``hx``.
    """
    from .extension import slice_transform
    if not np.any(packet.values):
        return 0.0, 0.0
    x0 = np.asarray(tube.x0, float)
    r = tube.r
    M = sfft.next_fast_len(int(np.ceil(1.0 / (packet.h * hx))))
    dx = 1.0 / (M * packet.h)
    q = np.arange(M) - M // 2
    xs = q * dx
    d = packet.d
    inside, outside = 0.0, 0.0
    for t in np.linspace(x0[-1] - r, x0[-1] + r, n_slices):
        F = np.abs(slice_transform(packet, surface, t, M))
        X = np.stack(np.meshgrid(*([xs] * d), indexing="ij"), -1)
        rel = X - x0[:-1]
        rad2 = r * r - (t - x0[-1]) ** 2
        if rad2 < 0:
            continue
        inball = np.sum(rel ** 2, -1) <= rad2
        dist = np.linalg.norm(X - tube.axis(np.array(t)), axis=-1)
        mi = inball & (dist <= tube.width)
        mo = inball & (dist > 2 * tube.width)
        if mi.any():
            inside = max(inside, float(F[mi].max()))
        if mo.any():
            outside = max(outside, float(F[mo].max()))
    return inside, outside


def compare_scales_check(g: FrequencyField, W_keys, small: WavePacketSet, big: WavePacketSet,
                         const: float = TUBE_ORDER_CONST) -> float:
    """``||g|_W - (g|_{up W})|_W||_2 / ||g||_2``.

    ``small`` and ``big`` are decompositions of ``g`` at scales rho (anchor x1)
    and r (anchor x0).  ``up W`` is taken among the stored packets of ``big``.
    """
    ng = g.l2()
    if ng == 0 or not W_keys:
        return 0.0
    W_keys = list(W_keys)
    gW = small.sum_packets(W_keys, like=g)
    parents = big.tubes()
    up = lift_tubes(small.tubes(W_keys), parents, const)
    up_keys = [k for k, u in zip(parents.keys, up) if u]
    g_up = big.sum_packets(up_keys, like=g)
    re = decompose(g_up, small.r, small.delta, small.x0, small.surface,
                   drop_tol=0.0, truncation_radius=small.truncation_radius)
    keep = [k for k in W_keys if k in re.coef]
    gupW = re.sum_packets(keep, like=g)
    diff = gW.values - gupW.values
    return float(np.sqrt(np.sum(np.abs(diff) ** 2) * g.h ** g.d) / ng)
