"""Grids, sampled fields, norms, transforms and the exponent calculator.

Conventions used across the package:

* ``e(s) = exp(2 pi i s)``.
* A frequency field lives on the lattice ``xi_j = (offset + j) * h`` in each of
  its ``n - 1`` axes.  Integrals over frequency are Riemann sums ``h**d * sum``.
* The Fourier transform is ``fhat(y) = int f(xi) e(-xi . y) dxi``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft


def e(s):
    """Unit-modulus exponential ``exp(2 pi i s)``."""
    return np.exp(2j * np.pi * np.asarray(s))


class DomainError(ValueError):
    """A requested region does not lie inside the field's domain."""


class ResolutionError(ValueError):
    """Sampling is too coarse for the requested evaluation."""


class ParameterError(ValueError):
    """Parameter outside its admissible range."""


# ---------------------------------------------------------------- randomness

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path.

    Independent sub-experiments use distinct ``stream`` tuples so that results
    do not depend on evaluation order or on how work is split across threads.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ExperimentParams:
    alpha: float = 2.0
    n: int = 3
    p: float = 4.0
    R: float = 64.0
    eps: float = 0.2
    delta: float | None = None
    K: int = 4
    D: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.delta is None:
            object.__setattr__(self, "delta", self.eps ** 2)
        if not (self.alpha > 0) or self.alpha == 1:
            raise ParameterError("alpha must be positive and different from 1")
        if int(self.n) != self.n or self.n < 2:
            raise ParameterError("n must be an integer >= 2")
        if self.p < 2:
            raise ParameterError("p must be >= 2")
        if self.R < 4:
            raise ParameterError("R must be >= 4")
        if not (0 < self.eps < 0.25):
            raise ParameterError("eps must lie in (0, 1/4)")
        if not (0 < self.delta <= 0.25):
            raise ParameterError("delta must lie in (0, 1/4]")
        if self.K < 2 or self.D < 2:
            raise ParameterError("K and D must be >= 2")
        if self.seed < 0:
            raise ParameterError("seed must be non-negative")

    def with_(self, **kw) -> "ExperimentParams":
        return replace(self, **kw)


def critical_exponent(params: ExperimentParams | None = None, *, alpha=None, n=None, p=None):
    """Critical local smoothing exponent ``alpha*((n-1)(1/2-1/p) - 1/p)``.

    Accepts either an ``ExperimentParams`` or keyword values.  Rational inputs
    (``Fraction`` or ints) give an exact ``Fraction`` result.
    """
    if params is not None:
        alpha, n, p = params.alpha, params.n, params.p
    if p < 2:
        raise ParameterError("p must be >= 2")
    exact = all(isinstance(v, (int, Fraction)) for v in (alpha, n, p))
    if exact:
        a, nn, pp = Fraction(alpha), Fraction(n), Fraction(p)
        return a * ((nn - 1) * (Fraction(1, 2) - 1 / pp) - 1 / pp)
    return float(alpha) * ((n - 1) * (0.5 - 1.0 / p) - 1.0 / p)


# ---------------------------------------------------------------- surfaces

@dataclass(frozen=True)
class SurfaceSpec:
    """Phase function ``h`` with closed-form gradient and Hessian.

    ``h``, ``grad_h`` and ``hess_h`` take an array of shape ``(..., d)`` and
    return shapes ``(...)``, ``(..., d)`` and ``(..., d, d)``.
    """
    h: Callable
    grad_h: Callable
    hess_h: Callable
    d: int
    curvature_class: str
    alpha: float | None = None
    name: str = "surface"

    def __call__(self, xi):
        return self.h(xi)


def _classify(hess, d, box=1.0, m=9):
    g = np.linspace(-box, box, m)
    pts = np.stack(np.meshgrid(*([g] * d), indexing="ij"), -1).reshape(-1, d)
    ev = np.linalg.eigvalsh(hess(pts))
    if np.all(ev > 0):
        return "elliptic"
    if d == 2 and np.all(ev[:, 0] < 0) and np.all(ev[:, -1] > 0):
        return "hyperbolic"
    return "degenerate"


def paraboloid(n: int = 3) -> SurfaceSpec:
    d = n - 1
    return SurfaceSpec(
        h=lambda x: np.sum(np.asarray(x) ** 2, -1),
        grad_h=lambda x: 2.0 * np.asarray(x),
        hess_h=lambda x: np.broadcast_to(2.0 * np.eye(d), np.asarray(x).shape[:-1] + (d, d)),
        d=d, curvature_class="elliptic", name="paraboloid")


def hyperbolic_paraboloid() -> SurfaceSpec:
    """``h(xi) = xi1 * xi2`` (n = 3)."""
    H = np.array([[0.0, 1.0], [1.0, 0.0]])
    return SurfaceSpec(
        h=lambda x: np.asarray(x)[..., 0] * np.asarray(x)[..., 1],
        grad_h=lambda x: np.asarray(x)[..., ::-1].astype(float),
        hess_h=lambda x: np.broadcast_to(H, np.asarray(x).shape[:-1] + (2, 2)),
        d=2, curvature_class="hyperbolic", name="hyperbolic")


def fractional(alpha: float, n: int = 3) -> SurfaceSpec:
    """``h(xi) = |xi|**alpha``; smooth away from the origin."""
    d = n - 1
    a = float(alpha)

    def h(x):
        return np.linalg.norm(np.asarray(x, float), axis=-1) ** a

    def grad(x):
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        return a * np.where(r > 0, r, 1.0) ** (a - 2) * x

    def hess(x):
        x = np.asarray(x, float)
        r = np.linalg.norm(x, axis=-1)[..., None, None]
        r = np.where(r > 0, r, 1.0)
        outer = x[..., :, None] * x[..., None, :]
        return a * r ** (a - 2) * (np.eye(d) + (a - 2) * outer / r ** 2)

    return SurfaceSpec(h=h, grad_h=grad, hess_h=hess, d=d,
                       curvature_class=f"fractional({a:g})", alpha=a, name="fractional")


def polynomial_surface(coeffs: dict) -> SurfaceSpec:
    """Two-variable polynomial ``sum c[(i, j)] xi1**i xi2**j``."""
    items = [(int(i), int(j), float(c)) for (i, j), c in coeffs.items() if c != 0]

    def h(x):
        x = np.asarray(x, float)
        return sum(c * x[..., 0] ** i * x[..., 1] ** j for i, j, c in items) + 0.0 * x[..., 0]

    def _pw(v, k):
        return v ** k if k >= 0 else 0.0 * v

    def grad(x):
        x = np.asarray(x, float)
        a, b = x[..., 0], x[..., 1]
        g1 = sum(c * i * _pw(a, i - 1) * b ** j for i, j, c in items if i > 0) + 0.0 * a
        g2 = sum(c * j * a ** i * _pw(b, j - 1) for i, j, c in items if j > 0) + 0.0 * a
        return np.stack([g1, g2], -1)

    def hess(x):
        x = np.asarray(x, float)
        a, b = x[..., 0], x[..., 1]
        h11 = sum(c * i * (i - 1) * _pw(a, i - 2) * b ** j for i, j, c in items if i > 1) + 0.0 * a
        h22 = sum(c * j * (j - 1) * a ** i * _pw(b, j - 2) for i, j, c in items if j > 1) + 0.0 * a
        h12 = sum(c * i * j * _pw(a, i - 1) * _pw(b, j - 1) for i, j, c in items if i > 0 and j > 0) + 0.0 * a
        return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)

    cls = _classify(hess, 2)
    return SurfaceSpec(h=h, grad_h=grad, hess_h=hess, d=2, curvature_class=cls, name="polynomial")


# ---------------------------------------------------------------- fields

@dataclass
class FrequencyField:
    """Complex samples on the lattice ``(offset + j) * h`` of ``R^d``."""
    values: np.ndarray
    h: float
    offset: tuple = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.offset is None:
            self.offset = tuple(-(s // 2) for s in self.values.shape)
        self.offset = tuple(int(o) for o in self.offset)
        if len(self.offset) != self.values.ndim:
            raise ValueError("offset must have one entry per axis")

    @property
    def d(self) -> int:
        return self.values.ndim

    @property
    def shape(self):
        return self.values.shape

    def axis(self, k: int) -> np.ndarray:
        return (self.offset[k] + np.arange(self.values.shape[k])) * self.h

    def axes(self):
        return [self.axis(k) for k in range(self.d)]

    def nodes(self) -> np.ndarray:
        """All lattice nodes, shape ``values.shape + (d,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), -1)

    def support_box(self):
        """Smallest box ``[(lo, hi), ...]`` containing every nonzero sample, or None."""
        nz = np.nonzero(self.values)
        if len(nz[0]) == 0:
            return None
        return [((self.offset[k] + nz[k].min()) * self.h, (self.offset[k] + nz[k].max()) * self.h)
                for k in range(self.d)]

    def l2(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.h ** self.d))

    def copy(self, values=None) -> "FrequencyField":
        v = self.values.copy() if values is None else values
        return FrequencyField(v, self.h, self.offset)

    @classmethod
    def from_function(cls, func: Callable, h: float, d: int, box=1.0) -> "FrequencyField":
        """Sample ``func(nodes)`` on the lattice covering ``[-box, box]^d``."""
        m = int(np.floor(box / h + 1e-9))
        shape = (2 * m + 1,) * d
        fld = cls(np.zeros(shape, complex), h, (-m,) * d)
        fld.values = np.asarray(func(fld.nodes()), dtype=complex)
        return fld

    def embed(self, offset, shape) -> "FrequencyField":
        """Copy onto a larger window of the same lattice."""
        out = np.zeros(shape, complex)
        sl_out, sl_in = [], []
        for k in range(self.d):
            a = self.offset[k] - offset[k]
            lo, hi = max(a, 0), min(a + self.shape[k], shape[k])
            if hi <= lo:
                return FrequencyField(out, self.h, offset)
            sl_out.append(slice(lo, hi))
            sl_in.append(slice(lo - a, hi - a))
        out[tuple(sl_out)] = self.values[tuple(sl_in)]
        return FrequencyField(out, self.h, offset)


@dataclass
class SpaceTimeField:
    """Complex samples on a tensor grid.  The last axis is time ``x_n``.

    Each axis is ``(offset[k] + j) * spacing[k]`` so the grid is exactly
    representable in the binary dump format.
    """
    values: np.ndarray
    spacing: tuple
    offset: tuple
    times: np.ndarray | None = None  # explicit time coordinates, if not a lattice

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.offset = tuple(int(o) for o in self.offset)
        if self.times is not None:
            self.times = np.asarray(self.times, float)

    @property
    def ndim(self):
        return self.values.ndim

    def axis(self, k):
        if self.times is not None and k == self.ndim - 1:
            return self.times
        return (self.offset[k] + np.arange(self.values.shape[k])) * self.spacing[k]

    def axes(self):
        return [self.axis(k) for k in range(self.ndim)]

    @property
    def domain(self):
        return [(a[0], a[-1]) for a in self.axes()]

    def cell_volume(self) -> float:
        """Volume element of the spatial lattice (time axis included unless
        explicit times are given)."""
        if self.times is not None:
            return float(np.prod(self.spacing[:-1]))
        return float(np.prod(self.spacing))

    def time_slice(self, k: int) -> "SpaceTimeField":
        """Spatial field at the k-th time sample."""
        return SpaceTimeField(self.values[..., k], self.spacing[:-1], self.offset[:-1])


def uniform_axis(lo: float, hi: float, step: float):
    """Offset and count of the lattice ``k * step`` covering ``[lo, hi]``."""
    a = int(np.ceil(lo / step - 1e-9))
    b = int(np.floor(hi / step + 1e-9))
    return a, b - a + 1


# ---------------------------------------------------------------- norms

@dataclass(frozen=True)
class NormReport:
    value: float
    method: str
    std_error: float
    sample_count: int


def _grid_parts(field):
    if isinstance(field, FrequencyField):
        return field.axes(), field.values, field.h ** field.d
    return field.axes(), field.values, field.cell_volume()


def _region_mask(axes, region):
    if region is None:
        return tuple(slice(None) for _ in axes)
    if len(region) != len(axes):
        raise DomainError("region dimension does not match field")
    sl = []
    for ax, (lo, hi) in zip(axes, region):
        tol = 1e-9 * max(1.0, abs(ax[0]), abs(ax[-1]))
        if lo < ax[0] - tol or hi > ax[-1] + tol or lo > hi:
            raise DomainError(f"region [{lo}, {hi}] outside axis [{ax[0]}, {ax[-1]}]")
        idx = np.nonzero((ax >= lo - tol) & (ax <= hi + tol))[0]
        sl.append(slice(idx[0], idx[-1] + 1) if len(idx) else slice(0, 0))
    return tuple(sl)


def lp_norm(field, p: float, region=None, method: str = "grid", samples: int = 4096,
            seed: int = 0) -> NormReport:
    """L^p norm of a sampled field over a box ``[(lo, hi), ...]``.

    ``grid`` is the Riemann sum over the nodes in the region.  ``monte_carlo``
    draws ``samples`` nodes by stratified sampling over equal blocks of the
    region and returns an unbiased estimate of the integral of ``|u|^p``
    together with a delta-method standard error for its ``1/p`` power.

    ``field`` may also be a callable ``u(points) -> values``; then ``region``
    is required and monte_carlo samples continuous points.
    """
    if not (1 <= p <= np.inf):
        raise ParameterError("p must lie in [1, inf]")
    if callable(field) and not isinstance(field, (FrequencyField, SpaceTimeField)):
        if region is None:
            raise DomainError("callable fields need an explicit region")
        return _lp_callable(field, p, region, samples, seed)
    axes, vals, dv = _grid_parts(field)
    sl = _region_mask(axes, region)
    sub = np.abs(vals[sl])
    if method == "grid":
        if sub.size == 0:
            return NormReport(0.0, "grid", 0.0, 0)
        if np.isinf(p):
            return NormReport(float(sub.max()), "grid", 0.0, sub.size)
        return NormReport(float((np.sum(sub ** p) * dv) ** (1.0 / p)), "grid", 0.0, sub.size)
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    flat = sub.reshape(-1)
    N = flat.size
    if N == 0 or np.isinf(p):
        v = float(flat.max()) if N else 0.0
        return NormReport(v, "monte_carlo", 0.0, N)
    rng = make_rng(seed, 0x4C50)
    nstrata = max(1, min(samples // 2, N))
    edges = np.linspace(0, N, nstrata + 1).astype(np.int64)
    per = max(2, samples // nstrata)
    total, var = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        idx = rng.integers(a, b, size=per)
        w = flat[idx] ** p
        total += (b - a) * w.mean()
        var += (b - a) ** 2 * w.var(ddof=1) / per
    I = total * dv
    se_I = np.sqrt(var) * dv
    if I <= 0:
        return NormReport(0.0, "monte_carlo", float(se_I), nstrata * per)
    val = I ** (1.0 / p)
    se = se_I * val / (p * I)
    return NormReport(float(val), "monte_carlo", float(se), nstrata * per)


def _lp_callable(func, p, region, samples, seed):
    region = np.asarray(region, float)
    d = len(region)
    vol = float(np.prod(region[:, 1] - region[:, 0]))
    rng = make_rng(seed, 0x4C51)
    # stratify along a regular grid of blocks with two draws per block
    nb = max(1, int(np.floor((samples / 2) ** (1.0 / d))))
    grid = np.stack(np.meshgrid(*([np.arange(nb)] * d), indexing="ij"), -1).reshape(-1, d)
    width = (region[:, 1] - region[:, 0]) / nb
    pts = []
    for _ in range(2):
        u = rng.random(grid.shape)
        pts.append(region[:, 0] + (grid + u) * width)
    vals = [np.abs(np.asarray(func(q))) for q in pts]
    if np.isinf(p):
        return NormReport(float(max(v.max() for v in vals)), "monte_carlo", 0.0, 2 * len(grid))
    w = np.stack([v ** p for v in vals])  # (2, blocks)
    I = vol * w.mean()
    block_var = ((w[0] - w[1]) ** 2 / 2.0)
    se_I = vol * np.sqrt(block_var.sum() / 2.0) / len(grid)
    if I <= 0:
        return NormReport(0.0, "monte_carlo", float(se_I), 2 * len(grid))
    val = I ** (1.0 / p)
    return NormReport(float(val), "monte_carlo", float(se_I * val / (p * I)), 2 * len(grid))


# ---------------------------------------------------------------- transforms

def fourier_transform(field: FrequencyField, pad: int = 1) -> SpaceTimeField:
    """Continuous-normalised transform ``fhat(y) = int f e(-xi y)`` on the dual grid.

    The dual spacing is ``1/(N h)`` where ``N = pad * shape``; the returned grid
    is centred at the origin.
    """
    N = [pad * s for s in field.shape]
    F = sfft.fftn(field.values, s=N)
    dy = [1.0 / (m * field.h) for m in N]
    # index offset o shifts the lattice, giving the phase e(-o q / N)
    for k, (m, o) in enumerate(zip(N, field.offset)):
        q = sfft.fftfreq(m, 1.0 / m)
        shape = [1] * len(N)
        shape[k] = m
        F = F * np.exp(-2j * np.pi * o * q / m).reshape(shape)
    F = sfft.fftshift(F) * field.h ** field.d
    off = [-(m // 2) for m in N]
    return SpaceTimeField(F, dy, off)


def inverse_fourier_transform(fhat: SpaceTimeField, h: float, offset) -> FrequencyField:
    """Inverse of ``fourier_transform`` (same ``pad=1`` lattice)."""
    N = fhat.values.shape
    F = sfft.ifftshift(fhat.values) / h ** len(N)
    for k, (m, o) in enumerate(zip(N, offset)):
        q = sfft.fftfreq(m, 1.0 / m)
        shape = [1] * len(N)
        shape[k] = m
        F = F * np.exp(2j * np.pi * o * q / m).reshape(shape)
    return FrequencyField(sfft.ifftn(F), h, offset)


def fourier_pair_check(field: FrequencyField) -> float:
    """Relative discrepancy ``| ||f||_2 - ||fhat||_2 | / ||f||_2`` plus round trip."""
    a = field.l2()
    if a == 0:
        return 0.0
    fh = fourier_transform(field)
    b = float(np.sqrt(np.sum(np.abs(fh.values) ** 2) * fh.cell_volume()))
    back = inverse_fourier_transform(fh, field.h, field.offset)
    rt = float(np.sqrt(np.sum(np.abs(back.values - field.values) ** 2) * field.h ** field.d)) / a
    return max(abs(a - b) / a, rt)


# ---------------------------------------------------------------- binary dumps

MAGIC = b"WPLAB1"
DUMP_VERSION = 1
_HEADER = struct.Struct("<6sHII3I3d3i")  # 6+2+4+4+12+24+12 = 64 bytes
assert _HEADER.size == 64


def _pack(values, spacing, offset, n):
    values = np.ascontiguousarray(values, dtype=complex)
    nd = values.ndim
    if nd > 3:
        raise ValueError("dump format supports at most 3 axes")
    dims = list(values.shape) + [0] * (3 - nd)
    sp = list(spacing) + [0.0] * (3 - nd)
    off = list(offset) + [0] * (3 - nd)
    head = _HEADER.pack(MAGIC, DUMP_VERSION, int(n), nd, *dims, *sp, *off)
    return head + values.view(np.float64).astype("<f8").tobytes()


def dump_bytes(field) -> bytes:
    """Serialise a field in the ``WPLAB1`` binary layout."""
    if isinstance(field, FrequencyField):
        return _pack(field.values, [field.h] * field.d, field.offset, field.d + 1)
    if field.times is not None:
        raise ValueError("fields with explicit time lists must be sliced before dumping")
    return _pack(field.values, field.spacing, field.offset, field.ndim)


def load_bytes(buf: bytes):
    """Inverse of ``dump_bytes``.  Returns a FrequencyField when the ambient
    dimension exceeds the number of stored axes, else a SpaceTimeField."""
    if len(buf) < 64 or buf[:6] != MAGIC:
        raise ValueError("not a WPLAB1 dump")
    magic, ver, n, nd, *rest = _HEADER.unpack(buf[:64])
    if ver != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {ver}")
    dims, sp, off = rest[:3][:nd], rest[3:6][:nd], rest[6:9][:nd]
    count = int(np.prod(dims)) if nd else 1
    raw = np.frombuffer(buf[64:64 + 16 * count], dtype="<f8")
    if raw.size != 2 * count:
        raise ValueError("truncated dump")
    vals = raw.view(np.complex128).reshape(dims).copy()
    if n == nd + 1:
        return FrequencyField(vals, sp[0], off)
    return SpaceTimeField(vals, sp, off)


def save_field(path, field) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(field))


def load_field(path):
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
