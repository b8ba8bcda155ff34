"""Extension operator, fractional propagator and Littlewood-Paley cutoffs.

``Ef(x', x_n) = int f(xi) e(xi . x' + h(xi) x_n) dxi`` is evaluated as the
Riemann sum over the lattice of ``f``.  On tensor grids each time slice is one
zero-padded FFT after multiplying by ``e(h(xi) x_n)``; at scattered points a
chunked direct sum is used.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .fields import (FrequencyField, ParameterError, ResolutionError, SpaceTimeField,
                     SurfaceSpec, e, fractional, uniform_axis)


def _check_support(f: FrequencyField, box=1.0):
    sb = f.support_box()
    if sb is None:
        return
    for lo, hi in sb:
        if lo < -box - 1e-12 or hi > box + 1e-12:
            raise ValueError("field is not supported in [-1, 1]^(n-1)")


def _check_resolution(h, xmax):
    if xmax > 0 and h > 1.0 / (4.0 * xmax) * (1 + 1e-12):
        raise ResolutionError(f"frequency spacing {h:g} too coarse for |x| up to {xmax:g}")


def extend_points(f: FrequencyField, surface: SurfaceSpec, pts, check=True, chunk=256) -> np.ndarray:
    """Ef at scattered points ``pts`` of shape ``(..., d + 1)``."""
    pts = np.asarray(pts, float)
    shp = pts.shape[:-1]
    P = pts.reshape(-1, f.d + 1)
    if check:
        _check_support(f)
        if len(P):
            _check_resolution(f.h, float(np.max(np.linalg.norm(P, axis=1))))
    nz = np.nonzero(f.values.reshape(-1))[0]
    out = np.zeros(len(P), complex)
    if len(nz) == 0 or len(P) == 0:
        return out.reshape(shp)
    xi = f.nodes().reshape(-1, f.d)[nz]
    a = f.values.reshape(-1)[nz]
    hx = surface.h(xi)
    w = f.h ** f.d
    for s in range(0, len(P), chunk):
        q = P[s:s + chunk]
        ph = q[:, :-1] @ xi.T + q[:, -1:] * hx[None, :]
        out[s:s + chunk] = np.exp(2j * np.pi * ph) @ a * w
    return out.reshape(shp)


def natural_fft_size(f: FrequencyField, hx: float | None = None) -> int:
    """FFT length giving spatial spacing at most ``hx`` (default 1/4)."""
    hx = 0.25 if hx is None else hx
    m = int(np.ceil(1.0 / (f.h * hx) - 1e-9))
    return sfft.next_fast_len(max(m, max(f.shape)))



def slice_transform(f: FrequencyField, surface: SurfaceSpec | None, t: float, M: int) -> np.ndarray:
    """Periodic spatial samples of ``Ef(., t)`` on the grid ``q / (M h)``.

    Output is centred (fftshift order), index ``q = -M//2 .. M - M//2 - 1``.
    When ``M`` is smaller than the lattice the samples are folded modulo
    ``M`` first, which is exact on the coarse grid.
    """
    a = f.values
    if surface is not None and t != 0:
        a = a * e(surface.h(f.nodes()) * t)
    pos = [(o + np.arange(s)) % M for o, s in zip(f.offset, f.shape)]
    A = np.zeros((M,) * f.d, complex)
    if all(s <= M for s in f.shape):
        A[np.ix_(*pos)] = a
    else:
        np.add.at(A, np.ix_(*pos), a)
    F = sfft.ifftn(A) * M ** f.d
    return sfft.fftshift(F) * f.h ** f.d


def extend(f: FrequencyField, surface: SurfaceSpec, times, box=None, hx: float | None = None,
           M: int | None = None, check=True) -> SpaceTimeField:
    """Ef on a tensor grid: FFT spatial lattice restricted to ``box`` times ``times``.

    ``box`` is ``[(lo, hi)] * d`` in x'; by default the full periodic cell.
    Spatial spacing is ``1/(M h)`` with ``M`` chosen so that it is at most
    ``hx`` (default 1/4).
    """
    times = np.atleast_1d(np.asarray(times, float))
    if check:
        _check_support(f)
    M = natural_fft_size(f, hx) if M is None else int(M)
    dx = 1.0 / (M * f.h)
    lo_idx = -(M // 2)
    if box is None:
        offs, cnts = [lo_idx] * f.d, [M] * f.d
    else:
        offs, cnts = [], []
        for lo, hi in box:
            a, c = uniform_axis(lo, hi, dx)
            offs.append(a)
            cnts.append(c)
            if a < lo_idx or a + c > lo_idx + M:
                raise ResolutionError("requested box exceeds the periodic cell; refine h")
    if check:
        xm = max(max(abs(o), abs(o + c - 1)) for o, c in zip(offs, cnts)) * dx
        tm = float(np.max(np.abs(times))) if len(times) else 0.0
        _check_resolution(f.h, float(np.hypot(xm * np.sqrt(f.d), tm)) if box is not None else 0.0)
    sl = tuple(slice(o - lo_idx, o - lo_idx + c) for o, c in zip(offs, cnts))
    out = np.empty(tuple(cnts) + (len(times),), complex)
    for k, t in enumerate(times):
        out[..., k] = slice_transform(f, surface, t, M)[sl]
    return SpaceTimeField(out, [dx] * f.d + [1.0], offs + [0], times=times)


# ---------------------------------------------------------------- annulus cutoffs

def smoothstep(u):
    """C^2 quintic step: 0 for u <= 0, 1 for u >= 1."""
    u = np.clip(np.asarray(u, float), 0.0, 1.0)
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u ** 2)


def annulus_cutoff(s):
    """Radial profile equal to 1 on [3/4, 3/2] and supported in [1/2, 2].

    Piecewise: quintic rise on [1/2, 3/4], flat, quintic fall on [3/2, 2].
    """
    s = np.asarray(s, float)
    return smoothstep((s - 0.5) / 0.25) * smoothstep((2.0 - s) / 0.5)


def littlewood_paley_project(g: FrequencyField, lam: float) -> FrequencyField:
    """Multiply the spectrum by ``annulus_cutoff(|xi| / lam)``."""
    if lam <= 0:
        raise ParameterError("lambda must be positive")
    r = np.linalg.norm(g.nodes(), axis=-1)
    return g.copy(g.values * annulus_cutoff(r / lam))


def littlewood_paley_pieces(g: FrequencyField, lams) -> list:
    """Normalised dyadic pieces summing to ``g`` wherever some cutoff equals 1.

    Each piece is ``chi_lam / sum_mu chi_mu`` times ``g`` where ``chi_lam`` is the
    annulus cutoff at scale ``lam``; supports stay inside ``[lam/2, 2 lam]``.
    With dyadic ``lams`` from ``l0`` to ``l1`` the pieces add up to ``g`` on
    ``3 l0 / 4 <= |xi| <= 3 l1 / 2``.
    """
    r = np.linalg.norm(g.nodes(), axis=-1)
    chis = [annulus_cutoff(r / lam) for lam in lams]
    tot = np.sum(chis, axis=0)
    inv = np.where(tot > 0, 1.0 / np.where(tot > 0, tot, 1.0), 0.0)
    return [g.copy(g.values * c * inv) for c in chis]


# ---------------------------------------------------------------- propagator

def _prep(g: FrequencyField, alpha: float):
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    if alpha < 1:
        g = littlewood_paley_project(g, 1.0)
    return g, fractional(alpha, g.d + 1)


def evolve_spectrum(g: FrequencyField, alpha: float, s: float) -> FrequencyField:
    """Spectrum of the time-``s`` evolved data: ``ghat * e(s |xi|^alpha)``."""
    g, surf = _prep(g, alpha)
    return g.copy(g.values * e(surf.h(g.nodes()) * s))


def propagate(g: FrequencyField, alpha: float, times, hx: float | None = None,
              M: int | None = None) -> SpaceTimeField:
    """``u(x, t) = int ghat(xi) e(x . xi + t |xi|^alpha) dxi`` on the periodic grid.

    ``g`` holds the spectrum ``ghat``.  For ``alpha < 1`` the spectrum is first
    projected to the annulus at scale 1 where ``|xi|^alpha`` is smooth.
    """
    g, surf = _prep(g, alpha)
    return extend(g, surf, times, hx=hx, M=M, check=False)


def propagate_points(g: FrequencyField, alpha: float, pts) -> np.ndarray:
    """``u`` at scattered space-time points ``(..., d + 1)``."""
    g, surf = _prep(g, alpha)
    return extend_points(g, surf, pts, check=False)


def scaling_identity_check(g: FrequencyField, alpha: float, R: float, t, x) -> float:
    """Relative discrepancy in ``u_g(x, R t) = R^{-(n-1)/alpha} u_{g1}(R^{-1/alpha} x, t)``
    with ``g1hat(xi) = ghat(R^{-1/alpha} xi)``.

    ``t`` and ``x`` may be arrays of matching leading shape.  The right side
    uses the dilated lattice ``R^{1/alpha} h`` and its own propagation call.
    """
    if g.support_box() is None:
        return 0.0
    t = np.atleast_1d(np.asarray(t, float))
    x = np.asarray(x, float).reshape(len(t), g.d)
    s = R ** (1.0 / alpha)
    lhs = propagate_points(g, alpha, np.column_stack([x, R * t]))
    # alpha < 1: the annulus projection must be applied before dilating
    g0 = littlewood_paley_project(g, 1.0) if alpha < 1 else g
    g1 = FrequencyField(g0.values, g0.h * s, g0.offset)
    surf = fractional(alpha, g.d + 1)
    rhs = R ** (-g.d / alpha) * extend_points(g1, surf, np.column_stack([x / s, t]), check=False)
    scale = max(float(np.max(np.abs(lhs))), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)


def parabolic_rescaling_check(f_tau: FrequencyField, K: float, pts) -> float:
    """Relative error of ``Eg(x) = K^2 Ef_tau(K x', K^2 x_n)`` for ``h = |xi|^2``.

    ``f_tau`` is supported in the cap ``[-1/K, 1/K]^(n-1)``; ``g(xi) = f_tau(xi/K)``
    is sampled on the dilated lattice ``K h``.
    """
    pts = np.asarray(pts, float)
    d = f_tau.d
    sb = f_tau.support_box()
    if sb is None:
        return 0.0
    if any(lo < -1.0 / K - 1e-12 or hi > 1.0 / K + 1e-12 for lo, hi in sb):
        raise ValueError("f_tau must be supported in the cap [-1/K, 1/K]^(n-1)")
    from .fields import paraboloid
    surf = paraboloid(d + 1)
    g = FrequencyField(f_tau.values, f_tau.h * K, f_tau.offset)
    lhs = extend_points(g, surf, pts, check=False)
    q = np.concatenate([K * pts[..., :-1], K ** 2 * pts[..., -1:]], -1)
    rhs = K ** d * extend_points(f_tau, surf, q, check=False)
    scale = max(float(np.max(np.abs(lhs))), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)
