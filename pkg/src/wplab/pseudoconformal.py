"""Pseudo-conformal reduction of the fractional Schrodinger propagator.

The kernel ``K_t(x) = int psi(xi) e(x.xi + t|xi|^alpha) dxi`` is evaluated by
its exact radial (Bessel) reduction followed by Gauss-Legendre panels.  The
operators ``T``, ``T~`` and ``E_R`` act on compactly supported smooth data and
are evaluated by tensor Gauss-Legendre panels sized so that the phase moves
by at most ``pi/4`` per panel.

Throughout ``beta = alpha / (alpha - 1)``.  The stationary value carries the
constant ``c_alpha = alpha^{-1/(alpha-1)-1} (1 - alpha)``; the operators use
the normalised phase ``t |x/t|^beta`` and ``time_rescaling`` gives the map
between the two conventions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .fields import ParameterError, ResolutionError, e, make_rng
from .wavepackets import bump, smooth_step

QUAD_BUDGET = 2 ** 26
PANEL_PHASE = np.pi / 4


class PreconditionError(ValueError):
    """Input outside the region where a check is meaningful."""


# ---------------------------------------------------------------- cutoff

@dataclass(frozen=True)
class KernelSpec:
    """Annulus cutoff: ``psi = 1`` on ``[3/4, 3/2]``, supported in ``[1/2, 2]``."""
    alpha: float = 2.0
    n: int = 3
    lo: float = 0.5
    inner: float = 0.75
    outer: float = 1.5
    hi: float = 2.0

    def __post_init__(self):
        if not (self.alpha > 0) or self.alpha == 1:
            raise ParameterError("alpha must be positive and different from 1")
        if int(self.n) != self.n or self.n < 2:
            raise ParameterError("n must be an integer >= 2")
        if not (0 < self.lo < self.inner < self.outer < self.hi):
            raise ParameterError("need 0 < lo < inner < outer < hi")

    @property
    def d(self) -> int:
        return int(self.n) - 1

    @property
    def beta(self) -> float:
        return self.alpha / (self.alpha - 1.0)

    def psi_radial(self, rho):
        rho = np.asarray(rho, float)
        up = smooth_step((rho - self.lo) / (self.inner - self.lo))
        down = 1.0 - smooth_step((rho - self.outer) / (self.hi - self.outer))
        return up * down

    def psi(self, xi):
        return self.psi_radial(np.linalg.norm(np.asarray(xi, float), axis=-1))

    def plateau(self, xi) -> np.ndarray:
        r = np.linalg.norm(np.asarray(xi, float), axis=-1)
        return (r >= self.inner) & (r <= self.outer)

    def phase_rate(self) -> float:
        """Bound on ``|grad_y|`` of ``|u|^beta`` over the support of ``psi(u)``."""
        b = self.beta
        return abs(b) * max(self.lo ** (b - 1), self.hi ** (b - 1))


# ---------------------------------------------------------------- quadrature

AMP_RATE = 8.0


def _gl_rule(lo, hi, rate, order, budget=QUAD_BUDGET):
    """Composite Gauss-Legendre nodes on ``[lo, hi]`` with phase ``<= pi/4`` per panel.

    ``rate`` is the phase speed in cycles per unit length.
    """
    width = hi - lo
    if width <= 0:
        return np.zeros(0), np.zeros(0)
    npan = max(1, int(np.ceil(width * rate * 2 * np.pi / PANEL_PHASE)))
    if npan * order > budget:
        raise ResolutionError(f"quadrature needs {npan * order} nodes, budget {budget}")
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, npan + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None]).ravel()
    weights = (half[:, None] * w[None]).ravel()
    return nodes, weights


def _tensor_rule(box, rate, order, budget=QUAD_BUDGET):
    rules = [_gl_rule(lo, hi, rate, order, budget) for lo, hi in box]
    total = int(np.prod([r[0].size for r in rules]))
    if total > budget:
        raise ResolutionError(f"quadrature needs {total} nodes, budget {budget}")
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wts = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    Y = np.stack(grids, -1).reshape(-1, len(box))
    W = np.prod(np.stack(wts, -1), -1).reshape(-1)
    return Y, W


# ---------------------------------------------------------------- kernel

def _radial_factor(xnorm, rho, d):
    """``int_{S^{d-1}} e(x.rho w) dw`` as ``2 pi |x|^{1-d/2} J_{d/2-1}(2 pi |x| rho) rho^{d/2-1}``."""
    nu = d / 2.0 - 1.0
    z = 2 * np.pi * xnorm * rho
    if xnorm == 0:
        return np.full_like(rho, 2 * np.pi ** (d / 2) / special.gamma(d / 2))
    small = z < 1e-8
    out = np.empty_like(rho)
    zz = np.where(small, 1.0, z)
    # (2 pi)^{d/2} J_nu(z) / z^nu, with the z -> 0 limit handled separately
    out[~small] = (2 * np.pi) ** (d / 2) * special.jv(nu, zz[~small]) / zz[~small] ** nu
    out[small] = (2 * np.pi) ** (d / 2) / (2 ** nu * special.gamma(nu + 1))
    return out


def kernel_Kt(x, t: float, spec: KernelSpec, order: int = 8, budget: int = QUAD_BUDGET) -> complex:
    """``K_t(x) = int psi(xi) e(x.xi + t |xi|^alpha) dxi`` over ``R^{n-1}``.

    Uses ``int psi e(x.xi + t|xi|^a) = int_0^inf psi(rho) e(t rho^a) S(|x| rho) rho^{d-1} drho``
    with ``S`` the spherical average, then Gauss-Legendre panels in ``rho``
    whose width keeps the phase change below ``pi/4``.
    """
    x = np.atleast_1d(np.asarray(x, float))
    d = spec.d
    if x.size != d:
        raise ParameterError(f"x must have {d} components")
    xn = float(np.linalg.norm(x))
    a = spec.alpha
    speed = abs(t) * a * max(spec.lo ** (a - 1), spec.hi ** (a - 1))
    rate = max(xn + abs(t), xn + speed)
    # the floor resolves the transition shells of psi when the phase is slow
    rho, w = _gl_rule(spec.lo, spec.hi, max(rate, AMP_RATE), order, budget)
    vals = spec.psi_radial(rho) * e(t * rho ** a) * _radial_factor(xn, rho, d) * rho ** (d - 1)
    return complex(np.sum(w * vals))


# ---------------------------------------------------------------- stationary phase

def stationary_point(x_tilde, alpha: float) -> np.ndarray:
    """``xi_c = -(x~/|x~|) (|x~|/alpha)^{1/(alpha-1)}``, the zero of ``x~ + alpha |xi|^{alpha-2} xi``."""
    x = np.asarray(x_tilde, float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(r == 0):
        raise PreconditionError("x_tilde = 0 has no stationary point in the annulus")
    if alpha == 1:
        raise ParameterError("alpha must differ from 1")
    return -(x / r) * (r / alpha) ** (1.0 / (alpha - 1.0))


def phase_gradient(xi, x_tilde, alpha: float) -> np.ndarray:
    xi = np.asarray(xi, float)
    r = np.linalg.norm(xi, axis=-1, keepdims=True)
    return np.asarray(x_tilde, float) + alpha * r ** (alpha - 2) * xi


def stationary_constant(alpha: float) -> float:
    """``alpha^{-1/(alpha-1)-1} (1 - alpha)``."""
    return alpha ** (-1.0 / (alpha - 1.0) - 1.0) * (1.0 - alpha)


def stationary_value(x_tilde, alpha: float):
    """Closed form ``phi(xi_c) = c_alpha |x~|^{alpha/(alpha-1)}``."""
    x = np.asarray(x_tilde, float)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0):
        raise PreconditionError("x_tilde = 0 has no stationary point in the annulus")
    return stationary_constant(alpha) * r ** (alpha / (alpha - 1.0))


def phase_value(xi, x_tilde, alpha: float):
    """Direct evaluation ``phi(xi) = xi.x~ + |xi|^alpha``."""
    xi = np.asarray(xi, float)
    return np.sum(xi * np.asarray(x_tilde, float), -1) + np.linalg.norm(xi, axis=-1) ** alpha


def time_rescaling(alpha: float):
    """Map between ``e(t c_alpha |x/t|^beta)`` and the normalised ``e(s t' |x/t'|^beta)``.

    Returns ``(k, s)`` with ``t' = k t`` and ``s = sign(c_alpha)``; the
    normalised phase is conjugated when ``s < 0``.
    """
    c = stationary_constant(alpha)
    return abs(c) ** (-(alpha - 1.0)), float(np.sign(c))


def main_term(x_tilde, t: float, spec: KernelSpec) -> complex:
    """Leading stationary-phase term of ``K_t(t x~)``, constants kept.

    ``t^{-d/2} |det phi''(xi_c)|^{-1/2} e^{i pi sigma / 4} e(t phi(xi_c)) psi(xi_c)``
    where ``phi''`` has eigenvalues ``alpha |xi|^{alpha-2}`` (``d-1`` times)
    and ``alpha (alpha-1) |xi|^{alpha-2}``.
    """
    a, d = spec.alpha, spec.d
    xc = stationary_point(x_tilde, a)
    r = float(np.linalg.norm(xc))
    lam_t = a * r ** (a - 2)
    lam_r = a * (a - 1) * r ** (a - 2)
    det = lam_t ** (d - 1) * abs(lam_r)
    sig = (d - 1) + np.sign(lam_r)
    amp = t ** (-d / 2) * det ** -0.5 * np.exp(1j * np.pi * sig / 4)
    return complex(amp * e(t * stationary_value(x_tilde, a)) * spec.psi(xc))


def stationary_phase_check(x_tilde, t_list, spec: KernelSpec, details: bool = False):
    """Fitted log-log slope of ``|K_t(t x~) - main term|`` against ``t``.

    ``x~`` is held fixed so the stationary point does not move with ``t``;
    it must sit on the plateau of ``psi``.
    """
    x_tilde = np.asarray(x_tilde, float)
    xc = stationary_point(x_tilde, spec.alpha)
    if not spec.plateau(xc):
        raise PreconditionError("stationary point is off the plateau of psi")
    ts = np.asarray(t_list, float)
    errs, mains = [], []
    for t in ts:
        K = kernel_Kt(t * x_tilde, t, spec)
        m = main_term(x_tilde, t, spec)
        errs.append(abs(K - m))
        mains.append(abs(m))
    lt = np.log(ts)
    slope = float(np.polyfit(lt, np.log(errs), 1)[0])
    if details:
        return slope, {"errors": np.array(errs), "main": np.array(mains),
                       "main_slope": float(np.polyfit(lt, np.log(mains), 1)[0])}
    return slope


# ---------------------------------------------------------------- data

@dataclass
class BumpData:
    """Finite sum of modulated bumps ``a bump(|y - c| / rad) e(k.y)``.

    ``rate`` bounds the local oscillation (cycles per unit) for quadrature.
    """
    centers: np.ndarray
    radii: np.ndarray
    freqs: np.ndarray
    coefs: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, float))
        k = len(self.centers)
        self.radii = np.broadcast_to(np.asarray(self.radii, float), (k,)).copy()
        self.freqs = np.asarray(self.freqs, float).reshape(k, self.centers.shape[1])
        self.coefs = (np.ones(k, complex) if self.coefs is None
                      else np.broadcast_to(np.asarray(self.coefs, complex), (k,)).copy())

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def __call__(self, Y):
        Y = np.asarray(Y, float)
        out = np.zeros(Y.shape[:-1], complex)
        for c, r, k, a in zip(self.centers, self.radii, self.freqs, self.coefs):
            if a == 0:
                continue
            out += a * bump(np.linalg.norm(Y - c, axis=-1) / r) * e(Y @ k)
        return out

    @property
    def box(self):
        if len(self.centers) == 0:
            return [(0.0, 0.0)] * self.d
        lo = (self.centers - self.radii[:, None]).min(0)
        hi = (self.centers + self.radii[:, None]).max(0)
        return list(zip(lo, hi))

    @property
    def rate(self) -> float:
        # modulation plus one cycle per bump radius for the amplitude
        return float(np.max(np.linalg.norm(self.freqs, axis=1) + 1.0 / self.radii)) if len(self.radii) else 0.0

    @property
    def is_zero(self) -> bool:
        return len(self.coefs) == 0 or not np.any(self.coefs)

    def scaled(self, R: float) -> "BumpData":
        """``g(y) = f(R y)``."""
        return BumpData(self.centers / R, self.radii / R, self.freqs * R, self.coefs)

    def __add__(self, other: "BumpData") -> "BumpData":
        return BumpData(np.vstack([self.centers, other.centers]), np.concatenate([self.radii, other.radii]),
                        np.vstack([self.freqs, other.freqs]), np.concatenate([self.coefs, other.coefs]))

    def __mul__(self, s) -> "BumpData":
        return BumpData(self.centers, self.radii, self.freqs, self.coefs * s)

    __rmul__ = __mul__


def random_data(seed: int, d: int, center, radius: float, atoms: int = 3, kmax: float = 1.0) -> BumpData:
    """Seeded sum of ``atoms`` modulated bumps inside ``B_radius(center)``."""
    rng = make_rng(seed, 71)
    center = np.asarray(center, float)
    rad = radius * rng.uniform(0.4, 0.6, atoms)
    dirs = rng.normal(size=(atoms, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    offs = dirs * ((radius - rad) * rng.random(atoms))[:, None]
    freqs = rng.uniform(-kmax, kmax, (atoms, d)) / np.sqrt(d)
    coefs = rng.normal(size=atoms) + 1j * rng.normal(size=atoms)
    return BumpData(center + offs, rad, freqs, coefs)


def zero_data(d: int) -> BumpData:
    return BumpData(np.zeros((0, d)), np.zeros(0), np.zeros((0, d)), np.zeros(0))


# ---------------------------------------------------------------- operators

def _apply(f: BumpData, points, phase_amp, rate, box, order, budget):
    pts = np.atleast_2d(np.asarray(points, float))
    if f.is_zero:
        return np.zeros(len(pts), complex)
    Y, W = _tensor_rule(box, rate, order, budget)
    FW = f(Y) * W
    keep = FW != 0
    Y, FW = Y[keep], FW[keep]
    out = np.empty(len(pts), complex)
    for i, p in enumerate(pts):
        ph, amp = phase_amp(p, Y)
        out[i] = np.sum(e(ph) * amp * FW)
    return out


def _unorm(u):
    return np.linalg.norm(u, axis=-1)


def T_operator(f: BumpData, points, spec: KernelSpec, order: int = 8, budget: int = QUAD_BUDGET):
    """``Tf(x, t) = int e(t |(x-y)/t|^beta) psi((x-y)/t) f(y) dy`` at points ``(x, t)``."""
    b = spec.beta

    def pa(p, Y):
        x, t = p[:-1], p[-1]
        u = _unorm((x - Y) / t)
        amp = spec.psi_radial(u)
        return t * np.where(amp > 0, u, 1.0) ** b, amp
    return _apply(f, points, pa, spec.phase_rate() + f.rate, f.box, order, budget)


def T_tilde(f: BumpData, points, spec: KernelSpec, order: int = 8, budget: int = QUAD_BUDGET):
    """``T~f(x, t) = int e(t^{-1} |x - t y|^beta) psi(x - t y) f(y) dy``."""
    b = spec.beta

    def pa(p, Y):
        x, t = p[:-1], p[-1]
        u = _unorm(x - t * Y)
        amp = spec.psi_radial(u)
        return np.where(amp > 0, u, 1.0) ** b / t, amp
    # the y-gradient of t^{-1}|x - t y|^beta does not depend on t
    return _apply(f, points, pa, spec.phase_rate() + f.rate, f.box, order, budget)


def ER_operator(g: BumpData, R: float, spec: KernelSpec, points, order: int = 8,
                budget: int = QUAD_BUDGET):
    """``E_R g(x, t) = int e((R^2/t) |(x - t y)/R|^beta) psi((x - t y)/R) g(y) dy``."""
    b = spec.beta

    def pa(p, Y):
        x, t = p[:-1], p[-1]
        u = _unorm((x - t * Y) / R)
        amp = spec.psi_radial(u)
        return (R * R / t) * np.where(amp > 0, u, 1.0) ** b, amp
    return _apply(g, points, pa, R * spec.phase_rate() + g.rate, g.box, order, budget)


def rescaling_check(f: BumpData, R: float, spec: KernelSpec, points, order: int = 8) -> float:
    """Max relative error of ``T~f(x/R, t/R^2) = R^{n-1} E_R g(x, t)``, ``g(y) = f(R y)``."""
    pts = np.atleast_2d(np.asarray(points, float))
    lhs_pts = np.column_stack([pts[:, :-1] / R, pts[:, -1] / R ** 2])
    lhs = T_tilde(f, lhs_pts, spec, order)
    rhs = R ** spec.d * ER_operator(f.scaled(R), R, spec, pts, order)
    scale = np.abs(lhs).max()
    return float(np.abs(lhs - rhs).max() / scale) if scale > 0 else float(np.abs(rhs).max())


# ---------------------------------------------------------------- chain check

@dataclass
class CheckLine:
    name: str
    value: float
    contract: str
    passed: bool

    def __str__(self):
        return f"{self.name}: value={self.value:.6g} contract={self.contract} {'PASS' if self.passed else 'FAIL'}"


def _jittered(box, counts, rng):
    axes = []
    for (lo, hi), m in zip(box, counts):
        axes.append(lo + (hi - lo) * (np.arange(m) + 0.5) / m)
    G = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(box))
    steps = np.array([(hi - lo) / m for (lo, hi), m in zip(box, counts)])
    G += (rng.random(G.shape) - 0.5) * steps
    return G, float(np.prod(steps))


def _lp_sample(op, box, counts, mask_fn, p, rng):
    G, cell = _jittered(box, counts, rng)
    G = G[mask_fn(G)]
    if len(G) == 0:
        return 0.0
    vals = op(G)
    return float((np.sum(np.abs(vals) ** p) * cell) ** (1.0 / p))


def pseudo_conformal_chain_check(f: BumpData, R: float, spec: KernelSpec, p: float = 4.0,
                                 identity_points: int = 100, counts=None, seed: int = 0,
                                 order: int = 8):
    """Report of the pseudo-conformal chain.

    (a) ``Tf(x, t) = T~f(x/t, 1/t)`` at ``identity_points`` seeded points of
    ``B_R x [R/2, R]``, as ``max |diff| / max |Tf|``.
    (b) ``||Tf||_p / (R^{(n+1)/p} ||T~f||_p)`` with the left norm over
    ``B_R x [R/2, R]`` and the right over its image
    ``{(X, tau): tau in [1/R, 2/R], |X| <= R tau}``; both norms use
    independent jittered grids.  The Jacobian ``t^{-(n+1)}`` puts the exact
    ratio in ``[2^{-(n+1)/p}, 1]``.
    (c) for information, the same ratio with the right norm over
    ``[0,1]^{n-1} x [1/(2R), 1/R]``.
    """
    d, n = spec.d, spec.n
    rng = make_rng(seed, 97)
    # (a) identity
    U = rng.normal(size=(identity_points, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    X = U * (R * rng.random(identity_points) ** (1.0 / d))[:, None]
    t = rng.uniform(R / 2, R, identity_points)
    pts = np.column_stack([X, t])
    lhs = T_operator(f, pts, spec, order)
    rhs = T_tilde(f, np.column_stack([X / t[:, None], 1.0 / t]), spec, order)
    scale = np.abs(lhs).max()
    ident = float(np.abs(lhs - rhs).max() / scale) if scale > 0 else float(np.abs(rhs).max())
    # (b) norms
    counts = counts or ((8,) * d + (4,))
    tf_norm = _lp_sample(lambda G: T_operator(f, G, spec, order),
                         [(-R, R)] * d + [(R / 2, R)], counts,
                         lambda G: np.linalg.norm(G[:, :-1], axis=1) <= R, p, rng)
    tt_norm = _lp_sample(lambda G: T_tilde(f, G, spec, order),
                         [(-2.0, 2.0)] * d + [(1.0 / R, 2.0 / R)], counts,
                         lambda G: np.linalg.norm(G[:, :-1], axis=1) <= R * G[:, -1], p, rng)
    lit_norm = _lp_sample(lambda G: T_tilde(f, G, spec, order),
                          [(0.0, 1.0)] * d + [(0.5 / R, 1.0 / R)], counts,
                          lambda G: np.ones(len(G), bool), p, rng)
    J = R ** ((n + 1) / p)
    ratio = tf_norm / (J * tt_norm) if tt_norm > 0 else (0.0 if tf_norm == 0 else np.inf)
    lit = tf_norm / (J * lit_norm) if lit_norm > 0 else float("nan")
    lo, hi = 2 ** (-(n + 1) / p) / 4, 4 * 2 ** ((n + 1) / p)
    zero = f.is_zero
    return [
        CheckLine("identity_T_Ttilde", ident, "<= 1e-8", ident <= 1e-8),
        CheckLine("norm_ratio", ratio, f"in [{lo:.4g}, {hi:.4g}]", zero or (lo <= ratio <= hi)),
        CheckLine("norm_ratio_literal_region", lit, "informational", True),
    ]
