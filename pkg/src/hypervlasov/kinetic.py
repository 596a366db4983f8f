"""Vlasov fields transported by characteristics and their velocity moments.

A solution of the free transport equation is f(t, x, v) = f0(phi_{-t}(x, v)).  The
spatial density is the fiber integral

    rho(t, x) = int f(t, x, v) dvol(v) = int int f(t, x, E, phi) E dE dphi

in fiber polar coordinates v = E (sin phi e_r + cos phi e_theta), with e_theta =
d_theta / psi.  Those coordinates are parallel along radial lines, which is what
makes the radial horizontal derivative a plain d/dr under the integral.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .flow import IntegratorConfig, transport_arrays
from .geometry import PhasePoint, SurfaceMetric, TWO_PI, smoothstep5
from .variational import differential_matrix, frame_basis_arrays, fundamental_solutions

# backward characteristics only need to land in the right support cell
DENSITY_CONFIG = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
SAFETY = 1.5
GL_ORDER = 6
FD_STEP = 1e-4

_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)


def _wrap(x):
    return (x + math.pi) % TWO_PI - math.pi


_QUARTER = 0.5 * math.pi
# exact (sin, cos) at multiples of pi/2, indexed by k mod 4
_QUARTER_SC = ((0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0))


def _sin_cos(center, delta):
    """(sin, cos) of center + delta without forming the sum.

    Fiber angles are stored as offsets from a window centre so that windows a few
    ulps wide around the radial direction keep full relative precision.
    """
    k = round(center / _QUARTER)
    if k * _QUARTER == center:
        sc, cc = _QUARTER_SC[k % 4]
    else:
        sc, cc = math.sin(center), math.cos(center)
    sd, cd = np.sin(delta), np.cos(delta)
    return sc * cd + cc * sd, cc * cd - sc * sd


@dataclass(frozen=True)
class Bump:
    """Plateau profile on [lo, hi] with quintic ramps of the given widths.

    A zero ramp width leaves that side as a hard edge, used for the E = 0 floor of
    polynomial-decay data where the velocity measure already vanishes.  Periodic
    bumps are compared against their centre on the circle; a periodic range of 2 pi
    or more means "no restriction".
    """

    lo: float
    hi: float
    ramp_lo: float
    ramp_hi: float
    periodic: bool = False

    @property
    def full(self) -> bool:
        return self.periodic and self.hi - self.lo >= TWO_PI

    def __call__(self, x):
        """Return (value, derivative)."""
        x = np.asarray(x, dtype=float)
        if self.full:
            return np.ones_like(x), np.zeros_like(x)
        if self.periodic:
            c = 0.5 * (self.lo + self.hi)
            x = c + _wrap(x - c)
        one, zero = np.ones_like(x), np.zeros_like(x)
        if self.ramp_lo > 0.0:
            s1, d1, _ = smoothstep5((x - self.lo) / self.ramp_lo)
            d1 = d1 / self.ramp_lo
        else:
            s1, d1 = np.where(x >= self.lo, one, zero), zero
        if self.ramp_hi > 0.0:
            s2, d2, _ = smoothstep5((self.hi - x) / self.ramp_hi)
            d2 = -d2 / self.ramp_hi
        else:
            s2, d2 = np.where(x <= self.hi, one, zero), zero
        return s1 * s2, d1 * s2 + s1 * d2

    def inside(self, x):
        """Open-support indicator."""
        x = np.asarray(x, dtype=float)
        if self.full:
            return np.ones(x.shape, dtype=bool)
        if self.periodic:
            c = 0.5 * (self.lo + self.hi)
            x = c + _wrap(x - c)
        lo_ok = x > self.lo if self.ramp_lo > 0.0 else x >= self.lo
        hi_ok = x < self.hi if self.ramp_hi > 0.0 else x <= self.hi
        return lo_ok & hi_ok


@dataclass(frozen=True)
class DistributionSpec:
    """f0 = amplitude * B_r(r) * B_theta(theta) * B_E(E) * B_phi(phi).

    Each factor is a plateau bump whose ramps take ``ramp`` of the range width on
    either side.  ``phi_range=None`` (or a range of 2 pi) leaves the fiber angle
    free.  The lower E ramp is dropped when ``e_range[0] == 0``.
    """

    r_range: tuple[float, float] = (1.0, 2.0)
    theta_range: tuple[float, float] = (-0.5, 0.5)
    e_range: tuple[float, float] = (0.5, 1.0)
    phi_range: tuple[float, float] | None = None
    amplitude: float = 1.0
    ramp: float = 0.1

    def __post_init__(self):
        (r0, r1), (e0, e1) = self.r_range, self.e_range
        if not 0.0 < r0 < r1:
            raise ValueError(f"r_range must satisfy 0 < r0 < r1, got {self.r_range}")
        if not 0.0 <= e0 < e1:
            raise ValueError(f"e_range must satisfy 0 <= E0 < E1, got {self.e_range}")
        if self.theta_range[1] <= self.theta_range[0]:
            raise ValueError(f"empty theta_range {self.theta_range}")
        if self.phi_range is not None and self.phi_range[1] <= self.phi_range[0]:
            raise ValueError(f"empty phi_range {self.phi_range}")
        if not 0.0 < self.ramp <= 0.5:
            raise ValueError(f"ramp must lie in (0, 0.5], got {self.ramp}")
        if self.amplitude < 0.0:
            raise ValueError("amplitude must be nonnegative")

    @property
    def alpha(self) -> float:
        return float(self.e_range[0])

    @property
    def e_max(self) -> float:
        return float(self.e_range[1])

    @property
    def spatial_bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return tuple(self.r_range), tuple(self.theta_range)

    def _bumps(self):
        return _bumps_for(self)

    def rotated(self, angle: float) -> "DistributionSpec":
        th0, th1 = self.theta_range
        return DistributionSpec(self.r_range, (th0 + angle, th1 + angle), self.e_range, self.phi_range, self.amplitude, self.ramp)

    def angular_momentum_bound(self, metric: SurfaceMetric) -> float:
        """L = sup |l| over the support, from a fine sample of (r, phi) at E = E1."""
        return _l_bound(self, metric)

    def value(self, metric: SurfaceMetric, r, theta, v_r, v_theta):
        """f0 at chart phase points (arrays broadcast)."""
        br, bt, be, bp = self._bumps()
        psi = metric.psi(r)
        e = np.hypot(v_r, psi * v_theta)
        phi = np.arctan2(v_r, psi * v_theta)
        return self.amplitude * br(r)[0] * bt(theta)[0] * be(e)[0] * bp(phi)[0]

    def positive(self, metric: SurfaceMetric, r, theta, v_r, v_theta):
        """Indicator of f0 > 0."""
        if self.amplitude == 0.0:
            return np.zeros(np.broadcast(r, theta, v_r, v_theta).shape, dtype=bool)
        br, bt, be, bp = self._bumps()
        psi = metric.psi(r)
        e = np.hypot(v_r, psi * v_theta)
        phi = np.arctan2(v_r, psi * v_theta)
        return br.inside(r) & bt.inside(theta) & be.inside(e) & bp.inside(phi)

    def gradient(self, metric: SurfaceMetric, y):
        """Chart gradient (4, n) of f0 at the columns of y."""
        br, bt, be, bp = self._bumps()
        r, th, vr, vt = y
        psi, dpsi, _ = metric.warp(r)
        w = psi * vt
        e = np.hypot(vr, w)
        phi = np.arctan2(vr, w)
        fr, dfr = br(r)
        ft, dft = bt(th)
        fe, dfe = be(e)
        fp, dfp = bp(phi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_e = np.where(e > 0.0, 1.0 / e, 0.0)
        inv_e2 = inv_e * inv_e
        # dE = (vr dvr + w dw) / E and dphi = (w dvr - vr dw) / E^2 with dw = psi' vt dr + psi dvt
        de = np.array([w * dpsi * vt * inv_e, 0.0 * r, vr * inv_e, w * psi * inv_e])
        dp = np.array([-vr * dpsi * vt * inv_e2, 0.0 * r, w * inv_e2, -vr * psi * inv_e2])
        g = fr * ft * (dfe * fp * de + fe * dfp * dp)
        g[0] += dfr * ft * fe * fp
        g[1] += fr * dft * fe * fp
        return self.amplitude * g

    def box_area(self) -> float:
        """Velocity-space area of the declared (E, phi) box."""
        e0, e1 = self.e_range
        width = TWO_PI if self.phi_range is None else min(TWO_PI, self.phi_range[1] - self.phi_range[0])
        return 0.5 * (e1 * e1 - e0 * e0) * width


@lru_cache(maxsize=64)
def _bumps_for(spec: DistributionSpec):
    def mk(rng, periodic=False, hard_lo=False):
        lo, hi = rng
        w = spec.ramp * (hi - lo)
        return Bump(lo, hi, 0.0 if hard_lo else w, w, periodic)

    phi = (-math.pi, math.pi) if spec.phi_range is None else spec.phi_range
    return (
        mk(spec.r_range),
        mk(spec.theta_range, periodic=True),
        mk(spec.e_range, hard_lo=spec.e_range[0] == 0.0),
        Bump(phi[0], phi[1], spec.ramp * (phi[1] - phi[0]), spec.ramp * (phi[1] - phi[0]), True),
    )


@lru_cache(maxsize=64)
def _l_bound(spec: DistributionSpec, metric: SurfaceMetric) -> float:
    r = np.linspace(*spec.r_range, 257)
    lo, hi = (-math.pi, math.pi) if spec.phi_range is None else spec.phi_range
    phi = np.linspace(lo, hi, 2049)
    cos_max = float(np.abs(np.cos(phi)).max())
    return float(metric.psi(r).max()) * spec.e_max * cos_max


def f_arrays(spec: DistributionSpec, metric: SurfaceMetric, t: float, y, cfg: IntegratorConfig = DENSITY_CONFIG):
    """f(t) at the columns of y (chart variables)."""
    if spec.amplitude == 0.0:
        return np.zeros(np.asarray(y).shape[1])
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    if t == 0.0:
        return spec.value(metric, *y)
    back, _, _ = transport_arrays(metric, y[0], y[1], y[2], y[3], [-t], cfg)
    return spec.value(metric, *back[0])


def evaluate_f(spec: DistributionSpec, metric: SurfaceMetric, t: float, p: PhasePoint, cfg: IntegratorConfig = DENSITY_CONFIG) -> float:
    """f(t, p) = f0(phi_{-t}(p)); closed-form flow on the hyperbolic plane."""
    return float(f_arrays(spec, metric, t, p.as_array()[:, None], cfg)[0])


def _pullback(spec, metric, t, y, src, ab, g0=None):
    """Chart gradient of f(t) at y from the backward images src and (a, a', b, b') at -t."""
    n = y.shape[1]
    if g0 is None:
        g0 = spec.gradient(metric, src)
    grad = np.zeros((4, n))
    live = np.any(g0 != 0.0, axis=0)
    if not live.any():
        return grad
    a, ad, b, bd = (ab[k, live] for k in range(4))
    m = np.zeros((live.sum(), 4, 4))
    m[:, 0, 0] = 1.0
    m[:, 0, 2] = -t
    m[:, 2, 2] = 1.0
    m[:, 1, 1], m[:, 1, 3], m[:, 3, 1], m[:, 3, 3] = a, b, ad, bd
    l_src = frame_basis_arrays(metric, src[:, live])
    l_z = frame_basis_arrays(metric, y[:, live])
    w = np.einsum("nki,kn->ni", l_src, g0[:, live])
    u = np.einsum("nki,nk->ni", m, w)
    grad[:, live] = np.linalg.solve(np.transpose(l_z, (0, 2, 1)), u[:, :, None])[:, :, 0].T
    return grad


def gradient_arrays(spec: DistributionSpec, metric: SurfaceMetric, t: float, y, cfg: IntegratorConfig = DENSITY_CONFIG):
    """(f, chart gradient of f(t)) at the columns of y via the flow differential.

    grad f(t)(z) = d(phi_{-t})(z)^T grad f0(phi_{-t} z), with d(phi_{-t}) = L_y M L_z^{-1}
    assembled from the fundamental normal Jacobi solutions.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[1]
    if spec.amplitude == 0.0:
        return np.zeros(n), np.zeros((4, n))
    if t == 0.0:
        return spec.value(metric, *y), spec.gradient(metric, y)
    states, ab, log_scale = fundamental_solutions(metric, y[0], y[1], y[2], y[3], [-t], cfg)
    src = states[0]
    return spec.value(metric, *src), _pullback(spec, metric, t, y, src, ab[0] * np.exp(log_scale[0]))


def horizontal_derivatives(metric: SurfaceMetric, y, grad):
    """(Hor(d_r) f, Hor(d_theta) f / psi) from a chart gradient."""
    psi, dpsi, _ = metric.warp(y[0])
    vr, vt = y[2], y[3]
    dr = grad[0] - (dpsi / psi) * vt * grad[3]
    dth = grad[1] + psi * dpsi * vt * grad[2] - (dpsi / psi) * vr * grad[3]
    return dr, dth / psi


def fiber_derivatives(metric: SurfaceMetric, y, grad):
    """x-derivatives of f at fixed fiber polar coordinates (E, phi), angular one over psi.

    The radial one equals Hor(d_r) f.  The angular one drops the fiber rotation part
    of Hor(d_theta) f, an exact phi-derivative that integrates to zero over the
    fiber but would dominate the L1 size of the integrand.
    """
    psi, dpsi, _ = metric.warp(y[0])
    return grad[0] - (dpsi / psi) * y[3] * grad[3], grad[1] / psi


def asymptotic_angular_bound(L: float, c: float, alpha: float, t: float) -> float:
    """Asymptotic bound L / (c e^{alpha t}) on |v_theta psi(r)| for D_alpha data."""
    return L / (c * math.exp(alpha * t))


@dataclass(frozen=True)
class SupportBox:
    """Region of T_xM containing Omega(t, x) = {v : f(t, x, v) > 0}.

    ``vr_sign`` is +1 when only outgoing velocities can carry mass, 0 otherwise.
    ``psi_vtheta_bound`` bounds |psi v_theta| = E |cos phi|.  ``analytic`` is False
    when no bound beyond the energy window applies and the scan must cover the fiber.
    Each phi window is (centre, lo, hi) with lo and hi offsets from the centre.
    """

    e_range: tuple[float, float]
    vr_sign: int
    vr_interval: tuple[float, float]
    psi_vtheta_bound: float
    analytic: bool
    phi_windows: tuple[tuple[float, float, float], ...] = ()

    @property
    def empty(self) -> bool:
        return self.e_range[1] <= self.e_range[0]

    def contains(self, e, phi) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        phi = np.asarray(phi, dtype=float)
        ok = (e >= self.e_range[0]) & (e <= self.e_range[1])
        ok &= np.abs(e * np.cos(phi)) <= self.psi_vtheta_bound * (1 + 1e-12)
        vr = e * np.sin(phi)
        if self.vr_sign > 0:
            ok &= vr >= 0.0
        inw = np.zeros(ok.shape, dtype=bool)
        for c, lo, hi in self.phi_windows:
            d = _wrap(phi - c)
            inw |= (d >= lo - 1e-12) & (d <= hi + 1e-12)
        return ok & inw


def support_box(spec: DistributionSpec, metric: SurfaceMetric, t: float, x) -> SupportBox:
    """Velocity box containing Omega(t, x).

    Two facts hold on every metric of the family and are used exactly:

    * the backward geodesic from x has length E t and ends in the spatial support,
      so E t lies between the distance from x to the support annulus and r_x + r1;
    * l is conserved and |l| <= L on the support, so |psi(r_x) v_theta| <= L / psi(r_x).

    Outside r1 the radial coordinate is convex along geodesics, hence only outgoing
    velocities (v_r > 0) can come from the support.  The angular bound is inflated
    by the safety factor when alpha > 0 and x lies outside the support.
    """
    r_x = float(x[0])
    e0, e1 = spec.e_range
    r0, r1 = spec.r_range
    if t == 0.0:
        if spec.phi_range is None:
            window = (0.0, -math.pi, math.pi)
        else:
            lo, hi = spec.phi_range
            c = 0.5 * (lo + hi)
            window = (c, lo - c, hi - c)
        return SupportBox((e0, e1), 0, (0.0, e1), e1, False, (window,))
    d_lo = max(r_x - r1, r0 - r_x, 0.0)
    e_lo = max(e0, d_lo / t * (1 - 1e-9))
    e_hi = min(e1, (r_x + r1) / t * (1 + 1e-9))
    if e_hi <= e_lo:
        return SupportBox((e_lo, e_lo), 0, (0.0, 0.0), 0.0, True, ())
    far = r_x > r1
    bound = spec.angular_momentum_bound(metric) / float(metric.psi(r_x))
    if spec.alpha > 0.0 and far:
        bound *= SAFETY
    bound = min(bound, e_hi)
    sign = 1 if far else 0
    # |cos phi| <= bound / E is widest at the smallest E of the window
    half = math.asin(min(1.0, bound / e_lo)) if e_lo > 0.0 else 0.5 * math.pi
    analytic = half < 0.5 * math.pi or sign > 0
    if half >= _QUARTER:
        windows = ((_QUARTER, -_QUARTER, _QUARTER),) if sign > 0 else ((0.0, -math.pi, math.pi),)
    elif sign > 0:
        windows = ((_QUARTER, -half, half),)
    else:
        windows = ((_QUARTER, -half, half), (-_QUARTER, -half, half))
    vr_lo = math.sqrt(max(0.0, e_lo * e_lo - bound * bound))
    return SupportBox((e_lo, e_hi), sign, (vr_lo, e_hi), bound, analytic, windows)


def _fiber_states(metric, x, e, phi, center=0.0):
    e = np.asarray(e, dtype=float)
    sn, cs = _sin_cos(center, np.asarray(phi, dtype=float))
    psi = float(metric.psi(x[0]))
    n = e.size
    return np.array([np.full(n, float(x[0])), np.full(n, float(x[1])), e * sn, e * cs / psi])


def backward_tensor(metric, x, t, e, phi, cfg, jacobi=False, center=0.0):
    """Backward images of the tensor grid e x phi of fiber velocities at x.

    Nodes sharing a fiber angle lie on one unit-speed geodesic: phi_{-t}(x, E u) is
    phi_{-E t}(x, u) with the velocity scaled by E.  So the integrator runs one
    trajectory per angle and reads the energies off as output arclengths.  Jacobi
    solutions rescale as a(t) = a^(E t), a'(t) = E a^'(E t), b(t) = b^(E t) / E,
    b'(t) = b^'(E t).  ``phi`` holds offsets from ``center``.  Returns (y, src, ab)
    flattened in (E, phi) order; ab is None unless ``jacobi``.
    """
    e = np.asarray(e, dtype=float)
    phi = np.asarray(phi, dtype=float)
    ee, pp = np.meshgrid(e, phi, indexing="ij")
    y = _fiber_states(metric, x, ee.ravel(), pp.ravel(), center)
    if t == 0.0:
        return y, y, None
    if metric.is_hyperbolic:
        # closed form is cheap per node
        if jacobi:
            states, ab, log_scale = fundamental_solutions(metric, y[0], y[1], y[2], y[3], [-t], cfg)
            return y, states[0], ab[0] * np.exp(log_scale[0])
        back, _, _ = transport_arrays(metric, y[0], y[1], y[2], y[3], [-t], cfg)
        return y, back[0], None
    u = _fiber_states(metric, x, np.ones_like(phi), phi, center)
    arcs = -t * e
    if jacobi:
        states, ab, log_scale = fundamental_solutions(metric, u[0], u[1], u[2], u[3], arcs, cfg)
        ab = ab * np.exp(log_scale)[:, None, :]
        ev = e[:, None]
        ab = np.stack([ab[:, 0], ab[:, 1] * ev, ab[:, 2] / ev, ab[:, 3]], axis=1)
        ab = np.transpose(ab, (1, 0, 2)).reshape(4, -1)
    else:
        states, _, _ = transport_arrays(metric, u[0], u[1], u[2], u[3], arcs, cfg)
        ab = None
    src = np.transpose(states, (1, 0, 2)).copy()
    src[2:] *= e[None, :, None]
    return y, src.reshape(4, -1), ab


# ---------------------------------------------------------------- scan and zoom

SCAN_E, SCAN_PHI = 24, 64


def _positive_grid(spec, metric, t, x, ec, pc, cfg, center=0.0):
    _, src, _ = backward_tensor(metric, x, t, ec, pc, cfg, center=center)
    return spec.positive(metric, *src).reshape(ec.size, pc.size)


def _scan(spec, metric, t, x, box, cfg, ne=SCAN_E, nphi=SCAN_PHI):
    """Positive cells of a midpoint grid over each phi window.

    Returns zoomed rectangles (E_a, E_b, phi_a, phi_b, centre), phi offsets from the
    window centre.
    """
    if box.empty or spec.amplitude == 0.0:
        return []
    e_lo, e_hi = box.e_range
    de = (e_hi - e_lo) / ne
    ec = e_lo + de * (np.arange(ne) + 0.5)
    rects = []
    for c, lo, hi in box.phi_windows:
        dp = (hi - lo) / nphi
        pc = lo + dp * (np.arange(nphi) + 0.5)
        pos = _positive_grid(spec, metric, t, x, ec, pc, cfg, c)
        if not pos.any():
            continue
        rows = np.nonzero(pos.any(axis=1))[0]
        ea = max(e_lo, e_lo + de * (rows[0] - 1))
        eb = min(e_hi, e_lo + de * (rows[-1] + 2))
        cols = pos.any(axis=0)
        circular = hi - lo >= TWO_PI - 1e-12
        if circular and not cols.all():
            # start the rectangle right after the longest run of empty columns
            k = np.nonzero(cols)[0]
            gaps = np.diff(np.concatenate([k, [k[0] + nphi]]))
            g = int(np.argmax(gaps))
            start, stop = k[(g + 1) % k.size], k[g]
            if stop < start:
                stop += nphi
            pa, pb = lo + dp * (start - 1), lo + dp * (stop + 2)
        elif circular:
            pa, pb = lo, hi
        else:
            k = np.nonzero(cols)[0]
            pa, pb = max(lo, lo + dp * (k[0] - 1)), min(hi, lo + dp * (k[-1] + 2))
        rects.append((ea, eb, pa, pb, c))
    return rects


# ---------------------------------------------------------------- quadrature


@dataclass
class QuadResult:
    values: np.ndarray
    error: np.ndarray
    nodes: int
    converged: bool
    level: int = 0
    rects: list = field(default_factory=list, repr=False)


def _gl_nodes(lo, hi, npanel):
    edges = np.linspace(lo, hi, npanel + 1)
    mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
    return (mid[:, None] + half[:, None] * _GL_X).ravel(), (half[:, None] * _GL_W).ravel()


def _base_panels(rect):
    ea, eb, pa, pb, _ = rect
    return 2, max(2, min(8, int(math.ceil(4 * (pb - pa) / math.pi))))


def _integrand_tensor(spec, metric, t, x, e, phi, cfg, with_grad, center=0.0):
    y, src, ab = backward_tensor(metric, x, t, e, phi, cfg, jacobi=with_grad and t != 0.0, center=center)
    fv = spec.value(metric, *src)
    if not with_grad:
        return fv[None, :]
    g0 = spec.gradient(metric, src)
    grad = g0 if t == 0.0 else _pullback(spec, metric, t, y, src, ab, g0)
    dr, _ = fiber_derivatives(metric, y, grad)
    # rotations commute with the flow and shift theta only, so at fixed (r, E, phi)
    # d_theta f(t) is d_theta f0 at the backward image; the frame solve in the
    # pullback loses this component once psi(r) is large
    dth = g0[1] / float(metric.psi(x[0]))
    return np.vstack([fv, dr, dth])


def tensor_rule(spec, metric, t, x, rects, level, cfg, with_grad=False):
    """Composite Gauss-Legendre at dyadic level ``level``: (integrals, L1 sizes, nodes)."""
    ncomp = 3 if with_grad else 1
    val, l1, nodes = np.zeros(ncomp), np.zeros(ncomp), 0
    for rect in rects:
        ne, nphi = _base_panels(rect)
        e, we = _gl_nodes(rect[0], rect[1], ne << level)
        ph, wp = _gl_nodes(rect[2], rect[3], nphi << level)
        w = ((we * e)[:, None] * wp[None, :]).ravel()
        vals = _integrand_tensor(spec, metric, t, x, e, ph, cfg, with_grad, rect[4])
        val += vals @ w
        l1 += np.abs(vals) @ w
        nodes += w.size
    return val, l1, nodes


def adaptive_fiber_quadrature(spec, metric, t, x, rects, tol, cfg, with_grad=False, grad_tol=None, max_level=6):
    """Tensor Gauss-Legendre over rectangles in (E, phi) with dyadic refinement.

    Every level halves all panels; the difference of two successive levels
    estimates the error of the coarser one and the finer value is kept.  The loop
    stops once that estimate is below tol times the L1 size of each component
    (``grad_tol`` for the two derivative components) or at ``max_level``.  A
    derivative also counts as resolved when its error is below tol times the L1
    size of the density, i.e. below the density's own accuracy per unit length.
    """
    ncomp = 3 if with_grad else 1
    if not rects:
        return QuadResult(np.zeros(ncomp), np.zeros(ncomp), 0, True, 0, [])
    tols = np.full(ncomp, tol)
    if with_grad:
        tols[1:] = tol if grad_tol is None else grad_tol
    prev, _, nodes = tensor_rule(spec, metric, t, x, rects, 0, cfg, with_grad)
    level = 0
    while True:
        level += 1
        cur, l1, n = tensor_rule(spec, metric, t, x, rects, level, cfg, with_grad)
        nodes += n
        err = np.abs(cur - prev)
        # components that vanish identically stop at roundoff of the density's size;
        # a derivative error below tol * rho per unit length is negligible next to rho itself
        floor = np.full(ncomp, 1e-13 * l1[0])
        floor[1:] = tol * l1[0]
        ok = bool(np.all((err <= tols * l1) | (err <= floor)))
        if ok or level >= max_level:
            return QuadResult(cur, err, nodes, ok, level, list(rects))
        prev = cur


def spatial_density(
    spec: DistributionSpec,
    metric: SurfaceMetric,
    t: float,
    x,
    tol: float = 1e-6,
    cfg: IntegratorConfig = DENSITY_CONFIG,
) -> tuple[float, float]:
    """rho(t, x) and its estimated absolute quadrature error."""
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    box = support_box(spec, metric, t, x)
    q = adaptive_fiber_quadrature(spec, metric, t, x, _scan(spec, metric, t, x, box, cfg), tol, cfg)
    if not q.converged:
        warnings.warn(f"density quadrature budget exhausted at t={t}, x={tuple(x)}", RuntimeWarning, stacklevel=2)
    return max(0.0, float(q.values[0])), float(q.error[0])


@dataclass(frozen=True)
class GradientResult:
    drho_dr: float
    drho_dtheta_norm: float
    fd_drho_dr: float
    fd_drho_dtheta_norm: float
    rho: float
    error: tuple[float, float, float]
    nodes: int
    converged: bool = True


def density_gradient(
    spec: DistributionSpec,
    metric: SurfaceMetric,
    t: float,
    x,
    tol: float = 1e-6,
    cfg: IntegratorConfig = DENSITY_CONFIG,
    fd_step: float = FD_STEP,
    cross_check: bool = True,
    grad_tol: float | None = None,
) -> GradientResult:
    """(d_r rho, (1/psi) d_theta rho) by the transported gradient, with the FD cross-check.

    The finite differences reuse the final rule of the adaptive pass so that both
    neighbours are integrated on the same fixed nodes.
    """
    box = support_box(spec, metric, t, x)
    rects = _scan(spec, metric, t, x, box, cfg)
    q = adaptive_fiber_quadrature(spec, metric, t, x, rects, tol, cfg, with_grad=True, grad_tol=grad_tol)
    fd_r = fd_th = float("nan")
    if cross_check:
        r, th = float(x[0]), float(x[1])
        psi = float(metric.psi(r))

        def rho_at(xx):
            return float(tensor_rule(spec, metric, t, xx, rects, q.level, cfg)[0][0]) if rects else 0.0

        fd_r = (rho_at((r + fd_step, th)) - rho_at((r - fd_step, th))) / (2 * fd_step)
        fd_th = (rho_at((r, th + fd_step)) - rho_at((r, th - fd_step))) / (2 * fd_step * psi)
    return GradientResult(
        float(q.values[1]),
        float(q.values[2]),
        fd_r,
        fd_th,
        max(0.0, float(q.values[0])),
        tuple(float(v) for v in q.error),
        q.nodes,
        q.converged,
    )


VOLUME_E, VOLUME_PHI = 96, 192


def support_geometry(
    spec: DistributionSpec,
    metric: SurfaceMetric,
    t: float,
    x,
    cfg: IntegratorConfig = DENSITY_CONFIG,
    resolution: tuple[int, int] = (VOLUME_E, VOLUME_PHI),
) -> tuple[float, float]:
    """(volume, angular diameter) of Omega(t, x) by indicator midpoint quadrature.

    The diameter is the largest angle between two detected support velocities,
    measured through the smallest arc containing all their fiber angles.
    """
    box = support_box(spec, metric, t, x)
    rects = _scan(spec, metric, t, x, box, cfg)
    if not rects:
        return 0.0, 0.0
    ne, nphi = resolution
    vol = 0.0
    angles = []
    for ea, eb, pa, pb, c in rects:
        de, dp = (eb - ea) / ne, (pb - pa) / nphi
        ec = ea + de * (np.arange(ne) + 0.5)
        pc = pa + dp * (np.arange(nphi) + 0.5)
        pos = _positive_grid(spec, metric, t, x, ec, pc, cfg, c)
        vol += float(np.sum(pos * ec[:, None]) * de * dp)
        angles.append(c + np.broadcast_to(pc, pos.shape)[pos])
    ang = np.unique(np.mod(np.concatenate(angles), TWO_PI))
    if ang.size == 0:
        return 0.0, 0.0
    if ang.size == 1:
        return vol, 0.0
    gaps = np.diff(np.concatenate([ang, [ang[0] + TWO_PI]]))
    return vol, float(min(math.pi, TWO_PI - gaps.max()))


def _composite_gl(breaks, width):
    """4-point Gauss-Legendre on panels no wider than ``width`` between sorted breakpoints."""
    x4, w4 = np.polynomial.legendre.leggauss(4)
    xs, ws = [], []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        if hi <= lo:
            continue
        edges = np.linspace(lo, hi, max(1, int(math.ceil((hi - lo) / width - 1e-9))) + 1)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        xs.append((mid[:, None] + half[:, None] * x4).ravel())
        ws.append((half[:, None] * w4).ravel())
    return np.concatenate(xs), np.concatenate(ws)


@dataclass(frozen=True)
class MassGrid:
    """Composite 4-point Gauss-Legendre grid for int rho psi dr dtheta.

    ``nr`` and ``ntheta`` are panel counts over the full ranges; ``r_breaks`` are
    extra panel edges, typically the kinks of the initial radial profile.
    """

    r_lo: float
    r_hi: float
    nr: int = 48
    ntheta: int = 64
    theta_lo: float = -math.pi
    theta_hi: float = math.pi
    r_breaks: tuple = ()

    def refined(self) -> "MassGrid":
        return MassGrid(self.r_lo, self.r_hi, 2 * self.nr, 2 * self.ntheta, self.theta_lo, self.theta_hi, self.r_breaks)

    def nodes(self):
        inner = [b for b in self.r_breaks if self.r_lo < b < self.r_hi]
        rb = np.array(sorted({self.r_lo, self.r_hi, *inner}))
        tb = np.array([self.theta_lo, self.theta_hi])
        return (
            _composite_gl(rb, (self.r_hi - self.r_lo) / self.nr),
            _composite_gl(tb, (self.theta_hi - self.theta_lo) / self.ntheta),
        )


def default_mass_grid(spec: DistributionSpec, t: float) -> MassGrid:
    """Covers every point reachable from the support by time t, plus a unit margin."""
    r0, r1 = spec.r_range
    w = spec.ramp * (r1 - r0)
    r_hi = r1 + spec.e_max * t + 1.0
    return MassGrid(0.0, r_hi, nr=max(16, int(math.ceil(4 * r_hi))), ntheta=64, r_breaks=(r0, r0 + w, r1 - w, r1))


def theta_integral(spec: DistributionSpec) -> float:
    """int B_theta over the circle: the range width minus half of each ramp."""
    lo, hi = spec.theta_range
    if hi - lo >= TWO_PI:
        return TWO_PI
    return (hi - lo) * (1.0 - spec.ramp)


def total_mass(
    spec: DistributionSpec,
    metric: SurfaceMetric,
    t: float,
    grid: MassGrid | None = None,
    tol: float = 1e-6,
    cfg: IntegratorConfig = DENSITY_CONFIG,
    threads: int = 1,
    method: str = "symmetric",
) -> float:
    """int rho(t, x) psi(r) dr dtheta, warning when the grid edge carries density.

    ``method="symmetric"`` integrates theta in closed form: rotations commute with
    the flow and f0 factorizes in theta, so int rho(t, r, .) dtheta equals the
    theta-integral of B_theta times the density of the theta-free datum.  Only the
    radial nodes of ``grid`` are used then.  ``method="grid"`` evaluates rho on the
    full tensor grid.
    """
    if method not in ("symmetric", "grid"):
        raise ValueError(f"unknown mass method {method!r}")
    if spec.amplitude == 0.0:
        return 0.0
    grid = grid or default_mass_grid(spec, t)
    (rn, rw), (tn, tw) = grid.nodes()
    rn = np.maximum(rn, 2e-3)
    if method == "symmetric":
        flat = DistributionSpec(spec.r_range, (-math.pi, math.pi), spec.e_range, spec.phi_range, spec.amplitude, spec.ramp)
        rho = np.array(_map(lambda r: spatial_density(flat, metric, t, (r, 0.0), tol, cfg)[0], list(rn), threads))
        if rho.max() > 0.0 and rho[-1] > 1e-10 * rho.max():
            warnings.warn("density does not vanish at the mass-grid boundary", RuntimeWarning, stacklevel=2)
        return float(theta_integral(spec) * np.sum(rw * metric.psi(rn) * rho))
    pts = [(r, th) for r in rn for th in tn]
    vals = _map(lambda p: spatial_density(spec, metric, t, p, tol, cfg)[0], pts, threads)
    rho = np.array(vals).reshape(rn.size, tn.size)
    edge = rho[-1].max()
    if grid.theta_hi - grid.theta_lo < TWO_PI:
        edge = max(edge, rho[:, [0, -1]].max())
    if rho.max() > 0.0 and edge > 1e-10 * rho.max():
        warnings.warn("density does not vanish at the mass-grid boundary", RuntimeWarning, stacklevel=2)
    return float(np.einsum("i,i,ij,j->", rw, metric.psi(rn), rho, tw))


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- grids of probes


@dataclass
class DensityGrid:
    """rho, its frame derivatives and the support geometry on (time, probe) pairs."""

    times: np.ndarray
    probes: list
    rho: np.ndarray
    drho_dr: np.ndarray
    drho_dtheta_norm: np.ndarray
    omega_volume: np.ndarray
    omega_angular_diameter: np.ndarray
    quad_nodes: np.ndarray
    quad_err: np.ndarray
    converged: np.ndarray | None = None

    COLUMNS = ("t", "r", "theta", "rho", "drho_dr", "drho_dtheta_norm", "omega_volume", "omega_angular_diameter", "quad_nodes", "quad_err")

    def rows(self):
        for i, t in enumerate(self.times):
            for j in range(len(self.probes[i])):
                r, th = self.probes[i][j]
                yield (
                    float(t), float(r), float(th), float(self.rho[i, j]), float(self.drho_dr[i, j]),
                    float(self.drho_dtheta_norm[i, j]), float(self.omega_volume[i, j]),
                    float(self.omega_angular_diameter[i, j]), int(self.quad_nodes[i, j]), float(self.quad_err[i, j]),
                )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def sup(self, name: str) -> np.ndarray:
        """Per-time maximum of |statistic| over the probes."""
        return np.abs(getattr(self, name)).max(axis=1)


def evaluate_probe(spec, metric, t, x, tol=1e-6, cfg=DENSITY_CONFIG, geometry=True, grad_tol=None):
    """Per-probe statistics in DensityGrid column order (minus t, r, theta), then the converged flag."""
    g = density_gradient(spec, metric, t, x, tol, cfg, cross_check=False, grad_tol=grad_tol)
    vol, diam = support_geometry(spec, metric, t, x, cfg) if geometry else (float("nan"), float("nan"))
    return g.rho, g.drho_dr, g.drho_dtheta_norm, vol, diam, g.nodes, g.error[0], g.converged


def density_grid(
    spec: DistributionSpec,
    metric: SurfaceMetric,
    times,
    probes,
    tol: float = 1e-6,
    cfg: IntegratorConfig = DENSITY_CONFIG,
    threads: int = 1,
    geometry: bool = True,
    grad_tol: float | None = None,
) -> DensityGrid:
    """Evaluate every probe at every time; ``probes`` is a list (per time) of (r, theta)."""
    times = np.asarray(times, dtype=float)
    jobs = [(i, j, t, p) for i, t in enumerate(times) for j, p in enumerate(probes[i])]
    out = _map(lambda jb: evaluate_probe(spec, metric, jb[2], jb[3], tol, cfg, geometry, grad_tol), jobs, threads)
    shape = (times.size, max(len(p) for p in probes))
    arrs = [np.full(shape, np.nan) for _ in range(7)]
    conv = np.ones(shape, dtype=bool)
    for (i, j, _, _), vals in zip(jobs, out):
        for a, v in zip(arrs, vals[:7]):
            a[i, j] = v
        conv[i, j] = vals[7]
    return DensityGrid(times, [list(p) for p in probes], *arrs, converged=conv)
