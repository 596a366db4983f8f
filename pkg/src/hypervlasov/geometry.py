"""Warped-product surface metrics dr^2 + psi(r)^2 dtheta^2 and their phase-space geometry.

Two metric families are supported:

* ``hyperbolic``: the hyperbolic plane in polar (hyperboloidal) coordinates, psi = sinh r.
* ``warped_ah``: an asymptotically hyperbolic surface with
  psi = sinh r + a * eta(r) * exp(-beta r), where eta is a quintic smoothstep that
  switches the perturbation on between r_cut/2 and r_cut.

Scalar operations take a :class:`PhasePoint`; the ``SurfaceMetric`` methods accept
numpy arrays so the kinetic and flow layers can work on batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

R_MIN = 1e-3
TWO_PI = 2.0 * math.pi
PINCH_MARGIN = 0.05


class ChartError(ValueError):
    """Raised when a query falls outside the polar chart (r <= R_MIN)."""


class DegenerateVectorError(ValueError):
    """Raised when an operation needs a nonzero velocity."""


def smoothstep5(x):
    """Quintic smoothstep 6x^5 - 15x^4 + 10x^3 on [0, 1] with first two derivatives."""
    x = np.clip(x, 0.0, 1.0)
    s = x * x * x * (x * (6.0 * x - 15.0) + 10.0)
    ds = 30.0 * x * x * (x - 1.0) ** 2
    d2s = 60.0 * x * (x - 1.0) * (2.0 * x - 1.0)
    return s, ds, d2s


@dataclass(frozen=True)
class PhasePoint:
    """A point (r, theta, v_r, v_theta) of the tangent bundle in polar coordinates.

    ``v_theta`` is the coordinate rate d(theta)/dt, not the orthonormal component.
    """

    r: float
    theta: float
    v_r: float
    v_theta: float

    def __post_init__(self):
        vals = (self.r, self.theta, self.v_r, self.v_theta)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"non-finite phase point {vals}")
        if self.r <= R_MIN:
            raise ChartError(f"r = {self.r!r} is inside the chart guard r <= {R_MIN}")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)
        object.__setattr__(self, "v_r", float(self.v_r))
        object.__setattr__(self, "v_theta", float(self.v_theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.v_r, self.v_theta])

    @classmethod
    def from_array(cls, a) -> "PhasePoint":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class PhaseTangent:
    """Tangent vector to the tangent bundle, components along (d_r, d_theta, d_vr, d_vtheta)."""

    dr: float
    dtheta: float
    dv_r: float
    dv_theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dr, self.dtheta, self.dv_r, self.dv_theta])

    @classmethod
    def from_array(cls, a) -> "PhaseTangent":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class ChristoffelSymbols:
    """Christoffel symbols Gamma^k_ij of a warped product; the remaining ones vanish."""

    r_rr: float
    r_rtheta: float
    r_thetatheta: float
    theta_rr: float
    theta_rtheta: float
    theta_thetatheta: float

    def as_array(self) -> np.ndarray:
        """Array ``G[k, i, j]`` with index 0 = r and 1 = theta, symmetric in (i, j)."""
        g = np.zeros((2, 2, 2))
        g[0, 0, 0] = self.r_rr
        g[0, 0, 1] = g[0, 1, 0] = self.r_rtheta
        g[0, 1, 1] = self.r_thetatheta
        g[1, 0, 0] = self.theta_rr
        g[1, 0, 1] = g[1, 1, 0] = self.theta_rtheta
        g[1, 1, 1] = self.theta_thetatheta
        return g


@dataclass(frozen=True)
class FramePair:
    """Velocity and its rotation by +90 degrees, both in coordinate components."""

    gamma_dot: tuple[float, float]
    normal: tuple[float, float]
    psi: float

    def normalized(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Components in the orthonormal frame (d_r, d_theta / psi)."""
        (gr, gt), (nr, nt) = self.gamma_dot, self.normal
        return (gr, self.psi * gt), (nr, self.psi * nt)


@dataclass(frozen=True)
class SurfaceMetric:
    """Rotationally symmetric metric dr^2 + psi(r)^2 dtheta^2.

    Use :meth:`hyperbolic` or :meth:`warped_ah` to construct.  For the AH family the
    curvature is sampled at construction and parameter choices that break the
    pinching -kappa1 <= K <= -kappa2 < 0 are rejected unless ``validate=False``.
    """

    kind: str = "hyperbolic"
    a: float = 0.0
    beta: float = 3.0
    r_cut: float = 1.0
    validate: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("hyperbolic", "warped_ah"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "hyperbolic":
            object.__setattr__(self, "a", 0.0)
            return
        if not self.beta > 2.0:
            raise ValueError(f"beta > 2 required for an asymptotically hyperbolic metric, got beta={self.beta}")
        if not self.r_cut > 2.0 * R_MIN:
            raise ValueError(f"r_cut must exceed {2 * R_MIN}, got {self.r_cut}")
        if self.validate:
            r = np.geomspace(R_MIN * 1.0001, 60.0, 4000)
            psi, _, _ = self.warp(r)
            if np.any(psi <= 0.0):
                raise ValueError("warp function psi must stay positive for r > 0")
            k = self.curvature(r)
            if k.max() >= -PINCH_MARGIN:
                raise ValueError(
                    f"curvature pinching violated: max K = {k.max():.4g} >= {-PINCH_MARGIN} "
                    f"for a={self.a}, beta={self.beta}, r_cut={self.r_cut}"
                )

    @classmethod
    def hyperbolic(cls) -> "SurfaceMetric":
        return cls("hyperbolic")

    @classmethod
    def warped_ah(cls, a: float = 0.1, beta: float = 3.0, r_cut: float = 1.0, validate: bool = True) -> "SurfaceMetric":
        return cls("warped_ah", a=a, beta=beta, r_cut=r_cut, validate=validate)

    @property
    def is_hyperbolic(self) -> bool:
        return self.kind == "hyperbolic" or self.a == 0.0

    @property
    def pole_radius(self) -> float:
        """Radius below which the metric coincides with the hyperbolic one."""
        return 0.5 if self.is_hyperbolic else 0.5 * self.r_cut

    def warp(self, r):
        """Return (psi, psi', psi'') at r (array or scalar)."""
        r = np.asarray(r, dtype=float)
        sh, ch = np.sinh(r), np.cosh(r)
        if self.is_hyperbolic:
            return sh, ch, sh
        half = 0.5 * self.r_cut
        x = (r - half) / half
        s, ds, d2s = smoothstep5(x)
        ds = ds / half
        d2s = d2s / (half * half)
        e = self.a * np.exp(-self.beta * r)
        b = self.beta
        return (
            sh + e * s,
            ch + e * (ds - b * s),
            sh + e * (d2s - 2.0 * b * ds + b * b * s),
        )

    def psi(self, r):
        return self.warp(r)[0]

    def curvature(self, r):
        psi, _, d2 = self.warp(r)
        if self.is_hyperbolic:
            return -np.ones_like(psi)
        return -d2 / psi

    def energy(self, r, v_r, v_theta):
        return np.hypot(v_r, self.psi(r) * v_theta)

    def angular_momentum(self, r, v_theta):
        psi = self.psi(r)
        return psi * psi * v_theta


def _check(p: PhasePoint) -> None:
    if not p.r > R_MIN:
        raise ChartError(f"r = {p.r} outside chart")


def christoffel(metric: SurfaceMetric, p: PhasePoint) -> ChristoffelSymbols:
    _check(p)
    psi, dpsi, _ = metric.warp(p.r)
    return ChristoffelSymbols(
        r_rr=0.0,
        r_rtheta=0.0,
        r_thetatheta=float(-psi * dpsi),
        theta_rr=0.0,
        theta_rtheta=float(dpsi / psi),
        theta_thetatheta=0.0,
    )


def gaussian_curvature(metric: SurfaceMetric, p: PhasePoint) -> float:
    _check(p)
    return float(metric.curvature(p.r))


def particle_energy(metric: SurfaceMetric, p: PhasePoint) -> float:
    return float(metric.energy(p.r, p.v_r, p.v_theta))


def angular_velocity(metric: SurfaceMetric, p: PhasePoint) -> float:
    return float(metric.angular_momentum(p.r, p.v_theta))


def normal_frame(metric: SurfaceMetric, p: PhasePoint) -> FramePair:
    """Velocity and its positively rotated companion N with g(N, N) = g(v, v)."""
    _check(p)
    psi = float(metric.psi(p.r))
    if p.v_r == 0.0 and p.v_theta == 0.0:
        raise DegenerateVectorError("normal frame undefined at zero velocity")
    return FramePair(
        gamma_dot=(p.v_r, p.v_theta),
        normal=(-psi * p.v_theta, p.v_r / psi),
        psi=psi,
    )


def lift_horizontal(metric: SurfaceMetric, p: PhasePoint, y) -> PhaseTangent:
    """Horizontal lift Y^i d_i - Y^i v^j Gamma^k_ij d_{v^k} of a base vector y = (Y^r, Y^theta)."""
    _check(p)
    yr, yt = float(y[0]), float(y[1])
    psi, dpsi, _ = metric.warp(p.r)
    return PhaseTangent(
        yr,
        yt,
        float(psi * dpsi * yt * p.v_theta),
        float(-(dpsi / psi) * (yr * p.v_theta + yt * p.v_r)),
    )


def lift_vertical(p: PhasePoint, y) -> PhaseTangent:
    return PhaseTangent(0.0, 0.0, float(y[0]), float(y[1]))


def sasaki_norm(metric: SurfaceMetric, y, z):
    """Sasaki length of tangent vectors z (4, n) based at phase points y (4, n).

    The horizontal part is (z_r, z_theta); the vertical part is the covariant
    velocity change z_v + Gamma(z_x, v).  Both are measured with g.
    """
    psi, dpsi, _ = metric.warp(y[0])
    zr, zt = z[0], z[1]
    kr = z[2] - psi * dpsi * zt * y[3]
    kt = z[3] + (dpsi / psi) * (zr * y[3] + zt * y[2])
    return np.sqrt(zr * zr + (psi * zt) ** 2 + kr * kr + (psi * kt) ** 2)


def chart_distance(p: PhasePoint, q: PhasePoint) -> float:
    """Max-norm distance in chart coordinates with theta compared on the circle."""
    dth = (p.theta - q.theta + math.pi) % TWO_PI - math.pi
    return max(abs(p.r - q.r), abs(dth), abs(p.v_r - q.v_r), abs(p.v_theta - q.v_theta))


def random_phase_points(metric: SurfaceMetric, rng, n: int, r_range=(1.0, 3.0), e_range=(0.3, 2.0)) -> np.ndarray:
    """n phase points (4, n): r, theta, E and the fiber angle drawn uniformly.

    The fiber angle phi fixes the velocity as v = E (sin phi e_r + cos phi e_theta)
    in the orthonormal frame (e_r, e_theta = d_theta / psi).
    """
    r = rng.uniform(*r_range, n)
    th = rng.uniform(0.0, TWO_PI, n)
    e = rng.uniform(*e_range, n)
    phi = rng.uniform(0.0, TWO_PI, n)
    return np.array([r, th, e * np.sin(phi), e * np.cos(phi) / metric.psi(r)])
