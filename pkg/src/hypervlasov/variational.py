"""Jacobi fields, the differential of the geodesic flow, and Hopf solutions of the Riccati equation.

Jacobi fields along a geodesic are split as J = J0 * gamma' + JN * N where N is the
rotated velocity.  The tangential part is free (J0'' = 0) and the normal part solves
JN'' = -E^2 K JN.  Everything here is built from the two fundamental normal
solutions a (a(0)=1, a'(0)=0) and b (b(0)=0, b'(0)=1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flow import DEFAULT_CONFIG, IntegratorConfig, transport_arrays
from .geometry import (
    DegenerateVectorError,
    PhasePoint,
    PhaseTangent,
    SurfaceMetric,
)

HOPF_TOL = 1e-8


class NotConvergedError(RuntimeError):
    """A Hopf limit did not settle within the horizon budget."""


@dataclass(frozen=True)
class JacobiState:
    J0: float
    J0_dot: float
    JN: float
    JN_dot: float
    log_scale: float = 0.0

    @property
    def normal(self) -> tuple[float, float]:
        """(JN, JN_dot) with the renormalization factor applied."""
        f = math.exp(self.log_scale)
        return self.JN * f, self.JN_dot * f


@dataclass(frozen=True)
class FlowDifferential:
    """d(phi_t) in the frame (Hor v, Hor N, Ver v, Ver N) at source and target."""

    matrix: np.ndarray
    source: PhasePoint
    target: PhasePoint
    t: float
    metric: SurfaceMetric

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))

    def coordinate_matrix(self) -> np.ndarray:
        """The same map in chart components (dr, dtheta, dv_r, dv_theta)."""
        ls = frame_basis(self.metric, self.source)
        lt = frame_basis(self.metric, self.target)
        return lt @ self.matrix @ np.linalg.inv(ls)

    def apply(self, v: PhaseTangent) -> PhaseTangent:
        return PhaseTangent.from_array(self.coordinate_matrix() @ v.as_array())


@dataclass(frozen=True)
class RiccatiSample:
    q: float
    horizon_T: float
    converged: bool
    residual: float
    branch: str = "unstable"


def frame_basis_arrays(metric: SurfaceMetric, y) -> np.ndarray:
    """Frame matrices (n, 4, 4) at the columns of y; columns Hor(v), Hor(N), Ver(v), Ver(N)."""
    y = np.asarray(y, dtype=float)
    psi, dpsi, _ = metric.warp(y[0])
    vr, vt = y[2], y[3]
    nr, nt = -psi * vt, vr / psi
    z = np.zeros_like(vr)
    out = np.empty((vr.size, 4, 4))
    for col, (yr, yt) in enumerate(((vr, vt), (nr, nt))):
        out[:, :, col] = np.stack([yr, yt, psi * dpsi * yt * vt, -(dpsi / psi) * (yr * vt + yt * vr)], axis=-1)
    out[:, :, 2] = np.stack([z, z, vr, vt], axis=-1)
    out[:, :, 3] = np.stack([z, z, nr, nt], axis=-1)
    return out


def frame_basis(metric: SurfaceMetric, p: PhasePoint) -> np.ndarray:
    """Columns: chart components of Hor(v), Hor(N), Ver(v), Ver(N) at p."""
    if p.v_r == 0.0 and p.v_theta == 0.0:
        raise DegenerateVectorError("frame undefined at zero velocity")
    return frame_basis_arrays(metric, p.as_array()[:, None])[0]


def frame_components(metric: SurfaceMetric, p: PhasePoint, v: PhaseTangent) -> np.ndarray:
    return np.linalg.solve(frame_basis(metric, p), v.as_array())


def fundamental_solutions(metric: SurfaceMetric, r, theta, v_r, v_theta, times, cfg: IntegratorConfig = DEFAULT_CONFIG):
    """Transport states together with the normal solutions a and b.

    Returns ``states`` (len(times), 4, n) and ``ab`` (len(times), 4, n) holding
    (a, a', b, b') up to the common factor ``exp(log_scale)`` (len(times), n).
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    n = r.size
    jac = np.zeros((2, 2, n))
    jac[0, 0] = 1.0
    jac[1, 1] = 1.0
    states, pairs, log_scale = transport_arrays(metric, r, theta, v_r, v_theta, times, cfg, jacobi=jac)
    ab = pairs.reshape(len(np.atleast_1d(times)), 4, n)
    return states, ab, log_scale


def propagate_jacobi(
    metric: SurfaceMetric,
    p: PhasePoint,
    j0: JacobiState,
    t: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> JacobiState:
    jn0 = np.array([[[j0.JN], [j0.JN_dot]]])
    _, pairs, log_scale = transport_arrays(metric, p.r, p.theta, p.v_r, p.v_theta, [t], cfg, jacobi=jn0)
    return JacobiState(
        j0.J0 + t * j0.J0_dot,
        j0.J0_dot,
        float(pairs[0, 0, 0, 0]),
        float(pairs[0, 0, 1, 0]),
        j0.log_scale + float(log_scale[0, 0]),
    )


def differential_matrix(t, a, ad, b, bd):
    """Frame matrix of d(phi_t) from the fundamental normal solutions at time t."""
    return np.array(
        [
            [1.0, 0.0, t, 0.0],
            [0.0, a, 0.0, b],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, ad, 0.0, bd],
        ]
    )


def flow_differential(
    metric: SurfaceMetric,
    p: PhasePoint,
    t: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> FlowDifferential:
    """Propagate the four frame vectors as Jacobi initial data (Hor <-> J(0), Ver <-> J'(0))."""
    if float(metric.energy(p.r, p.v_r, p.v_theta)) == 0.0:
        raise DegenerateVectorError("flow differential frame needs E > 0")
    if t == 0.0:
        return FlowDifferential(np.eye(4), p, p, 0.0, metric)
    states, ab, log_scale = fundamental_solutions(metric, p.r, p.theta, p.v_r, p.v_theta, [t], cfg)
    f = math.exp(float(log_scale[0, 0]))
    a, ad, b, bd = (float(x) * f for x in ab[0, :, 0])
    target = PhasePoint.from_array(states[0, :, 0])
    return FlowDifferential(differential_matrix(t, a, ad, b, bd), p, target, t, metric)


def liouville_det(
    metric: SurfaceMetric,
    r,
    theta,
    v_r,
    v_theta,
    t: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    segment: float = 0.5,
):
    """det d(phi_t) at many points, as a product over short segments.

    The one-shot Wronskian a b' - b a' subtracts terms of size exp(2 E t); over
    segments of length ``segment`` the factors are O(1) and the product keeps full
    relative precision.  The tangential block has determinant 1 and is omitted.
    """
    y = np.array([np.atleast_1d(np.asarray(c, dtype=float)) for c in (r, theta, v_r, v_theta)])
    n = max(1, int(math.ceil(abs(t) / segment)))
    dt = t / n
    det = np.ones(y.shape[1])
    for _ in range(n):
        states, ab, log_scale = fundamental_solutions(metric, y[0], y[1], y[2], y[3], [dt], cfg)
        f = np.exp(log_scale[0])
        a, ad, b, bd = (ab[0, k] * f for k in range(4))
        det *= a * bd - b * ad
        y = states[0]
    return det


def _hopf_from_ab(ab):
    # q = -a(+-T) / b(+-T); the common scale cancels
    return -ab[0] / ab[2]


def hopf_q_arrays(
    metric: SurfaceMetric,
    r,
    theta,
    v_r,
    v_theta,
    horizon,
    branch: str = "unstable",
    cfg: IntegratorConfig = DEFAULT_CONFIG,
):
    """q_{-T} (unstable) or q_{T} (stable) at many points with a common horizon T."""
    if branch not in ("unstable", "stable"):
        raise ValueError(f"branch must be 'unstable' or 'stable', got {branch!r}")
    sgn = -1.0 if branch == "unstable" else 1.0
    _, ab, _ = fundamental_solutions(metric, r, theta, v_r, v_theta, [sgn * horizon], cfg)
    return _hopf_from_ab(ab[0])


def _q_profile(metric, p, branch, T, cfg, nprobe=16):
    """q at horizons T/2 and T plus the sign of JN on a grid of the arc."""
    sgn = -1.0 if branch == "unstable" else 1.0
    times = sgn * T * np.arange(1, nprobe + 1) / nprobe
    _, ab, _ = fundamental_solutions(metric, p.r, p.theta, p.v_r, p.v_theta, times, cfg)
    ab = ab[:, :, 0]
    q = _hopf_from_ab(ab[-1])
    q_half = _hopf_from_ab(ab[nprobe // 2 - 1])
    # J = a + q b must keep one sign on the open arc between 0 and the terminal zero
    j = ab[:-1, 0] + q * ab[:-1, 2]
    if np.any(j < -1e-8 * (np.abs(ab[:-1, 0]) + np.abs(q * ab[:-1, 2]))):
        raise ArithmeticError("normal Jacobi field vanished before t = 0 (conjugate point)")
    return q, q_half


def riccati_residual(
    metric: SurfaceMetric,
    p: PhasePoint,
    q0: float,
    delta: float = 1e-3,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> float:
    """|q' + q^2 + E^2 K| at p for the Riccati solution through (p, q0).

    q(s) = J'(s)/J(s) with J = a + q0 b is sampled at s = +-delta, +-2 delta and the
    derivative taken with the five-point stencil.
    """
    e = float(metric.energy(p.r, p.v_r, p.v_theta))
    k = float(metric.curvature(p.r))
    qs = {}
    for sgn in (-1.0, 1.0):
        _, ab, _ = fundamental_solutions(metric, p.r, p.theta, p.v_r, p.v_theta, [sgn * delta, sgn * 2 * delta], cfg)
        for i, m in enumerate((1, 2)):
            a, ad, b, bd = ab[i, :, 0]
            qs[sgn * m] = (ad + q0 * bd) / (a + q0 * b)
    dq = (qs[-2.0] - 8.0 * qs[-1.0] + 8.0 * qs[1.0] - qs[2.0]) / (12.0 * delta)
    return float(abs(dq + q0 * q0 + e * e * k))


def riccati_hopf(
    metric: SurfaceMetric,
    p: PhasePoint,
    T: float,
    branch: str = "unstable",
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> RiccatiSample:
    """q_{-T}(0) (unstable) or q_T(0) (stable) from the terminal problem JN(0)=1, JN(+-T)=0.

    ``converged`` compares against the horizon T/2 using HOPF_TOL.
    """
    if branch not in ("unstable", "stable"):
        raise ValueError(f"branch must be 'unstable' or 'stable', got {branch!r}")
    if not T > 0:
        raise ValueError("horizon must be positive")
    if float(metric.energy(p.r, p.v_r, p.v_theta)) == 0.0:
        raise DegenerateVectorError("Riccati solution needs E > 0")
    q, q_half = _q_profile(metric, p, branch, T, cfg)
    converged = abs(q - q_half) <= HOPF_TOL * max(1.0, abs(q))
    return RiccatiSample(float(q), float(T), bool(converged), riccati_residual(metric, p, q, cfg=cfg), branch)


def q_field(
    metric: SurfaceMetric,
    p: PhasePoint,
    branch: str = "unstable",
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    tol: float = HOPF_TOL,
    max_doublings: int = 6,
) -> RiccatiSample:
    """Hopf limit q_u or q_s at p: start at T = max(5, 10/E), double until two horizons agree."""
    e = float(metric.energy(p.r, p.v_r, p.v_theta))
    if e == 0.0:
        raise DegenerateVectorError("Riccati solution needs E > 0")
    T = max(5.0, 10.0 / e)
    q_prev, _ = _q_profile(metric, p, branch, T, cfg)
    for _ in range(max_doublings):
        T *= 2.0
        q, _ = _q_profile(metric, p, branch, T, cfg)
        if abs(q - q_prev) <= tol * max(1.0, abs(q)):
            return RiccatiSample(float(q), T, True, riccati_residual(metric, p, q, cfg=cfg), branch)
        q_prev = q
    raise NotConvergedError(f"{branch} Hopf limit not converged at horizon {T}")


def q_velocity_derivatives(
    metric: SurfaceMetric,
    p: PhasePoint,
    branch: str = "unstable",
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> tuple[float, float]:
    """Centered differences of q/E in v_r and (1/psi) v_theta, step 1e-4 max(1, E)."""
    e = float(metric.energy(p.r, p.v_r, p.v_theta))
    h = 1e-4 * max(1.0, e)
    psi = float(metric.psi(p.r))

    def g(vr, vt):
        pp = PhasePoint(p.r, p.theta, vr, vt)
        return q_field(metric, pp, branch, cfg).q / float(metric.energy(pp.r, vr, vt))

    d_r = (g(p.v_r + h, p.v_theta) - g(p.v_r - h, p.v_theta)) / (2 * h)
    d_t = (g(p.v_r, p.v_theta + h) - g(p.v_r, p.v_theta - h)) / (2 * h) / psi
    return d_r, d_t


def lyapunov_rate(
    metric: SurfaceMetric,
    p: PhasePoint,
    T: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> float:
    """(1/T) log of the growth of the unstable Jacobi field (JN, JN') = (1, q_u) over [0, T]."""
    if T < 1.0:
        raise ValueError("need T >= 1")
    qu = q_field(metric, p, "unstable", cfg).q
    out = propagate_jacobi(metric, p, JacobiState(0.0, 0.0, 1.0, qu), T, cfg)
    n1 = math.log(math.hypot(out.JN, out.JN_dot)) + out.log_scale
    return (n1 - 0.5 * math.log1p(qu * qu)) / T
