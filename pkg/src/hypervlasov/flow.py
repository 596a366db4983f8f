"""Geodesic flow on warped-product surfaces.

Numerical integration runs in the canonical variables (r, theta, v_r, l) with
l = psi^2 v_theta, so the Killing momentum is carried as an exact constant and the
right-hand side reads

    r' = v_r,   theta' = l / psi^2,   v_r' = psi' l^2 / psi^3,   l' = 0.

Normal Jacobi components can ride along as extra (J, J') pairs obeying
J'' = -E^2 K J.  Backward flows integrate the negated field.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rk
from .geometry import (
    R_MIN,
    TWO_PI,
    ChartError,
    DegenerateVectorError,
    PhasePoint,
    SurfaceMetric,
)

StepBudgetError = _rk.StepBudgetError
RENORM_THRESHOLD = 1e100


class ChartExitError(ChartError):
    """The trajectory left the chart; ``time`` is the signed exit time."""

    def __init__(self, time: float):
        super().__init__(f"trajectory reached r <= {R_MIN} at t = {time:.12g}")
        self.time = time


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk45"
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14
    h_init: float = 1e-2
    h_max: float = 0.5
    max_steps: int = 200_000

    def __post_init__(self):
        if self.method not in ("rk45", "rk4"):
            raise ValueError(f"method must be 'rk45' or 'rk4', got {self.method!r}")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not (0 < self.h_init <= self.h_max):
            raise ValueError("need 0 < h_init <= h_max")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def driver_kwargs(self) -> dict:
        return dict(
            method=self.method,
            rtol=self.rel_tol,
            atol=self.abs_tol,
            h_init=self.h_init,
            h_max=self.h_max,
            max_steps=self.max_steps,
        )


DEFAULT_CONFIG = IntegratorConfig()


@dataclass
class Trajectory:
    """Accepted-step samples of one geodesic with (E, l, r) monitors."""

    t: np.ndarray
    states: np.ndarray
    energy: np.ndarray
    angular_momentum: np.ndarray

    @property
    def radius(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def final(self) -> PhasePoint:
        return PhasePoint.from_array(self.states[-1])

    def samples(self):
        return [(float(t), PhasePoint.from_array(s)) for t, s in zip(self.t, self.states)]

    def energy_drift(self) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.energy - e0)) / max(e0, 1e-300))

    def rows(self):
        for t, s, e, l in zip(self.t, self.states, self.energy, self.angular_momentum):
            yield [float(t), float(s[0]), float(s[1] % TWO_PI), float(s[2]), float(s[3]), float(e), float(l)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "r", "theta", "v_r", "v_theta", "E", "l"])
            for row in self.rows():
                w.writerow([repr(x) for x in row])


@dataclass(frozen=True)
class RadialChannels:
    c_plus: float
    c_minus: float


@dataclass(frozen=True)
class EscapeResult:
    """First time with r(t) > R; ``time`` is 0.0 and ``already_outside`` set when r(0) > R."""

    time: float
    already_outside: bool = False
    exit_state: PhasePoint | None = field(default=None, compare=False)


# ---------------------------------------------------------------- exact H^2 flow

def _sinhc(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x * x / 6.0, np.sinh(xs) / xs)


def _lean(c, sh, k, absk_comp):
    """cosh s + k sinh s evaluated without cancellation.

    ``absk_comp`` is 1 - |k| computed stably by the caller.
    """
    direct = c + k * sh
    opp = np.exp(-np.abs(np.arcsinh(sh))) + np.abs(sh) * absk_comp
    return np.where(k * sh >= 0.0, direct, opp)


def _lean_dot(c, sh, k, absk_comp):
    """sinh s + k cosh s evaluated without cancellation."""
    direct = sh + k * c
    sgn = np.where(sh >= 0.0, 1.0, -1.0)
    opp = sgn * (-np.exp(-np.abs(np.arcsinh(sh))) + c * absk_comp)
    return np.where(k * sh >= 0.0, direct, opp)


def exact_flow_h2_arrays(r, theta, v_r, v_theta, t):
    """Closed-form hyperbolic geodesic flow, vectorized over states (and t).

    The point and velocity are written in the null basis n+- = e^{+-r}(1, +-1, 0)
    and the angular unit vector of the hyperboloid, rotated so the base point lies
    on the theta = 0 meridian.  In this basis the coefficients of gamma(t) can be
    formed without the catastrophic cancellation of cosh(Et) X + sinh(Et)/E V
    when a far point flows back toward the origin.
    """
    r, theta, v_r, v_theta, t = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (r, theta, v_r, v_theta, t)))
    sh_r = np.sinh(r)
    w = sh_r * v_theta
    e = np.hypot(v_r, w)
    pos = e > 0.0
    es = np.where(pos, e, 1.0)
    k = np.where(pos, v_r / es, 0.0)
    # 1 - |k| = w^2 / (E (E + |v_r|))
    kc = np.where(pos, (w / es) * (w / (es + np.abs(v_r))), 1.0)
    s = e * t
    c, sh = np.cosh(s), np.sinh(s)
    sc = t * _sinhc(s)
    p_co = _lean(c, sh, k, kc)
    m_co = _lean(c, sh, -k, kc)
    p_do = e * _lean_dot(c, sh, k, kc)
    m_do = e * _lean_dot(c, sh, -k, kc)
    ep, em = 0.5 * np.exp(r), 0.5 * np.exp(-r)
    g0 = ep * p_co + em * m_co
    gu = ep * p_co - em * m_co
    gw = sc * w
    d_u = ep * p_do - em * m_do
    d_w = c * w
    rho = np.hypot(gu, gw)
    r1 = np.arcsinh(rho)
    th1 = (theta + np.arctan2(gw, gu)) % TWO_PI
    rho_s = np.where(rho > 0.0, rho, 1.0)
    vr1 = (gu * d_u + gw * d_w) / (rho_s * g0)
    # l = sinh(r)^2 v_theta is conserved; the cross product would cancel badly
    vt1 = np.where(rho > 0.0, (sh_r * v_theta) * (sh_r / rho_s) / rho_s, 0.0)
    return r1, th1, vr1, vt1


def exact_flow_h2(p: PhasePoint, t: float) -> PhasePoint:
    """Hyperbolic-plane geodesic flow in closed form via the hyperboloid model."""
    if t == 0.0:
        return p
    if p.v_r == 0.0 and p.v_theta == 0.0:
        return p
    r, th, vr, vt = (float(x) for x in exact_flow_h2_arrays(p.r, p.theta, p.v_r, p.v_theta, t))
    if not r > R_MIN:
        raise ChartExitError(float("nan"))
    return PhasePoint(r, th, vr, vt)


def radial_channels(metric: SurfaceMetric, p: PhasePoint) -> RadialChannels:
    e = float(metric.energy(p.r, p.v_r, p.v_theta))
    if e == 0.0:
        raise DegenerateVectorError("radial channels need E > 0")
    sh, ch = math.sinh(p.r), math.cosh(p.r)
    return RadialChannels(ch + sh * p.v_r / e, ch - sh * p.v_r / e)


def predict_cosh_r(channels: RadialChannels, energy: float, t: float) -> float:
    """cosh r(t) = (c+ e^{Et} + c- e^{-Et}) / 2 (exact on the hyperbolic plane)."""
    return 0.5 * (channels.c_plus * math.exp(energy * t) + channels.c_minus * math.exp(-energy * t))


# ---------------------------------------------------------------- numerical flow

def to_canonical(metric: SurfaceMetric, r, theta, v_r, v_theta):
    psi = metric.psi(r)
    return np.array([r, theta, v_r, psi * psi * v_theta], dtype=float)


def from_canonical(metric: SurfaceMetric, y):
    psi = metric.psi(y[0])
    return y[0], y[1], y[2], y[3] / (psi * psi)


def geodesic_field(metric: SurfaceMetric, r, theta, v_r, v_theta):
    """Geodesic generator in chart components (dr, dtheta, dv_r, dv_theta)."""
    psi, dpsi, _ = metric.warp(r)
    return (
        np.asarray(v_r, dtype=float),
        np.asarray(v_theta, dtype=float),
        psi * dpsi * v_theta * v_theta,
        -2.0 * (dpsi / psi) * v_r * v_theta,
    )


def _make_rhs(metric: SurfaceMetric, sign: float, npairs: int):
    def rhs(y):
        r, pr, l = y[0], y[2], y[3]
        psi, dpsi, d2psi = metric.warp(r)
        inv = 1.0 / psi
        dy = np.empty_like(y)
        dy[0] = sign * pr
        dy[1] = sign * l * inv * inv
        dy[2] = sign * dpsi * l * l * inv * inv * inv
        dy[3] = 0.0
        if npairs:
            w = l * inv
            ek = -(pr * pr + w * w) * (-d2psi * inv)  # -E^2 K
            for j in range(npairs):
                a, b = 4 + 2 * j, 5 + 2 * j
                dy[a] = sign * y[b]
                dy[b] = sign * ek * y[a]
            dy[-1] = 0.0
        return dy

    return rhs


def _renormalize(y):
    """Rescale Jacobi rows above RENORM_THRESHOLD; the last row accumulates the log factor."""
    big = np.max(np.abs(y[4:-1]), axis=0)
    over = big > RENORM_THRESHOLD
    if not over.any():
        return y
    y = y.copy()
    y[4:-1, over] /= big[over]
    y[-1, over] += np.log(big[over])
    return y


def _h2_jump_factory(metric: SurfaceMetric, sign: float, npairs: int):
    """Closed-form transit through the ball r < pole_radius where the metric is exactly H^2."""
    r_pole = metric.pole_radius
    c_pole = math.cosh(r_pole)

    def jump(y, budget):
        r = y[0]
        mask = r < r_pole
        if not mask.any():
            return mask, y, np.zeros(y.shape[1])
        ys = y[:, mask]
        rr, th, vr, vt = from_canonical(metric, ys)
        wr = sign * vr
        sh, ch = np.sinh(rr), np.cosh(rr)
        e = np.hypot(vr, sh * vt)
        pos = e > 0.0
        es = np.where(pos, e, 1.0)
        cp = ch + sh * wr / es
        cm = ch - sh * wr / es
        disc = np.maximum(c_pole * c_pole - cp * cm, 0.0)
        u = (c_pole + np.sqrt(disc)) / cp
        tau = np.where(pos, np.log(np.maximum(u, 1.0)) / es, np.inf)
        tau = np.minimum(tau, budget[mask])
        dt = sign * tau
        r1, th1, vr1, vt1 = exact_flow_h2_arrays(rr, th, vr, vt, dt)
        out = y.copy()
        sub = to_canonical(metric, r1, th1, vr1, vt1)
        sub[3] = ys[3]
        if npairs:
            x = e * dt
            c, sc = np.cosh(x), dt * _sinhc(x)
            extra = np.empty((2 * npairs, ys.shape[1]))
            for j in range(npairs):
                a, b = ys[4 + 2 * j], ys[5 + 2 * j]
                extra[2 * j] = c * a + sc * b
                extra[2 * j + 1] = e * e * sc * a + c * b
            sub = np.vstack([sub, extra, ys[-1:]])
        out[:, mask] = sub
        ds = np.zeros(y.shape[1])
        ds[mask] = tau
        return mask, out, ds

    return jump


def _pole_cap(metric: SurfaceMetric, sign: float):
    def cap(y):
        pr = sign * y[2]
        psi = metric.psi(y[0])
        e = np.hypot(y[2], y[3] / psi)
        return np.where(pr < 0.0, 0.5 * y[0] / np.maximum(e, 1e-300), np.inf)

    return cap


def transport_arrays(
    metric: SurfaceMetric,
    r,
    theta,
    v_r,
    v_theta,
    times,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    jacobi=None,
):
    """Flow many states by each time in ``times`` (all of one sign).

    Passes through the pole region in closed form, so trajectories crossing near
    r = 0 are handled.  ``jacobi`` optionally holds initial normal Jacobi pairs as an
    array (npairs, 2, n).  Returns ``(states, pairs, log_scale)`` where ``states`` has
    shape (len(times), 4, n) in chart variables and ``pairs`` has shape
    (len(times), npairs, 2, n) or is None; Jacobi values are ``pairs * exp(log_scale)``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times > 0) and np.any(times < 0):
        raise ValueError("times must share one sign")
    sign = -1.0 if np.any(times < 0) else 1.0
    r, theta, v_r, v_theta = (np.atleast_1d(np.asarray(x, dtype=float)) for x in np.broadcast_arrays(r, theta, v_r, v_theta))
    n = r.size
    npairs = 0 if jacobi is None else np.asarray(jacobi).shape[0]
    if metric.is_hyperbolic:
        return _transport_h2(r, theta, v_r, v_theta, times, jacobi)
    y0 = to_canonical(metric, r, theta, v_r, v_theta)
    if npairs:
        y0 = np.vstack([y0, np.asarray(jacobi, dtype=float).reshape(2 * npairs, n), np.zeros((1, n))])
    s_out = np.abs(times)
    order = np.argsort(s_out)
    ys, _, _ = _rk.integrate_batch(
        _make_rhs(metric, sign, npairs),
        y0,
        s_out[order],
        step_cap=_pole_cap(metric, sign),
        jump=_h2_jump_factory(metric, sign, npairs),
        after_accept=_renormalize if npairs else None,
        **cfg.driver_kwargs(),
    )
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    ys = ys[inv]
    states = np.empty((times.size, 4, n))
    for i in range(times.size):
        rr, th, vr, vt = from_canonical(metric, ys[i])
        states[i] = np.array([rr, th % TWO_PI, vr, vt])
    if not npairs:
        return states, None, None
    pairs = ys[:, 4:4 + 2 * npairs].reshape(times.size, npairs, 2, n)
    return states, pairs, ys[:, -1].copy()


def _transport_h2(r, theta, v_r, v_theta, times, jacobi):
    n = r.size
    states = np.empty((times.size, 4, n))
    e = np.hypot(v_r, np.sinh(r) * v_theta)
    for i, t in enumerate(times):
        rr, th, vr, vt = exact_flow_h2_arrays(r, theta, v_r, v_theta, t)
        states[i] = np.array([rr, th, vr, vt])
    if jacobi is None:
        return states, None, None
    jac = np.asarray(jacobi, dtype=float)
    pairs = np.empty((times.size,) + jac.shape)
    for i, t in enumerate(times):
        x = e * t
        c, sc = np.cosh(x), t * _sinhc(x)
        pairs[i, :, 0] = c * jac[:, 0] + sc * jac[:, 1]
        pairs[i, :, 1] = e * e * sc * jac[:, 0] + c * jac[:, 1]
    return states, pairs, np.zeros((times.size, n))


def transport(metric: SurfaceMetric, p: PhasePoint, t: float, cfg: IntegratorConfig = DEFAULT_CONFIG) -> PhasePoint:
    """phi_t(p), exact on the hyperbolic plane, numerical with pole transit otherwise."""
    if t == 0.0:
        return p
    states, _, _ = transport_arrays(metric, p.r, p.theta, p.v_r, p.v_theta, [t], cfg)
    return PhasePoint.from_array(states[0, :, 0])


def integrate_geodesic(
    metric: SurfaceMetric,
    p: PhasePoint,
    t: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> Trajectory:
    """Integrate the geodesic equations from p for signed time t, recording every step.

    The chart is enforced strictly: reaching r <= R_MIN raises ChartExitError
    carrying the exit time.
    """
    sign = -1.0 if t < 0 else 1.0
    y0 = to_canonical(metric, p.r, p.theta, p.v_r, p.v_theta)
    log_s = [0.0]
    log_y = [y0.copy()]

    def on_step(s, y, cols):
        log_s.append(float(s[0]))
        log_y.append(y[:, 0].copy())

    if t != 0.0 and not (p.v_r == 0.0 and p.v_theta == 0.0):
        _, ev_s, _ = _rk.integrate_batch(
            _make_rhs(metric, sign, 0),
            y0[:, None],
            [abs(t)],
            on_step=on_step,
            event=lambda y: R_MIN - y[0],
            **cfg.driver_kwargs(),
        )
        if np.isfinite(ev_s[0]):
            raise ChartExitError(sign * float(ev_s[0]))
    ys = np.array(log_y).T
    rr, th, vr, vt = from_canonical(metric, ys)
    states = np.column_stack([rr, th % TWO_PI, vr, vt])
    ts = sign * np.array(log_s)
    return Trajectory(
        t=ts,
        states=states,
        energy=metric.energy(rr, vr, vt),
        angular_momentum=ys[3].copy(),
    )


def escape_time(
    metric: SurfaceMetric,
    p: PhasePoint,
    radius: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    t_max: float = 1e4,
) -> EscapeResult:
    """First t >= 0 with r(t) > radius, located by bisection to 1e-9 inside the crossing step."""
    e = float(metric.energy(p.r, p.v_r, p.v_theta))
    if e == 0.0:
        raise DegenerateVectorError("escape time needs E > 0")
    if p.r > radius:
        return EscapeResult(0.0, True, p)
    y0 = to_canonical(metric, p.r, p.theta, p.v_r, p.v_theta)[:, None]
    _, ev_s, ev_y = _rk.integrate_batch(
        _make_rhs(metric, 1.0, 0),
        y0,
        [t_max],
        step_cap=_pole_cap(metric, 1.0),
        jump=_h2_jump_factory(metric, 1.0, 0),
        event=lambda y: y[0] - radius,
        **cfg.driver_kwargs(),
    )
    if not np.isfinite(ev_s[0]):
        raise StepBudgetError(f"no escape beyond r = {radius} before t = {t_max}")
    rr, th, vr, vt = (float(x) for x in from_canonical(metric, ev_y[:, 0]))
    exit_state = PhasePoint(rr, th, vr, vt)
    follow = integrate_geodesic(metric, exit_state, 1.0, cfg)
    if np.any(np.diff(follow.radius) < -1e-12):
        raise RuntimeError("radius not monotone after escape")
    return EscapeResult(float(ev_s[0]), False, exit_state)
