"""Commuting vector fields of the Vlasov equation and numerical checks of their brackets.

Chart components, with N = (-psi v_theta, v_r / psi) the rotated velocity:

    X = Hor(v)          geodesic generator
    Y = Ver(v)          fiber dilation
    H = Hor(N),  V = Ver(N)
    UniformMotion = t X + Y
    Unstable = w_u(t, p) (H + q_u V),   Stable = w_s(t, p) (H + q_s V)

The weights solve (d/dt + X) w = q w with w(0, .) = 1, that is
w(t, p) = J(0) / J(-t) for the unstable (resp. stable) normal Jacobi field along p.
On the hyperbolic plane q_u = E = -q_s and the weights are exp(+-E t).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .flow import DEFAULT_CONFIG, IntegratorConfig, geodesic_field, transport_arrays
from .geometry import DegenerateVectorError, PhasePoint, PhaseTangent, SurfaceMetric, sasaki_norm
from .variational import NotConvergedError, fundamental_solutions, q_field

FIELD_NAMES = ("X", "Y", "H", "V", "UniformMotion", "Unstable", "Stable")
IDENTITIES = ("[X,Y]=-X", "[X,H]=K E^2 V", "[X,V]=-H", "[X,H+q_u V]=-q_u(H+q_u V)", "[X,H+q_s V]=-q_s(H+q_s V)")


@dataclass(frozen=True)
class NamedField:
    name: str

    def __post_init__(self):
        if self.name not in FIELD_NAMES:
            raise ValueError(f"unknown field {self.name!r}; expected one of {FIELD_NAMES}")

    @property
    def needs_frame(self) -> bool:
        return self.name in ("H", "V", "Unstable", "Stable")

    def time_weight(self, metric: SurfaceMetric, p: PhasePoint, t: float, cfg: IntegratorConfig = DEFAULT_CONFIG) -> float:
        if self.name not in ("Unstable", "Stable"):
            return 1.0
        q = _q_single(metric, p, self.name, cfg)
        return float(_weights(metric, np.atleast_2d(p.as_array()).T, t, np.array([q]), cfg)[0])


def _as_field(f) -> NamedField:
    return f if isinstance(f, NamedField) else NamedField(str(f))


def _frame_parts(metric, y):
    r, vr, vt = y[0], y[2], y[3]
    psi, dpsi, _ = metric.warp(r)
    nr, nt = -psi * vt, vr / psi
    h = np.array([nr, nt, psi * dpsi * nt * vt, -(dpsi / psi) * (nr * vt + nt * vr)])
    v = np.array([np.zeros_like(nr), np.zeros_like(nr), nr, nt])
    return h, v


def _weights(metric, y, t, q, cfg):
    """exp of the integral of q over the last t time units of the orbit ending at y."""
    if t == 0.0:
        return np.ones(y.shape[1])
    _, ab, log_scale = fundamental_solutions(metric, y[0], y[1], y[2], y[3], [-t], cfg)
    j = (ab[0, 0] + q * ab[0, 2]) * np.exp(log_scale[0])
    return 1.0 / j


HOPF_ARCLENGTH = 20.0


def default_horizon(energy) -> np.ndarray:
    """Hopf horizon used for stencils, T = 20 / E (the error of q_T is about 4 E e^{-2ET})."""
    return HOPF_ARCLENGTH / np.asarray(energy, dtype=float)


def q_arrays(metric: SurfaceMetric, y, branch: str, cfg: IntegratorConfig = DEFAULT_CONFIG, horizon=None):
    """q_u or q_s at the columns of y with a fixed-arclength horizon (smooth in the point).

    The geodesic flow commutes with velocity scaling, q(x, v) = E q(x, v / E), so all
    columns are integrated at unit speed over the same arclength ``E T``.
    """
    e = metric.energy(y[0], y[2], y[3])
    if np.any(e == 0.0):
        raise DegenerateVectorError("Hopf solutions need E > 0")
    arc = HOPF_ARCLENGTH if horizon is None else float(horizon)
    sgn = -1.0 if branch == "unstable" else 1.0
    _, ab, _ = fundamental_solutions(metric, y[0], y[1], y[2] / e, y[3] / e, [sgn * arc], cfg)
    return -e * ab[0, 0] / ab[0, 2]


def field_arrays(
    metric: SurfaceMetric,
    name,
    y,
    t: float = 0.0,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    q=None,
    horizon=None,
):
    """Chart components (4, n) of a named field at the columns of y (4, n)."""
    name = _as_field(name).name
    y = np.asarray(y, dtype=float)
    if name == "X":
        return np.array(geodesic_field(metric, y[0], y[1], y[2], y[3]))
    if name == "Y":
        return np.array([np.zeros_like(y[0]), np.zeros_like(y[0]), y[2], y[3]])
    if name == "UniformMotion":
        return t * field_arrays(metric, "X", y) + field_arrays(metric, "Y", y)
    if np.any((y[2] == 0.0) & (y[3] == 0.0)):
        raise DegenerateVectorError(f"field {name} needs a nonzero velocity")
    h, v = _frame_parts(metric, y)
    if name == "H":
        return h
    if name == "V":
        return v
    branch = "unstable" if name == "Unstable" else "stable"
    if q is None:
        q = q_arrays(metric, y, branch, cfg, horizon)
    w = _weights(metric, y, t, q, cfg)
    return w * (h + q * v)


def _q_single(metric, p, name, cfg):
    sample = q_field(metric, p, "unstable" if name == "Unstable" else "stable", cfg)
    if not sample.converged:
        raise NotConvergedError(f"q for {name} did not converge")
    return sample.q


def eval_field(
    metric: SurfaceMetric,
    name,
    p: PhasePoint,
    t: float = 0.0,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> PhaseTangent:
    """Evaluate a named field at (t, p); U and S use the converged Hopf limit at p."""
    f = _as_field(name)
    y = p.as_array()[:, None]
    q = None
    if f.name in ("Unstable", "Stable"):
        if p.v_r == 0.0 and p.v_theta == 0.0:
            raise DegenerateVectorError(f"field {f.name} needs a nonzero velocity")
        q = np.array([_q_single(metric, p, f.name, cfg)])
    return PhaseTangent.from_array(field_arrays(metric, f, y, t, cfg, q=q)[:, 0])


def _jacobian_arrays(metric, f, y, h, t, cfg):
    """Centered-difference chart Jacobian dF[k, i, n] = d_i F^k at the columns of y."""
    n = y.shape[1]
    shifts = []
    for i in range(4):
        e = np.zeros((4, 1))
        e[i] = h
        shifts += [y + e, y - e]
    vals = field_arrays(metric, f, np.hstack(shifts), t, cfg)
    jac = np.empty((4, 4, n))
    for i in range(4):
        plus = vals[:, (2 * i) * n:(2 * i + 1) * n]
        minus = vals[:, (2 * i + 1) * n:(2 * i + 2) * n]
        jac[:, i, :] = (plus - minus) / (2 * h)
    return jac


def _bracket_jacobian(metric, a, b, y, h, t, cfg):
    """[A, B]^k = A^i d_i B^k - B^i d_i A^k with centered coordinate differences."""
    fa = field_arrays(metric, a, y, t, cfg)
    fb = field_arrays(metric, b, y, t, cfg)
    ja = _jacobian_arrays(metric, a, y, h, t, cfg)
    jb = _jacobian_arrays(metric, b, y, h, t, cfg)
    return np.einsum("kin,in->kn", jb, fa) - np.einsum("kin,in->kn", ja, fb)


def _bracket_arrays(metric, a, b, y, h, t, cfg, scheme="directional"):
    """[A, B] ~ (B(p + hA) - B(p - hA) - A(p + hB) + A(p - hB)) / 2h.

    ``scheme="jacobian"`` switches to per-axis differences, which trade a smaller
    error for H, V against a larger one for the Hopf fields.
    """
    if scheme == "jacobian":
        return _bracket_jacobian(metric, a, b, y, h, t, cfg)
    if scheme != "directional":
        raise ValueError(f"unknown bracket scheme {scheme!r}")
    fa = field_arrays(metric, a, y, t, cfg)
    fb = field_arrays(metric, b, y, t, cfg)
    n = y.shape[1]
    gb = field_arrays(metric, b, np.hstack([y + h * fa, y - h * fa]), t, cfg)
    ga = field_arrays(metric, a, np.hstack([y + h * fb, y - h * fb]), t, cfg)
    return (gb[:, :n] - gb[:, n:]) / (2 * h) - (ga[:, :n] - ga[:, n:]) / (2 * h)


def lie_bracket_fd(
    metric: SurfaceMetric,
    a,
    b,
    p: PhasePoint,
    h: float = 1e-3,
    t: float = 0.0,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    scheme: str = "directional",
) -> PhaseTangent:
    """Centered-difference Lie bracket [A, B](p) in chart coordinates, O(h^2)."""
    out = _bracket_arrays(metric, _as_field(a), _as_field(b), p.as_array()[:, None], h, t, cfg, scheme)
    return PhaseTangent.from_array(out[:, 0])


def bracket_residuals(
    metric: SurfaceMetric,
    y,
    h: float,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    norm: str = "relative",
    scheme: str = "directional",
) -> dict:
    """Residual of each identity at the columns of y.

    ``norm="relative"`` measures the defect in the Sasaki norm divided by
    max(1, Sasaki norm of the right-hand side); ``norm="chart"`` is the plain
    Euclidean norm of chart components.
    """
    if norm not in ("relative", "chart"):
        raise ValueError(f"norm must be 'relative' or 'chart', got {norm!r}")
    e = metric.energy(y[0], y[2], y[3])
    k = metric.curvature(y[0])
    x = field_arrays(metric, "X", y)
    hh, vv = _frame_parts(metric, y)
    targets = [("Y", -x), ("H", k * e * e * vv), ("V", -hh)]
    for name, branch in (("Unstable", "unstable"), ("Stable", "stable")):
        q = q_arrays(metric, y, branch, cfg)
        targets.append((name, -q * (hh + q * vv)))
    out = {}
    for ident, (name, rhs) in zip(IDENTITIES, targets):
        d = _bracket_arrays(metric, NamedField("X"), NamedField(name), y, h, 0.0, cfg, scheme) - rhs
        if norm == "chart":
            out[ident] = np.linalg.norm(d, axis=0)
        else:
            out[ident] = sasaki_norm(metric, y, d) / np.maximum(1.0, sasaki_norm(metric, y, rhs))
    return out


@dataclass(frozen=True)
class CommutationRow:
    identity: str
    point: PhasePoint
    h: float
    residual: float


def commutation_report(
    metric: SurfaceMetric,
    p: PhasePoint | list,
    h: float = 1e-3,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
    norm: str = "relative",
    scheme: str = "directional",
) -> list[CommutationRow]:
    """Residual of the five bracket identities at one or several phase points."""
    pts = [p] if isinstance(p, PhasePoint) else list(p)
    y = np.array([q.as_array() for q in pts]).T
    res = bracket_residuals(metric, y, h, cfg, norm, scheme)
    rows = []
    for j, q in enumerate(pts):
        for ident in IDENTITIES:
            rows.append(CommutationRow(ident, q, h, float(res[ident][j])))
    return rows


def write_commutation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity", "r", "theta", "v_r", "v_theta", "h", "residual"])
        for row in rows:
            p = row.point
            w.writerow([row.identity, repr(p.r), repr(p.theta), repr(p.v_r), repr(p.v_theta), repr(row.h), repr(row.residual)])


def transport_check(
    metric: SurfaceMetric,
    z,
    f0,
    p: PhasePoint,
    t: float,
    h: float = 1e-3,
    cfg: IntegratorConfig = DEFAULT_CONFIG,
) -> float:
    """|(d/dt + X)(Z f)| at (t, p) for f(t) = f0 o phi_{-t}, by nested centered differences.

    Z f is a centered difference along Z with step h and the derivative along the
    flow a centered difference in s of (Z f)(t + s, phi_s p), also with step h.
    ``f0`` must provide ``value(metric, r, theta, v_r, v_theta)``.
    """
    z = _as_field(z)
    y0 = p.as_array()[:, None]
    base, _, _ = transport_arrays(metric, y0[0], y0[1], y0[2], y0[3], [-h], cfg)
    fwd, _, _ = transport_arrays(metric, y0[0], y0[1], y0[2], y0[3], [h], cfg)
    vals = []
    for s, ys in ((-h, base[0]), (h, fwd[0])):
        tau = t + s
        zc = field_arrays(metric, z, ys, tau, cfg)
        pts = np.hstack([ys + h * zc, ys - h * zc])
        if tau != 0.0:
            back, _, _ = transport_arrays(metric, pts[0], pts[1], pts[2], pts[3], [-tau], cfg)
            pts = back[0]
        fv = f0.value(metric, pts[0], pts[1], pts[2], pts[3])
        vals.append((fv[0] - fv[1]) / (2 * h))
    return float(abs(vals[1] - vals[0]) / (2 * h))
