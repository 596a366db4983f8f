import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypervlasov.flow import geodesic_field
from hypervlasov.geometry import (
    ChartError,
    DegenerateVectorError,
    PhasePoint,
    SurfaceMetric,
    angular_velocity,
    christoffel,
    gaussian_curvature,
    lift_horizontal,
    lift_vertical,
    normal_frame,
    particle_energy,
    random_phase_points,
)

H2 = SurfaceMetric.hyperbolic()
AH = SurfaceMetric.warped_ah(0.1, 3.0)


def test_christoffel_h2():
    g = christoffel(H2, PhasePoint(1.0, 0.0, 0.0, 0.0))
    assert g.r_thetatheta == pytest.approx(-math.cosh(1) * math.sinh(1), abs=1e-12)
    assert g.r_thetatheta == pytest.approx(-1.813430, abs=1e-6)
    assert g.r_rr == 0.0
    arr = g.as_array()
    assert arr[1, 0, 1] == arr[1, 1, 0] == pytest.approx(1 / math.tanh(1))


def test_christoffel_ah_far_field():
    g = christoffel(AH, PhasePoint(5.0, 0.0, 0.0, 0.0))
    assert abs(g.theta_rtheta - 1 / math.tanh(5.0)) <= 1e-6


def test_curvature_values():
    assert gaussian_curvature(H2, PhasePoint(2.0, 0, 0, 0)) == -1.0
    assert gaussian_curvature(AH, PhasePoint(1.0, 0, 0, 0)) == pytest.approx(-1.033748, abs=1e-6)
    assert abs(gaussian_curvature(AH, PhasePoint(5.0, 0, 0, 0)) + 1) <= 5e-9


def test_curvature_matches_closed_form_beyond_cutoff():
    r = np.linspace(1.0, 6.0, 11)
    e = 0.1 * np.exp(-3 * r)
    psi = np.sinh(r) + e
    d2 = np.sinh(r) + 9 * e
    assert np.allclose(AH.curvature(r), -d2 / psi, rtol=1e-13)


def test_ah_is_h2_inside_half_cutoff():
    r = np.linspace(0.01, 0.49, 20)
    assert np.array_equal(AH.warp(r)[0], np.sinh(r))


def test_christoffel_convergence_exponent():
    r = np.arange(3.0, 11.0)
    _, dpsi, _ = AH.warp(r)
    diff = np.abs(dpsi / AH.psi(r) - 1 / np.tanh(r))
    slope = -np.polyfit(r, np.log(diff), 1)[0]
    assert slope >= 3.0 - 0.3


def test_energy_and_angular_velocity():
    p = PhasePoint(1.0, 0.0, 3.0, 0.0)
    assert particle_energy(H2, p) == 3.0 and angular_velocity(H2, p) == 0.0
    q = PhasePoint(1.0, 0.0, 0.0, 1.0)
    assert particle_energy(H2, q) == pytest.approx(1.175201, abs=1e-6)
    assert angular_velocity(H2, q) == pytest.approx(1.381098, abs=1e-6)
    z = PhasePoint(2.0, 1.0, 0.0, 0.0)
    assert particle_energy(AH, z) == 0.0 and angular_velocity(AH, z) == 0.0


def test_normal_frame_examples():
    f = normal_frame(H2, PhasePoint(1.0, 0.0, 1.0, 0.0))
    (_, _), (nr, nt) = f.normalized()
    assert nr == 0.0 and nt == pytest.approx(1.0)
    f = normal_frame(H2, PhasePoint(1.0, 0.0, 0.0, 1 / math.sinh(1)))
    (_, _), (nr, nt) = f.normalized()
    assert nr == pytest.approx(-1.0) and nt == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateVectorError):
        normal_frame(H2, PhasePoint(1.0, 0.0, 0.0, 0.0))


def test_normal_frame_orthonormal_random():
    rng = np.random.default_rng(3)
    for metric in (H2, AH):
        y = random_phase_points(metric, rng, 1000, r_range=(0.01, 8.0))
        for k in range(y.shape[1]):
            p = PhasePoint.from_array(y[:, k])
            f = normal_frame(metric, p)
            (gr, gt), (nr, nt) = f.normalized()
            scale = max(1.0, gr * gr + gt * gt)
            assert abs(gr * nr + gt * nt) <= 1e-12 * scale
            assert abs((nr * nr + nt * nt) - (gr * gr + gt * gt)) <= 1e-12 * scale


def test_lifts():
    p = PhasePoint(1.3, 0.2, 0.4, 0.7)
    assert lift_vertical(p, (1.0, 0.0)).as_array().tolist() == [0.0, 0.0, 1.0, 0.0]
    h = lift_horizontal(H2, p, (1.0, 0.0)).as_array()
    assert np.allclose(h, [1.0, 0.0, 0.0, -p.v_theta / math.tanh(p.r)], rtol=1e-14)
    r = lift_horizontal(H2, PhasePoint(1.0, 0.0, 1.0, 0.0), (1.0, 0.0)).as_array()
    assert r.tolist() == [1.0, 0.0, 0.0, 0.0]


@settings(max_examples=60, deadline=None)
@given(
    r=st.floats(0.01, 10.0),
    th=st.floats(0.0, 6.28),
    vr=st.floats(-3.0, 3.0),
    vt=st.floats(-3.0, 3.0),
    ah=st.booleans(),
)
def test_horizontal_lift_of_velocity_is_geodesic_field(r, th, vr, vt, ah):
    metric = AH if ah else H2
    p = PhasePoint(r, th, vr, vt)
    lift = lift_horizontal(metric, p, (vr, vt)).as_array()
    field = np.array([float(c) for c in geodesic_field(metric, r, th, vr, vt)])
    assert np.array_equal(lift, field) or np.allclose(lift, field, rtol=1e-15, atol=1e-300)


def test_chart_guard_and_validation():
    with pytest.raises(ChartError):
        PhasePoint(1e-4, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="beta > 2"):
        SurfaceMetric.warped_ah(0.1, 1.5)
    with pytest.raises(ValueError, match="pinching"):
        SurfaceMetric.warped_ah(0.1, 3.0, r_cut=0.5)
    with pytest.raises(ValueError):
        PhasePoint(float("nan"), 0, 0, 0)


def test_theta_is_wrapped():
    assert PhasePoint(1.0, -0.5, 0, 0).theta == pytest.approx(2 * math.pi - 0.5)
