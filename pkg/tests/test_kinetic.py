import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypervlasov.flow import transport_arrays
from hypervlasov.geometry import PhasePoint, SurfaceMetric
from hypervlasov.kinetic import (
    Bump,
    DensityGrid,
    DistributionSpec,
    MassGrid,
    density_gradient,
    density_grid,
    evaluate_f,
    f_arrays,
    asymptotic_angular_bound,
    spatial_density,
    support_box,
    support_geometry,
    theta_integral,
    total_mass,
)

H2 = SurfaceMetric.hyperbolic()
AH = SurfaceMetric.warped_ah(0.1, 3.0)
SPEC = DistributionSpec()
ZERO = DistributionSpec(amplitude=0.0)


def _radial_integral(bump, lo, hi, weight, n=200_000):
    x = np.linspace(lo, hi, n + 1)
    xm = 0.5 * (x[1:] + x[:-1])
    return float(np.sum(bump(xm)[0] * weight(xm)) * (hi - lo) / n)


def test_bump_profile():
    b = Bump(0.0, 1.0, 0.1, 0.1)
    v, d = b(np.array([-0.1, 0.05, 0.5, 0.95, 1.1]))
    assert v[0] == 0.0 and v[2] == 1.0 and v[4] == 0.0
    assert v[1] == pytest.approx(0.5) and d[1] > 0 and d[3] < 0
    assert not b.inside(0.0) and b.inside(0.5)
    hard = Bump(0.0, 1.0, 0.0, 0.1)
    assert hard.inside(0.0) and hard(0.0)[0] == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        DistributionSpec(r_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        DistributionSpec(e_range=(-0.1, 1.0))
    with pytest.raises(ValueError):
        DistributionSpec(ramp=0.0)
    with pytest.raises(ValueError):
        DistributionSpec(amplitude=-1.0)
    assert SPEC.alpha == 0.5 and SPEC.e_max == 1.0


def test_density_t0_against_midpoint_oracle():
    # brute force over orthonormal velocity components (v_r, psi v_theta), 2000 x 2000 cells
    x = (1.5, 0.2)
    n = 2000
    edges = np.linspace(-1.0, 1.0, n + 1)
    c = 0.5 * (edges[1:] + edges[:-1])
    psi = float(H2.psi(x[0]))
    vr, w = np.meshgrid(c, c, indexing="ij")
    f = SPEC.value(H2, x[0], x[1], vr, w / psi)
    oracle = float(f.sum()) * (2.0 / n) ** 2
    rho, err = spatial_density(SPEC, H2, 0.0, x, tol=1e-7)
    assert rho == pytest.approx(oracle, rel=1e-6)
    # and the separable closed form 2 pi int B_E E dE
    be = SPEC._bumps()[2]
    exact = 2 * math.pi * _radial_integral(be, 0.5, 1.0, lambda e: e)
    assert rho == pytest.approx(exact, rel=1e-7)


def test_zero_datum():
    assert spatial_density(ZERO, H2, 3.0, (2.0, 0.0)) == (0.0, 0.0)
    g = density_gradient(ZERO, AH, 3.0, (2.0, 0.0))
    assert (g.drho_dr, g.drho_dtheta_norm) == (0.0, 0.0)
    assert support_geometry(ZERO, H2, 2.0, (2.0, 0.0)) == (0.0, 0.0)
    assert total_mass(ZERO, H2, 1.0) == 0.0
    assert evaluate_f(ZERO, AH, 2.0, PhasePoint(1.5, 0.0, 0.5, 0.1)) == 0.0


def test_evaluate_f_t0_is_f0():
    p = PhasePoint(1.5, 0.1, 0.3, 0.5 / math.sinh(1.5))
    assert evaluate_f(SPEC, AH, 0.0, p) == float(SPEC.value(AH, p.r, p.theta, p.v_r, p.v_theta))


def test_velocity_bound_example():
    assert asymptotic_angular_bound(1.0, 0.5, 0.5, 4.0) == pytest.approx(0.270671, abs=1e-6)


def test_support_box_t0_is_declared_box():
    box = support_box(SPEC, H2, 0.0, (1.5, 0.0))
    assert box.e_range == SPEC.e_range and not box.analytic
    assert box.phi_windows == ((0.0, -math.pi, math.pi),)


def test_rotation_equivariance():
    for metric in (H2, AH):
        a = 0.7
        r0, _ = spatial_density(SPEC, metric, 4.0, (3.0, 0.3), 1e-6)
        r1, _ = spatial_density(SPEC.rotated(a), metric, 4.0, (3.0, 0.3 + a), 1e-6)
        assert r1 == pytest.approx(r0, rel=1e-7)


def test_symmetric_datum_has_no_angular_derivative():
    flat = DistributionSpec(theta_range=(-math.pi, math.pi))
    for metric in (H2, AH):
        g = density_gradient(flat, metric, 3.0, (2.5, 1.0), 1e-6)
        assert abs(g.drho_dtheta_norm) <= 1e-8


def test_gradient_routes_agree():
    rng = np.random.default_rng(17)
    for k in range(20):
        metric = H2 if k % 2 == 0 else AH
        t = float(rng.uniform(1.0, 6.0))
        r = float(rng.uniform(max(0.5, 1.5 + 0.5 * t - 1.5), 1.5 + 0.75 * t))
        x = (r, float(rng.uniform(-0.45, 0.45)))
        g = density_gradient(SPEC, metric, t, x, 1e-6)
        scale = max(abs(g.drho_dr), abs(g.drho_dtheta_norm), 1e-3 * g.rho, 1e-300)
        assert abs(g.drho_dr - g.fd_drho_dr) <= 1e-4 * scale
        assert abs(g.drho_dtheta_norm - g.fd_drho_dtheta_norm) <= 1e-4 * scale


def test_containment_by_rejection_sampling():
    rng = np.random.default_rng(23)
    for metric in (H2, AH):
        for t, x in ((3.0, (3.0, 0.1)), (6.0, (5.5, -0.2)), (2.0, (1.2, 0.4))):
            box = support_box(SPEC, metric, t, x)
            n = 20_000
            e = np.sqrt(rng.uniform(0.0, 1.1**2, n))
            phi = rng.uniform(-math.pi, math.pi, n)
            psi = float(metric.psi(x[0]))
            y = np.array([np.full(n, x[0]), np.full(n, x[1]), e * np.sin(phi), e * np.cos(phi) / psi])
            f = f_arrays(SPEC, metric, t, y)
            hit = f > 0.0
            assert hit.any()
            assert np.all(box.contains(e[hit], phi[hit]))


def test_volume_matches_box_area_at_t0():
    vol, diam = support_geometry(SPEC, H2, 0.0, (1.5, 0.0))
    assert vol == pytest.approx(SPEC.box_area(), rel=0.02)
    assert diam == pytest.approx(math.pi)


def test_maximum_principle():
    rng = np.random.default_rng(29)
    n = 4000
    y = np.array([rng.uniform(1.0, 2.0, n), rng.uniform(-0.5, 0.5, n), rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)])
    fwd, _, _ = transport_arrays(AH, *y, [5.0])
    vals = f_arrays(SPEC, AH, 5.0, fwd[0])
    assert vals.max() <= SPEC.amplitude
    assert np.isclose(vals.max(), SPEC.amplitude)
    assert np.all(vals >= 0.0)


def test_mass_t0_closed_form():
    br, _, be, _ = SPEC._bumps()
    exact = theta_integral(SPEC) * _radial_integral(br, 1.0, 2.0, np.sinh) * 2 * math.pi * _radial_integral(be, 0.5, 1.0, lambda e: e)
    assert total_mass(SPEC, H2, 0.0) == pytest.approx(exact, rel=1e-6)


def test_mass_methods_agree():
    grid = MassGrid(0.0, 4.0, nr=10, ntheta=24, r_breaks=(1.0, 1.1, 1.9, 2.0))
    a = total_mass(SPEC, H2, 1.0, grid, tol=1e-5, method="symmetric")
    b = total_mass(SPEC, H2, 1.0, grid, tol=1e-5, method="grid")
    assert a == pytest.approx(b, rel=1e-3)
    with pytest.raises(ValueError):
        total_mass(SPEC, H2, 1.0, method="monte-carlo")


def test_density_grid_csv(tmp_path):
    g = density_grid(SPEC, H2, [1.0, 2.0], [[(2.0, 0.0)], [(2.5, 0.0)]], tol=1e-4, geometry=False)
    assert isinstance(g, DensityGrid) and g.converged.all()
    path = tmp_path / "d.csv"
    g.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(DensityGrid.COLUMNS)
    assert len(lines) == 3
    assert g.sup("rho").shape == (2,)


@settings(max_examples=25, deadline=None)
@given(t=st.floats(0.0, 8.0), r=st.floats(0.2, 8.0), th=st.floats(-3.1, 3.1))
def test_density_nonnegative(t, r, th):
    rho, err = spatial_density(SPEC, H2, t, (r, th), 1e-4)
    assert rho >= 0.0 and err >= 0.0
