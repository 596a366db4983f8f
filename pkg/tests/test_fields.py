import math

import numpy as np
import pytest

from hypervlasov.fields import (
    IDENTITIES,
    NamedField,
    bracket_residuals,
    commutation_report,
    eval_field,
    field_arrays,
    lie_bracket_fd,
    transport_check,
    write_commutation_csv,
)
from hypervlasov.flow import transport
from hypervlasov.geometry import PhasePoint, SurfaceMetric, random_phase_points
from hypervlasov.kinetic import DistributionSpec
from hypervlasov.variational import flow_differential

H2 = SurfaceMetric.hyperbolic()
AH = SurfaceMetric.warped_ah(0.1, 3.0)


def test_field_examples():
    assert eval_field(H2, "Y", PhasePoint(1.0, 0.0, 0.3, 0.2)).as_array().tolist() == [0.0, 0.0, 0.3, 0.2]
    assert eval_field(H2, "X", PhasePoint(1.0, 0.0, 1.0, 0.0)).as_array().tolist() == [1.0, 0.0, 0.0, 0.0]
    p = PhasePoint(1.4, 0.3, 0.6, 0.8 / math.sinh(1.4))
    u = eval_field(H2, "Unstable", p, 0.0).as_array()
    hv = eval_field(H2, "H", p).as_array() + eval_field(H2, "V", p).as_array()
    assert np.allclose(u, hv, rtol=1e-8, atol=1e-12)


def test_unknown_field():
    with pytest.raises(ValueError):
        NamedField("Z")


def test_bracket_examples():
    rng = np.random.default_rng(1)
    y = random_phase_points(H2, rng, 5)
    for k in range(5):
        p = PhasePoint.from_array(y[:, k])
        xy = lie_bracket_fd(H2, "X", "Y", p).as_array()
        assert np.max(np.abs(xy + eval_field(H2, "X", p).as_array())) <= 1e-5
        aa = lie_bracket_fd(H2, "H", "H", p).as_array()
        assert np.max(np.abs(aa)) <= 1e-12
    p = PhasePoint(1.0, 0.0, 0.5, 0.1)
    xv = lie_bracket_fd(H2, "X", "V", p).as_array()
    assert np.max(np.abs(xv + eval_field(H2, "H", p).as_array())) <= 1e-5


def test_bracket_order_two():
    y = random_phase_points(AH, np.random.default_rng(21), 6)
    coarse = bracket_residuals(AH, y, 2e-3)
    fine = bracket_residuals(AH, y, 1e-3)
    for ident in IDENTITIES[1:]:
        order = math.log2(coarse[ident].max() / fine[ident].max())
        assert 1.8 <= order <= 2.2, (ident, order)


def test_schemes_and_norms():
    y = random_phase_points(H2, np.random.default_rng(2), 4)
    for scheme in ("directional", "jacobian"):
        for norm in ("relative", "chart"):
            res = bracket_residuals(H2, y, 1e-3, norm=norm, scheme=scheme)
            assert set(res) == set(IDENTITIES)
    with pytest.raises(ValueError):
        bracket_residuals(H2, y, 1e-3, norm="sup")
    with pytest.raises(ValueError):
        bracket_residuals(H2, y, 1e-3, scheme="forward")


def test_commutation_report_csv(tmp_path):
    rows = commutation_report(H2, [PhasePoint(1.2, 0.0, 0.5, 0.3), PhasePoint(2.0, 1.0, -0.2, 0.1)])
    assert len(rows) == 2 * len(IDENTITIES)
    path = tmp_path / "c.csv"
    write_commutation_csv(rows, path)
    assert path.read_text().splitlines()[0] == "identity,r,theta,v_r,v_theta,h,residual"


def test_transport_check_generator():
    spec = DistributionSpec()
    rng = np.random.default_rng(9)
    y = random_phase_points(H2, rng, 3, r_range=(1.2, 1.8), e_range=(0.6, 0.9))
    for k in range(3):
        p = transport(H2, PhasePoint.from_array(y[:, k]), 1.0)
        assert transport_check(H2, "X", spec, p, 1.0) <= 1e-4


def test_transport_check_plateau():
    spec = DistributionSpec()
    # backward image of the stencil stays inside the plateau of f0
    p = transport(AH, PhasePoint(1.5, 0.0, 0.0, 0.7 / math.sinh(1.5)), 1.0)
    for z in ("Y", "H", "V"):
        assert transport_check(AH, z, spec, p, 1.0) <= 1e-12


def test_unstable_pushforward():
    p = PhasePoint(1.6, 0.2, 0.5, 0.4 / float(AH.psi(1.6)))
    t = 1.5
    u0 = eval_field(AH, "Unstable", p, 0.0).as_array()
    pushed = flow_differential(AH, p, t).coordinate_matrix() @ u0
    q = transport(AH, p, t)
    ut = field_arrays(AH, "Unstable", q.as_array()[:, None], t)[:, 0]
    assert np.linalg.norm(pushed - ut) <= 1e-4 * np.linalg.norm(ut)
