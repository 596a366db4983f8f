"""Vlasov transport on the hyperbolic plane and asymptotically hyperbolic surfaces.

Geodesic flow, Jacobi fields and Hopf solutions, commuting vector fields, the
spatial density of transported distributions, and decay-rate fits.
"""
from .analysis import Band, DecaySeries, FitResult, fit_exponential, fit_power, rate_report
from .flow import IntegratorConfig, exact_flow_h2, escape_time, integrate_geodesic, transport
from .geometry import PhasePoint, PhaseTangent, SurfaceMetric
from .kinetic import DistributionSpec, density_gradient, spatial_density, support_geometry, total_mass
from .variational import flow_differential, q_field, riccati_hopf

__version__ = "0.1.0"

__all__ = [
    "Band",
    "DecaySeries",
    "DistributionSpec",
    "FitResult",
    "IntegratorConfig",
    "PhasePoint",
    "PhaseTangent",
    "SurfaceMetric",
    "density_gradient",
    "escape_time",
    "exact_flow_h2",
    "fit_exponential",
    "fit_power",
    "flow_differential",
    "integrate_geodesic",
    "q_field",
    "rate_report",
    "riccati_hopf",
    "spatial_density",
    "support_geometry",
    "total_mass",
    "transport",
]
