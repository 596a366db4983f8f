"""Scenario files: TOML with [metric], [initial_data], [simulation], [output] and [[expect]] tables."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import STATISTICS, Band
from .flow import IntegratorConfig
from .geometry import PhasePoint, SurfaceMetric
from .kinetic import DistributionSpec


class ConfigError(ValueError):
    """The scenario file is unreadable or violates the schema."""


_SECTIONS = {
    "metric": {"kind", "a", "beta", "r_cut"},
    "initial_data": {"r_range", "theta_range", "e_range", "phi_range", "amplitude", "alpha", "ramp"},
    "simulation": {
        "times", "time_grid", "probe_strategy", "probe_count", "probe_radii", "quad_tol", "grad_tol",
        "geometry", "fit_window", "integrator", "trajectories", "seed",
    },
    "output": {"directory", "formats"},
}
_INTEGRATOR_KEYS = {"method", "rel_tol", "abs_tol", "h_init", "h_max", "max_steps"}
_EXPECT_KEYS = {"statistic", "model", "lo", "hi"}
_METRIC_KINDS = {"hyperbolic": "hyperbolic", "h2": "hyperbolic", "warped_ah": "warped_ah", "ah": "warped_ah"}


@dataclass(frozen=True)
class Expectation:
    statistic: str
    model: str
    band: Band


@dataclass
class ScenarioConfig:
    name: str
    metric: SurfaceMetric
    spec: DistributionSpec
    times: np.ndarray
    probe_strategy: str = "azimuth-ray"
    probe_count: int = 4
    probe_radii: tuple = ()
    quad_tol: float = 1e-4
    grad_tol: float = 1e-3
    geometry: bool = True
    fit_window: tuple | None = None
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12))
    trajectories: bool = True
    seed: int = 0
    directory: str = "out"
    formats: tuple = ("csv",)
    expectations: tuple = ()

    def probes(self, t: float) -> list[tuple[float, float]]:
        """Probe points (r, theta) at time t.

        "azimuth-ray": for each of ``probe_count`` energies spread over the energy
        range, the radius the radial channel formula predicts for an outgoing
        particle launched from the middle of the radial support; E = 0 stays put.
        Each radius is probed on the central azimuth and at the middle of the upper
        angular ramp, where the angular derivative does not vanish by symmetry.
        "fixed": the radii in ``probe_radii`` on the same two azimuths.
        """
        from .flow import predict_cosh_r, radial_channels

        spec = self.spec
        th0, th1 = spec.theta_range
        azimuths = (0.5 * (th0 + th1), th1 - 0.5 * spec.ramp * (th1 - th0))
        r_mid = 0.5 * sum(spec.r_range)
        if self.probe_strategy == "fixed":
            radii = list(self.probe_radii)
        else:
            e0, e1 = spec.e_range
            radii = []
            for j in range(self.probe_count):
                e = e0 + (e1 - e0) * j / self.probe_count
                if e == 0.0:
                    radii.append(r_mid)
                    continue
                ch = radial_channels(self.metric, PhasePoint(r_mid, azimuths[0], e, 0.0))
                radii.append(math.acosh(max(1.0, predict_cosh_r(ch, e, t))))
        return [(r, th) for r in radii for th in azimuths]


def _pair(section, key, value):
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key} must be a pair of numbers, got {value!r}") from None
    return lo, hi


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    extra = set(table) - allowed
    if extra:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(extra))}")


def _times(sim):
    if "times" in sim and "time_grid" in sim:
        raise ConfigError("[simulation] give either times or time_grid, not both")
    if "times" in sim:
        t = np.asarray(sim["times"], dtype=float)
    elif "time_grid" in sim:
        g = sim["time_grid"]
        _check_keys("simulation.time_grid", g, {"start", "stop", "count", "spacing"})
        try:
            start, stop, count = float(g["start"]), float(g["stop"]), int(g["count"])
        except KeyError as exc:
            raise ConfigError(f"[simulation.time_grid] missing {exc.args[0]}") from None
        spacing = g.get("spacing", "linear")
        if spacing == "linear":
            t = np.linspace(start, stop, count)
        elif spacing == "geometric":
            if start <= 0.0:
                raise ConfigError("[simulation.time_grid] geometric spacing needs start > 0")
            t = np.geomspace(start, stop, count)
        else:
            raise ConfigError(f"[simulation.time_grid] spacing must be linear or geometric, got {spacing!r}")
    else:
        raise ConfigError("[simulation] needs times or time_grid")
    if t.ndim != 1 or t.size == 0 or np.any(t < 0.0) or np.any(np.diff(t) <= 0.0):
        raise ConfigError("[simulation] times must be nonnegative and strictly increasing")
    return t


def parse_config(data: dict, name: str = "scenario") -> ScenarioConfig:
    """Validate a decoded TOML document."""
    _check_keys("top level", data, set(_SECTIONS) | {"expect", "name"})
    for sec in ("metric", "initial_data", "simulation"):
        if sec not in data:
            raise ConfigError(f"missing section [{sec}]")
        _check_keys(sec, data[sec], _SECTIONS[sec])
    out = data.get("output", {})
    _check_keys("output", out, _SECTIONS["output"])

    m = data["metric"]
    kind = _METRIC_KINDS.get(str(m.get("kind", "hyperbolic")).lower())
    if kind is None:
        raise ConfigError(f"[metric] kind must be hyperbolic or warped_ah, got {m.get('kind')!r}")
    if kind == "warped_ah":
        beta = float(m.get("beta", 3.0))
        if not beta > 2.0:
            raise ConfigError(f"[metric] beta > 2 required, got beta = {beta}")
        try:
            metric = SurfaceMetric.warped_ah(float(m.get("a", 0.1)), beta, float(m.get("r_cut", 1.0)))
        except ValueError as exc:
            raise ConfigError(f"[metric] {exc}") from None
    else:
        metric = SurfaceMetric.hyperbolic()

    d = data["initial_data"]
    e_range = _pair("initial_data", "e_range", d.get("e_range", (0.5, 1.0)))
    alpha = float(d.get("alpha", e_range[0]))
    if alpha < 0.0:
        raise ConfigError("[initial_data] alpha must be nonnegative")
    if alpha > 0.0 and e_range[0] < alpha:
        raise ConfigError(f"[initial_data] E0 >= alpha required when alpha > 0 (E0 = {e_range[0]}, alpha = {alpha})")
    phi = d.get("phi_range")
    try:
        spec = DistributionSpec(
            r_range=_pair("initial_data", "r_range", d.get("r_range", (1.0, 2.0))),
            theta_range=_pair("initial_data", "theta_range", d.get("theta_range", (-0.5, 0.5))),
            e_range=e_range,
            phi_range=None if phi is None else _pair("initial_data", "phi_range", phi),
            amplitude=float(d.get("amplitude", 1.0)),
            ramp=float(d.get("ramp", 0.1)),
        )
    except ValueError as exc:
        raise ConfigError(f"[initial_data] {exc}") from None

    s = data["simulation"]
    integ = s.get("integrator", {})
    _check_keys("simulation.integrator", integ, _INTEGRATOR_KEYS)
    try:
        icfg = IntegratorConfig(**{"rel_tol": 1e-10, "abs_tol": 1e-12, **integ})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[simulation.integrator] {exc}") from None
    strategy = s.get("probe_strategy", "azimuth-ray")
    if strategy not in ("azimuth-ray", "fixed"):
        raise ConfigError(f"[simulation] probe_strategy must be azimuth-ray or fixed, got {strategy!r}")
    radii = tuple(float(r) for r in s.get("probe_radii", ()))
    if strategy == "fixed" and not radii:
        raise ConfigError("[simulation] probe_strategy = fixed needs probe_radii")
    count = int(s.get("probe_count", 4))
    if count < 1:
        raise ConfigError("[simulation] probe_count must be positive")
    for key in ("quad_tol", "grad_tol"):
        if key in s and not float(s[key]) > 0.0:
            raise ConfigError(f"[simulation] {key} must be positive")
    window = s.get("fit_window")
    expectations = []
    for i, e in enumerate(data.get("expect", [])):
        _check_keys(f"expect[{i}]", e, _EXPECT_KEYS)
        stat = e.get("statistic")
        if stat not in STATISTICS:
            raise ConfigError(f"[[expect]] statistic must be one of {', '.join(STATISTICS)}, got {stat!r}")
        model = e.get("model", "exponential")
        if model not in ("exponential", "power"):
            raise ConfigError(f"[[expect]] model must be exponential or power, got {model!r}")
        expectations.append(Expectation(stat, model, Band(float(e.get("lo", -math.inf)), float(e.get("hi", math.inf)))))
    formats = tuple(out.get("formats", ("csv",)))
    if not formats or any(f not in ("csv", "jsonl") for f in formats):
        raise ConfigError(f"[output] formats must be drawn from csv, jsonl; got {formats!r}")
    return ScenarioConfig(
        name=str(data.get("name", name)),
        metric=metric,
        spec=spec,
        times=_times(s),
        probe_strategy=strategy,
        probe_count=count,
        probe_radii=radii,
        quad_tol=float(s.get("quad_tol", 1e-4)),
        grad_tol=float(s.get("grad_tol", 1e-3)),
        geometry=bool(s.get("geometry", True)),
        fit_window=None if window is None else _pair("simulation", "fit_window", window),
        integrator=icfg,
        trajectories=bool(s.get("trajectories", True)),
        seed=int(s.get("seed", 0)),
        directory=str(out.get("directory", "out")),
        formats=formats,
        expectations=tuple(expectations),
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, name=path.stem)


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``h2_exponential.cfg``."""
    p = Path(__file__).with_name("scenarios") / name
    if not p.suffix:
        p = p.with_suffix(".cfg")
    if not p.exists():
        raise ConfigError(f"no bundled scenario {name!r}")
    return p
