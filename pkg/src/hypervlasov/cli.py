"""Command-line entry points.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure
(integrator budget, chart exit, unconverged quadrature or Hopf limit).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .analysis import DecaySeries, InsufficientDataError, fit_mixed, rate_report, safe_fit, write_fits_csv
from .config import ConfigError, ScenarioConfig, bundled_scenario, load_config
from .fields import IDENTITIES, bracket_residuals
from .flow import (
    DEFAULT_CONFIG,
    ChartExitError,
    StepBudgetError,
    integrate_geodesic,
    transport,
    transport_arrays,
)
from .geometry import ChartError, PhasePoint, SurfaceMetric, random_phase_points
from .kinetic import DENSITY_CONFIG, DistributionSpec, density_gradient, density_grid, spatial_density, support_geometry
from .variational import NotConvergedError, flow_differential, frame_basis, riccati_hopf

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# DensityGrid column behind each fitted statistic
GRID_STATISTICS = {
    "rho_sup": "rho",
    "drho_r": "drho_dr",
    "drho_theta": "drho_dtheta_norm",
    "omega_vol": "omega_volume",
    "omega_angle": "omega_angular_diameter",
}


class NumericalFailure(RuntimeError):
    """A computation finished but missed its tolerance."""


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".15g")
    return str(v)


def emit(records, fmt="csv", stream=None):
    """Write a list of dicts as CSV (header from the first record) or one JSON object per line."""
    stream = stream or sys.stdout
    if not records:
        return
    if fmt == "jsonl":
        for rec in records:
            stream.write(json.dumps({k: _json_value(v) for k, v in rec.items()}) + "\n")
        return
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(list(records[0]))
    for rec in records:
        w.writerow([_fmt(v) for v in rec.values()])


def _json_value(v):
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _floats(text, n=None, name="value"):
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{name}: expected {n} numbers, got {len(vals)}")
    return vals


def resolve_threads(value):
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("HYPERVLASOV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"HYPERVLASOV_THREADS must be an integer, got {env!r}") from None
    return 1


def _metric(args) -> SurfaceMetric:
    kind = args.metric.lower()
    if kind in ("h2", "hyperbolic"):
        return SurfaceMetric.hyperbolic()
    if not args.beta > 2.0:
        raise ConfigError(f"beta > 2 required, got beta = {args.beta}")
    try:
        return SurfaceMetric.warped_ah(args.a, args.beta, args.r_cut)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _state(text) -> PhasePoint:
    try:
        return PhasePoint(*_floats(text, 4, "--state"))
    except ChartError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- subcommands


def cmd_flow(args):
    metric = _metric(args)
    p = _state(args.state)
    if args.trajectory:
        traj = integrate_geodesic(metric, p, args.t)
        recs = [dict(zip(("t", "r", "theta", "v_r", "v_theta", "E", "l"), row)) for row in traj.rows()]
    else:
        q = transport(metric, p, args.t)
        recs = [{
            "t": args.t, "r": q.r, "theta": q.theta, "v_r": q.v_r, "v_theta": q.v_theta,
            "E": float(metric.energy(q.r, q.v_r, q.v_theta)),
            "l": float(metric.angular_momentum(q.r, q.v_theta)),
        }]
    emit(recs, args.format)
    return EXIT_OK


def _spec_from_args(args) -> DistributionSpec:
    if args.config:
        return load_config(args.config).spec
    try:
        return DistributionSpec(
            r_range=tuple(_floats(args.r_range, 2, "--r-range")),
            theta_range=tuple(_floats(args.theta_range, 2, "--theta-range")),
            e_range=tuple(_floats(args.e_range, 2, "--e-range")),
            amplitude=args.amplitude,
            ramp=args.ramp,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_density(args):
    metric = load_config(args.config).metric if args.config else _metric(args)
    spec = _spec_from_args(args)
    times = _floats(args.t, name="--t")
    points = [_floats(x, 2, "--x") for x in (args.x or ["1.5,0"])]
    recs, ok = [], True
    for t in times:
        for x in points:
            rec = {"t": t, "r": x[0], "theta": x[1]}
            if args.grad:
                g = density_gradient(spec, metric, t, x, args.tol, DENSITY_CONFIG, cross_check=args.cross_check)
                rec.update(rho=g.rho, drho_dr=g.drho_dr, drho_dtheta_norm=g.drho_dtheta_norm)
                if args.cross_check:
                    rec.update(fd_drho_dr=g.fd_drho_dr, fd_drho_dtheta_norm=g.fd_drho_dtheta_norm)
                rec.update(quad_err=g.error[0], quad_nodes=g.nodes)
                ok &= g.converged
            else:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    rho, err = spatial_density(spec, metric, t, x, args.tol)
                ok &= not any(issubclass(w.category, RuntimeWarning) for w in caught)
                rec.update(rho=rho, quad_err=err)
            if args.geometry:
                vol, diam = support_geometry(spec, metric, t, x)
                rec.update(omega_volume=vol, omega_angular_diameter=diam)
            recs.append(rec)
    emit(recs, args.format)
    if not ok:
        print("error: density quadrature did not reach the requested tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def read_density_csv(path):
    """Rows of a density CSV as a dict of float columns."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def sup_series(cols, column, label):
    """Per-time sup of |column| as a DecaySeries."""
    if column not in cols:
        raise ConfigError(f"column {column!r} not in density file")
    t = cols["t"]
    ts = np.unique(t)
    y = np.array([np.nanmax(np.abs(cols[column][t == s])) for s in ts])
    return DecaySeries(ts, np.nan_to_num(y, nan=0.0), label)


def cmd_decay_fit(args):
    cols = read_density_csv(args.input)
    window = tuple(_floats(args.window, 2, "--window")) if args.window else None
    recs = []
    for label in args.statistic:
        if label not in GRID_STATISTICS:
            raise ConfigError(f"--statistic must be one of {', '.join(GRID_STATISTICS)}")
        if not cols:
            recs.append({"label": label, "model": args.model, "status": "no data"})
            continue
        series = sup_series(cols, GRID_STATISTICS[label], label)
        if args.model == "mixed":
            try:
                p, lam = fit_mixed(series, window)
                recs.append({"label": label, "model": "mixed", "power": p, "rate": lam, "status": "ok"})
            except InsufficientDataError:
                recs.append({"label": label, "model": "mixed", "power": float("nan"), "rate": float("nan"), "status": "no data"})
            continue
        fit = safe_fit(series, args.model, window)
        if fit is None:
            recs.append({"label": label, "model": args.model, "rate": float("nan"), "r2": float("nan"), "n": 0, "status": "no data"})
        else:
            recs.append({"label": label, "model": fit.model, "rate": fit.rate, "r2": fit.r_squared, "n": fit.n_points, "status": "ok"})
    emit(recs, args.format)
    return EXIT_OK


def cmd_riccati(args):
    metric = _metric(args)
    if not args.energy > 0.0:
        raise ConfigError("--energy must be positive")
    psi = float(metric.psi(args.r))
    p = PhasePoint(args.r, args.theta, args.energy * math.sin(args.phi), args.energy * math.cos(args.phi) / psi)
    s = riccati_hopf(metric, p, args.horizon, args.branch)
    emit([{"branch": s.branch, "horizon": s.horizon_T, "q": s.q, "converged": s.converged, "residual": s.residual}], args.format)
    return EXIT_OK


def cmd_commutator(args):
    metric = _metric(args)
    rng = np.random.default_rng(args.seed)
    y = random_phase_points(metric, rng, args.points)
    res = bracket_residuals(metric, y, args.h, norm=args.norm, scheme=args.scheme)
    recs = [{"identity": k, "max": float(res[k].max()), "mean": float(res[k].mean()), "points": args.points, "h": args.h} for k in IDENTITIES]
    worst = max(r["max"] for r in recs)
    recs.append({"identity": "all", "max": worst, "mean": float(np.mean([r["mean"] for r in recs])), "points": args.points, "h": args.h})
    emit(recs, args.format)
    if args.tol is not None and worst > args.tol:
        print(f"error: max residual {worst:.3e} exceeds --tol {args.tol:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def flow_jacobian_fd(metric, p, t, step=1e-5, cfg=DEFAULT_CONFIG):
    """Chart Jacobian of phi_t at p by centered differences in each coordinate."""
    y0 = p.as_array()
    cols = np.hstack([y0[:, None] + step * np.eye(4), y0[:, None] - step * np.eye(4)])
    out, _, _ = transport_arrays(metric, *cols, [t], cfg)
    f = out[0]
    d = (f[:, :4] - f[:, 4:]) / (2 * step)
    # theta is periodic
    d[1] = ((f[1, :4] - f[1, 4:] + math.pi) % (2 * math.pi) - math.pi) / (2 * step)
    return d


def cmd_jacobi(args):
    metric = _metric(args)
    p = _state(args.state)
    fd = flow_differential(metric, p, args.t)
    jac = fd.coordinate_matrix()
    ref = flow_jacobian_fd(metric, p, args.t, args.fd_step)
    recs = []
    for i in range(4):
        for j in range(4):
            recs.append({"i": i, "j": j, "jacobi": jac[i, j], "fd": ref[i, j], "diff": abs(jac[i, j] - ref[i, j])})
    # Liouville row: determinant in the Sasaki frames, where it is 1
    ref_frame = np.linalg.solve(frame_basis(metric, fd.target), ref @ frame_basis(metric, p))
    det_fd = float(np.linalg.det(ref_frame))
    recs.append({"i": -1, "j": -1, "jacobi": fd.det, "fd": det_fd, "diff": abs(fd.det - det_fd)})
    emit(recs, args.format)
    return EXIT_OK


# ---------------------------------------------------------------- scenarios


def _trajectory_records(cfg: ScenarioConfig):
    spec = cfg.spec
    r_mid = 0.5 * sum(spec.r_range)
    th = 0.5 * sum(spec.theta_range)
    e0, e1 = spec.e_range
    recs = []
    for j in range(cfg.probe_count):
        e = e0 + (e1 - e0) * j / cfg.probe_count
        if e == 0.0:
            continue
        traj = integrate_geodesic(cfg.metric, PhasePoint(r_mid, th, e, 0.0), float(cfg.times[-1]), cfg.integrator)
        for row in traj.rows():
            recs.append(dict(zip(("id", "t", "r", "theta", "v_r", "v_theta", "E", "l"), (j, *row))))
    return recs


def _write(recs, path: Path, fmt: str):
    with open(path, "w", newline="") as fh:
        if fmt == "jsonl":
            emit(recs, "jsonl", fh)
            return
        if not recs:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(recs[0]))
        for rec in recs:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else _fmt(v) for v in rec.values()])


def _band_json(b):
    return [None if math.isinf(b.lo) else b.lo, None if math.isinf(b.hi) else b.hi]


def run_scenario(cfg: ScenarioConfig | str | Path, out_dir=None, threads: int = 1) -> tuple[dict, int]:
    """Run a scenario end to end and write its artifacts; returns (summary, exit code).

    Artifacts: trajectories, density grid and fits in each requested format, and
    summary.json.  Nothing time-dependent is written, so reruns are byte-identical.
    """
    if not isinstance(cfg, ScenarioConfig):
        cfg = load_config(cfg)
    out = Path(out_dir if out_dir is not None else cfg.directory)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.trajectories:
        traj = _trajectory_records(cfg)
        for fmt in cfg.formats:
            _write(traj, out / f"trajectories.{fmt}", fmt)

    probes = [cfg.probes(float(t)) for t in cfg.times]
    grid = density_grid(
        cfg.spec, cfg.metric, cfg.times, probes, cfg.quad_tol, cfg.integrator, threads, cfg.geometry, cfg.grad_tol
    )
    if "csv" in cfg.formats:
        grid.to_csv(out / "density.csv")
    if "jsonl" in cfg.formats:
        _write([dict(zip(grid.COLUMNS, row)) for row in grid.rows()], out / "density.jsonl", "jsonl")

    theory = {e.statistic: (e.model, e.band) for e in cfg.expectations}
    wanted = dict.fromkeys(GRID_STATISTICS, "exponential" if cfg.spec.alpha > 0.0 else "power")
    wanted.update({k: m for k, (m, _) in theory.items()})
    fits = {}
    for label, model in wanted.items():
        if label not in GRID_STATISTICS or (label.startswith("omega") and not cfg.geometry):
            fits[label] = None
            continue
        y = np.nan_to_num(grid.sup(GRID_STATISTICS[label]), nan=0.0)
        fits[label] = safe_fit(DecaySeries(grid.times, y, label), model, cfg.fit_window)
    if "csv" in cfg.formats:
        write_fits_csv(fits.values(), out / "fits.csv")
    if "jsonl" in cfg.formats:
        _write([dict(zip(f.COLUMNS, f.row())) for f in fits.values() if f is not None], out / "fits.jsonl", "jsonl")

    verdicts = rate_report(fits, theory)
    converged = bool(np.all(grid.converged))
    summary = {
        "scenario": cfg.name,
        "metric": {"kind": cfg.metric.kind, "a": cfg.metric.a, "beta": cfg.metric.beta, "r_cut": cfg.metric.r_cut},
        "initial_data": {
            "r_range": list(cfg.spec.r_range),
            "theta_range": list(cfg.spec.theta_range),
            "e_range": list(cfg.spec.e_range),
            "amplitude": cfg.spec.amplitude,
            "alpha": cfg.spec.alpha,
        },
        "times": [float(t) for t in cfg.times],
        "fit_window": None if cfg.fit_window is None else list(cfg.fit_window),
        "fits": {
            k: None if f is None else {"model": f.model, "rate": f.rate, "amplitude": f.amplitude, "r2": f.r_squared, "n": f.n_points, "dropped": f.dropped}
            for k, f in fits.items()
        },
        "verdicts": [
            {"statistic": v.label, "model": v.model, "rate": v.rate, "band": _band_json(v.band), "status": v.status}
            for v in verdicts
        ],
        "quadrature_converged": converged,
        "seed": cfg.seed,
    }
    code = EXIT_OK if converged else EXIT_NUMERIC
    summary["exit_code"] = code
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_value)
        fh.write("\n")
    return summary, code


def cmd_run(args):
    path = Path(args.config)
    if not path.exists() and not path.parent.name:
        path = bundled_scenario(args.config)
    cfg = load_config(path)
    summary, code = run_scenario(cfg, args.output, args.threads)
    emit([
        {"statistic": v["statistic"], "model": v["model"], "rate": float("nan") if v["rate"] is None else v["rate"], "status": v["status"]}
        for v in summary["verdicts"]
    ], args.format)
    if code == EXIT_NUMERIC:
        print("error: some density quadratures missed their tolerance; see density.csv quad_err", file=sys.stderr)
    return code


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for any random sampling")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $HYPERVLASOV_THREADS or 1)")
    common.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    geo = argparse.ArgumentParser(add_help=False)
    geo.add_argument("--metric", choices=("h2", "hyperbolic", "ah", "warped_ah"), default="h2")
    geo.add_argument("--a", type=float, default=0.1, help="AH perturbation amplitude")
    geo.add_argument("--beta", type=float, default=3.0, help="AH decay exponent (> 2)")
    geo.add_argument("--r-cut", type=float, default=1.0, help="AH switch-on radius")

    parser = argparse.ArgumentParser(prog="hypervlasov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow", parents=[common, geo], help="transport a phase point")
    p.add_argument("--state", required=True, help="r,theta,v_r,v_theta")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--trajectory", action="store_true", help="print every integrator step (strict chart)")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("density", parents=[common, geo], help="spatial density and its derivatives")
    p.add_argument("--config", help="take metric and initial data from a scenario file")
    p.add_argument("--r-range", default="1,2")
    p.add_argument("--theta-range", default="-0.5,0.5")
    p.add_argument("--e-range", default="0.5,1")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--ramp", type=float, default=0.1)
    p.add_argument("--t", default="0", help="comma-separated times")
    p.add_argument("--x", action="append", help="probe r,theta (repeatable)")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--grad", action="store_true", help="also the frame derivatives of rho")
    p.add_argument("--cross-check", action="store_true", help="with --grad, add finite-difference derivatives")
    p.add_argument("--geometry", action="store_true", help="support volume and angular diameter")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("decay-fit", parents=[common], help="fit decay rates to a density CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--statistic", action="append", default=None, help=f"one of {', '.join(GRID_STATISTICS)} (repeatable)")
    p.add_argument("--model", choices=("exponential", "power", "mixed"), default="exponential")
    p.add_argument("--window", help="t_a,t_b")
    p.set_defaults(func=cmd_decay_fit)

    p = sub.add_parser("riccati", parents=[common, geo], help="Hopf solution q at one phase point")
    p.add_argument("--energy", type=float, default=1.0)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--branch", choices=("unstable", "stable"), default="unstable")
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--phi", type=float, default=0.0, help="fiber angle; 0 is the +theta direction")
    p.set_defaults(func=cmd_riccati)

    p = sub.add_parser("commutator-check", parents=[common, geo], help="bracket identities at random points")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--norm", choices=("relative", "chart"), default="relative")
    p.add_argument("--scheme", choices=("directional", "jacobian"), default="directional")
    p.add_argument("--tol", type=float, default=None, help="exit 3 when the max residual exceeds this")
    p.set_defaults(func=cmd_commutator)

    p = sub.add_parser("jacobi", parents=[common, geo], help="flow differential vs finite differences")
    p.add_argument("--state", required=True, help="r,theta,v_r,v_theta")
    p.add_argument("--t", type=float, default=2.0)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.set_defaults(func=cmd_jacobi)

    p = sub.add_parser("run", parents=[common], help="run a scenario file and write its artifacts")
    p.add_argument("config", help="scenario path or bundled name (h2_exponential, h2_polynomial, ah_exponential)")
    p.add_argument("--output", help="artifact directory (default: [output] directory)")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "statistic", "unset") is None:
        args.statistic = ["rho_sup"]
    try:
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepBudgetError, ChartExitError, NotConvergedError, NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
