"""Decay-rate fits for time series of density statistics.

Rates come from ordinary least squares on log y against t (exponential model) or
against log t (power model).  Zeros and negative values are dropped before the fit
and counted; they are never replaced by a small epsilon.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

MIN_POINTS = 5
STATISTICS = ("rho_sup", "drho_r", "drho_theta", "omega_vol", "omega_angle", "qu_gap")


class InsufficientDataError(ValueError):
    """Fewer than MIN_POINTS positive samples inside the fit window."""


@dataclass(frozen=True)
class DecaySeries:
    t: np.ndarray
    y: np.ndarray
    label: str = "rho_sup"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("t and y must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("t must be strictly increasing")
        if np.any(~np.isfinite(y)):
            raise ValueError("y must be finite")
        if np.any(y < 0.0):
            raise ValueError("decay statistics must be nonnegative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    def window(self, window=None):
        """(t, y, dropped) restricted to the window with zeros removed."""
        t, y = self.t, self.y
        if window is not None:
            lo, hi = window
            keep = (t >= lo) & (t <= hi)
            t, y = t[keep], y[keep]
        pos = y > 0.0
        return t[pos], y[pos], int((~pos).sum())


@dataclass(frozen=True)
class FitResult:
    label: str
    model: str
    rate: float
    amplitude: float
    r_squared: float
    t_a: float
    t_b: float
    n_points: int
    dropped: int = 0

    COLUMNS = ("label", "model", "rate", "amplitude", "r2", "t_a", "t_b", "n")

    def row(self):
        return (self.label, self.model, self.rate, self.amplitude, self.r_squared, self.t_a, self.t_b, self.n_points)


def _linear_fit(x, z):
    a = np.vstack([np.ones_like(x), x]).T
    (c0, c1), *_ = np.linalg.lstsq(a, z, rcond=None)
    resid = z - (c0 + c1 * x)
    ss_res = float(resid @ resid)
    ss_tot = float(((z - z.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return float(c0), float(c1), r2


def _fit(series: DecaySeries, window, model: str) -> FitResult:
    t, y, dropped = series.window(window)
    if t.size < MIN_POINTS:
        raise InsufficientDataError(
            f"{series.label}: {t.size} positive points in window {window} (need {MIN_POINTS}, dropped {dropped} zeros)"
        )
    if model == "power":
        if np.any(t <= 0.0):
            raise InsufficientDataError("power-law fit needs t > 0")
        x = np.log(t)
    else:
        x = t
    c0, c1, r2 = _linear_fit(x, np.log(y))
    return FitResult(series.label, model, -c1, math.exp(c0), r2, float(t[0]), float(t[-1]), int(t.size), dropped)


def fit_exponential(series: DecaySeries, window=None) -> FitResult:
    """y ~ A exp(-rate t); ``window`` is an inclusive (t_a, t_b) or None for all data."""
    return _fit(series, window, "exponential")


def fit_power(series: DecaySeries, window=None) -> FitResult:
    """y ~ A t^(-rate)."""
    return _fit(series, window, "power")


def fit_mixed(series: DecaySeries, window=None) -> tuple[float, float]:
    """(p, lam) of y ~ A t^(-p) exp(-lam t): separates a polynomial prefactor from the exponential rate."""
    t, y, _ = series.window(window)
    if t.size < MIN_POINTS:
        raise InsufficientDataError(f"{series.label}: {t.size} positive points")
    a = np.vstack([np.ones_like(t), -np.log(t), -t]).T
    c, *_ = np.linalg.lstsq(a, np.log(y), rcond=None)
    return float(c[1]), float(c[2])


@dataclass(frozen=True)
class Band:
    """Accepted interval for a fitted rate; either end may be infinite."""

    lo: float
    hi: float = math.inf

    @classmethod
    def relative(cls, expected: float, rel: float) -> "Band":
        return cls(expected * (1.0 - rel), expected * (1.0 + rel))

    def __contains__(self, x) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class Verdict:
    label: str
    model: str
    rate: float | None
    band: Band
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def rate_report(fits, theory) -> list[Verdict]:
    """Compare fits with expected bands.

    ``fits`` maps label -> FitResult (or None when the statistic had no usable
    data); ``theory`` maps label -> (model, Band).  Missing or None fits are
    reported as "no data", never as a pass.
    """
    out = []
    for label, (model, band) in theory.items():
        fit = fits.get(label)
        if fit is None or not math.isfinite(fit.rate):
            out.append(Verdict(label, model, None, band, "no data"))
        else:
            out.append(Verdict(label, fit.model, fit.rate, band, "pass" if fit.rate in band else "fail"))
    return out


def safe_fit(series: DecaySeries, model: str, window=None) -> FitResult | None:
    """Fit or None when the window holds too few positive points."""
    try:
        return fit_power(series, window) if model == "power" else fit_exponential(series, window)
    except InsufficientDataError:
        return None


def write_fits_csv(fits, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FitResult.COLUMNS)
        for f in fits:
            if f is not None:
                w.writerow([repr(v) if isinstance(v, float) else v for v in f.row()])
