"""Vectorized explicit Runge-Kutta drivers with independent step control per trajectory.

States are stored column-wise, ``y[:, j]`` being trajectory ``j``.  The driver
advances an internal time ``s`` from 0 to ``s_end`` and records the state at a
common list of output times, which steps are clipped to hit exactly.
"""
from __future__ import annotations

import numpy as np

# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class StepBudgetError(RuntimeError):
    """A trajectory used up its step budget before reaching the end time."""


def dopri_step(rhs, y, h, k1):
    """One Dormand-Prince step of size ``h`` (broadcast over columns). Returns (y5, err, k7)."""
    ks = [k1]
    acc = y
    for i in range(1, 7):
        acc = y.copy()
        for j, aij in enumerate(_A[i]):
            if aij != 0.0:
                acc += (h * aij) * ks[j]
        ks.append(rhs(acc))
    # the last stage is evaluated at the 5th-order solution (FSAL)
    y5 = acc
    err = np.zeros_like(y)
    for j in range(7):
        if _E[j] != 0.0:
            err += (h * _E[j]) * ks[j]
    return y5, err, ks[6]


def rk4_step(rhs, y, h, k1):
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_batch(
    rhs,
    y0,
    outputs,
    *,
    method="rk45",
    rtol=1e-12,
    atol=1e-14,
    h_init=1e-2,
    h_max=0.5,
    max_steps=200_000,
    step_cap=None,
    jump=None,
    after_accept=None,
    on_step=None,
    event=None,
):
    """Integrate ``dy/ds = rhs(y)`` for every column of ``y0``.

    Parameters
    ----------
    rhs : callable(y) -> dy, acting column-wise on any subset of trajectories.
    outputs : increasing nonnegative output times; the last one is the end time.
    step_cap : optional callable(y) -> per-column maximal step.
    jump : optional callable(y, budget) -> (mask, y_new, ds) advancing some columns
        in closed form by ``ds <= budget``; those columns skip the RK step.
    after_accept : optional callable(y) -> y applied to freshly accepted states.
    on_step : optional callable(s, y, cols) called after each accepted step.
    event : optional callable(y) -> g; a column stops when g changes sign from
        negative to nonnegative and its crossing time is located by bisection.

    Returns
    -------
    ys : array (len(outputs), dim, n) of recorded states (NaN after a terminal event).
    event_s : array (n,) of event times (NaN if no event fired).
    event_y : array (dim, n) of states at the event.
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim == 1:
        y = y[:, None]
    outputs = np.asarray(outputs, dtype=float)
    dim, n = y.shape
    nout = len(outputs)
    ys = np.full((nout, dim, n), np.nan)
    s = np.zeros(n)
    kidx = np.zeros(n, dtype=int)
    while True:
        hit0 = (kidx < nout) & (outputs[np.minimum(kidx, nout - 1)] <= 0.0)
        if not hit0.any():
            break
        cols = np.nonzero(hit0)[0]
        ys[kidx[cols], :, cols] = y[:, cols].T
        kidx[cols] += 1
    active = kidx < nout
    h = np.full(n, float(h_init))
    steps = np.zeros(n, dtype=int)
    k1 = np.zeros_like(y)
    k1_ok = np.zeros(n, dtype=bool)
    fresh = np.zeros(n, dtype=bool)
    event_s = np.full(n, np.nan)
    event_y = np.full((dim, n), np.nan)
    g_prev = event(y) if event is not None else None

    def record(cols):
        tgt = outputs[kidx[cols]]
        hitm = s[cols] >= tgt
        hc = cols[hitm]
        if hc.size:
            ys[kidx[hc], :, hc] = y[:, hc].T
            kidx[hc] += 1
            active[hc] = kidx[hc] < nout

    while active.any():
        cols = np.nonzero(active)[0]
        tgt = outputs[kidx[cols]]
        if jump is not None:
            cand = ~fresh[cols]
            if cand.any():
                cc = cols[cand]
                mask, y_new, ds = jump(y[:, cc], tgt[cand] - s[cc])
                if mask.any():
                    jc = cc[mask]
                    y[:, jc] = y_new[:, mask]
                    s[jc] = np.where(ds[mask] >= tgt[cand][mask] - s[jc], tgt[cand][mask], s[jc] + ds[mask])
                    k1_ok[jc] = False
                    fresh[jc] = True
                    steps[jc] += 1
                    if on_step is not None:
                        on_step(s[jc], y[:, jc], jc)
                    record(jc)
                    keep = np.ones(cols.size, dtype=bool)
                    keep[np.isin(cols, jc)] = False
                    cols = cols[keep & active[cols]]
                    if cols.size == 0:
                        continue
                    tgt = outputs[kidx[cols]]
        fresh[cols] = False
        steps[cols] += 1
        if np.any(steps[cols] > max_steps):
            raise StepBudgetError(f"step budget of {max_steps} exhausted")
        yc = y[:, cols]
        need = ~k1_ok[cols]
        if need.any():
            k1[:, cols[need]] = rhs(yc[:, need])
            k1_ok[cols[need]] = True
        kc = k1[:, cols]
        room = tgt - s[cols]
        hh = np.minimum(h[cols], room)
        if step_cap is not None:
            hh = np.minimum(hh, step_cap(yc))
        hits = hh >= room
        if method == "rk4":
            y_new = rk4_step(rhs, yc, hh, kc)
            k_new = rhs(y_new)
            acc = np.isfinite(y_new).all(axis=0)
            if not acc.all():
                raise FloatingPointError("non-finite state in fixed-step integration")
            fac = np.ones(cols.size)
        else:
            y_new, err, k_new = dopri_step(rhs, yc, hh, kc)
            scale = atol + rtol * np.maximum(np.abs(yc), np.abs(y_new))
            en = np.sqrt(np.mean((err / scale) ** 2, axis=0))
            en = np.where(np.isfinite(en), en, np.inf)
            acc = en <= 1.0
            with np.errstate(divide="ignore"):
                fac = np.clip(0.9 * en ** -0.2, 0.2, 5.0)
            fac = np.where(acc, fac, np.minimum(fac, 0.9))
            if np.any(~acc & (hh < 1e-14 * np.maximum(1.0, s[cols]))):
                raise FloatingPointError("step size underflow")
        h_next = np.minimum(hh * fac, h_max)
        h[cols] = np.where(acc & hits, np.maximum(h_next, np.minimum(h[cols], h_max)), h_next)
        if method == "rk4":
            h[cols] = h_init
        ac = cols[acc]
        if ac.size == 0:
            continue
        ya = y_new[:, acc]
        if after_accept is not None:
            ya2 = after_accept(ya)
            rescaled = np.any(ya2 != ya, axis=0)
            ya = ya2
        else:
            rescaled = np.zeros(ac.size, dtype=bool)
        if event is not None:
            g_new = event(ya)
            fired = (g_prev[ac] < 0.0) & (g_new >= 0.0)
            if fired.any():
                for jj in np.nonzero(fired)[0]:
                    j = ac[jj]
                    y0j = yc[:, np.nonzero(cols == j)[0][0]][:, None]
                    k0j = kc[:, np.nonzero(cols == j)[0][0]][:, None]
                    hj = hh[np.nonzero(cols == j)[0][0]]
                    tau, yev = _bisect_event(rhs, event, y0j, k0j, hj, method)
                    event_s[j] = s[j] + tau
                    event_y[:, j] = yev[:, 0]
                    active[j] = False
                g_prev[ac] = g_new
                keepm = ~fired
                ac = ac[keepm]
                ya = ya[:, keepm]
                rescaled = rescaled[keepm]
                k_keep = k_new[:, acc][:, keepm]
                hits_acc = hits[acc][keepm]
            else:
                g_prev[ac] = g_new
                k_keep = k_new[:, acc]
                hits_acc = hits[acc]
        else:
            k_keep = k_new[:, acc]
            hits_acc = hits[acc]
        if ac.size == 0:
            continue
        y[:, ac] = ya
        k1[:, ac] = k_keep
        k1_ok[ac] = ~rescaled
        s_acc = s[ac] + hh[np.isin(cols, ac)]
        s[ac] = np.where(hits_acc, outputs[kidx[ac]], s_acc)
        if on_step is not None:
            on_step(s[ac], y[:, ac], ac)
        record(ac)
    return ys, event_s, event_y


def _bisect_event(rhs, event, y0, k0, h, method, tol=1e-9):
    """Locate the crossing inside one step by re-stepping from its start."""
    lo, hi = 0.0, float(h)

    def take(tau):
        if tau == 0.0:
            return y0
        if method == "rk4":
            return rk4_step(rhs, y0, tau, k0)
        return dopri_step(rhs, y0, tau, k0)[0]

    y_hi = take(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ym = take(mid)
        if event(ym)[0] >= 0.0:
            hi, y_hi = mid, ym
        else:
            lo = mid
    return hi, y_hi
