"""Closed-form propagation of acceleration errors into speed and position.

Unit time steps throughout: index 0 is the error-free initial state and
entries 1..T are the simulated steps. For a single vehicle

    speed error    e_v[t] = sum_{s<=t} e_a[s]
    position error e_x[t] = sum_{s<=t} (t + 1 - s) e_a[s]

For a platoon driven by the linear law, acceleration errors couple through
the gap and relative-speed terms; :func:`multi_vehicle_error` solves that
recursion vehicle by vehicle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .cf_models import LinearParams


def _require_unit_dt(dt):
    if dt != 1:
        raise ValueError(f"closed forms assume unit time steps, got dt={dt}")


def _check_origin(eps_a) -> np.ndarray:
    e = np.asarray(eps_a, dtype=float)
    if e.ndim != 1 or len(e) < 2:
        raise ValueError("error series needs index 0 plus at least one step")
    if e[0] != 0:
        raise ValueError("error series must start at 0")
    return e


def speed_error_closed_form(eps_a) -> np.ndarray:
    return np.cumsum(_check_origin(eps_a))


def position_error_closed_form(eps_a) -> np.ndarray:
    # direct weighted sum sum_{s<=t} (t+1-s) e[s]; a running sum of running sums
    # is equivalent but accumulates roundoff even for a single impulse
    e = _check_origin(eps_a)
    return np.convolve(e, np.arange(1.0, len(e) + 1))[:len(e)]


class SpeedMSETerms(NamedTuple):
    total: float
    mse_a: float
    convolution: float
    cross: float


class PositionMSETerms(NamedTuple):
    total: float
    lead: float
    diagonal_correction: float
    cross: float


def mse_speed_decomposition(eps_a) -> SpeedMSETerms:
    """MSE of the speed error split into MSE^a, a time-weighted square term and a cross term.

    MSE^v = MSE^a + (1/T) sum_t (T-t) e_t^2
            + (2/T) sum_{t<T} e_t sum_{s>t} (T-s+1) e_s
    """
    e = _check_origin(eps_a)[1:]
    T = len(e)
    t = np.arange(1, T + 1)
    mse_a = float(np.sum(e**2) / T)
    conv = float(np.sum((T - t) * e**2) / T)
    # tail[t] = sum_{s>t} (T-s+1) e_s
    w = (T - t + 1) * e
    tail = np.concatenate([np.cumsum(w[::-1])[::-1][1:], [0.0]])
    cross = float(2.0 / T * np.sum(e * tail))
    return SpeedMSETerms(mse_a + conv + cross, mse_a, conv, cross)


def _square_pyramid(k):
    return k * (k + 1) * (2 * k + 1) / 6.0


def mse_position_decomposition(eps_a) -> PositionMSETerms:
    """MSE of the position error as lead * MSE^a + diagonal correction + cross term.

    The squared-error weight of e_s summed over t = s..T is
    sum_{k=1}^{T+1-s} k^2; ``lead`` applies the weight of s = 1 to MSE^a and
    ``diagonal_correction`` holds the remainder. ``cross`` is
    (2/T) sum_t sum_{s<u<=t} (t+1-s)(t+1-u) e_s e_u.
    """
    e = _check_origin(eps_a)[1:]
    T = len(e)
    s = np.arange(1, T + 1)
    mse_a = float(np.sum(e**2) / T)
    w = _square_pyramid(T + 1 - s)
    lead = float(w[0] * mse_a)
    diag = float(np.sum((w - w[0]) * e**2) / T)
    cross = 0.0
    for t in range(1, T + 1):
        u = (t + 1 - s[:t]) * e[:t]
        cross += 0.5 * (u.sum() ** 2 - np.sum(u**2))
    cross = float(2.0 / T * cross)
    return PositionMSETerms(lead + diag + cross, lead, diag, cross)


@dataclass
class ErrorSeries:
    """Per-vehicle error arrays, shape (vehicles, T+1); row 0 is the exogenous head."""

    eps_a: np.ndarray
    eps_v: np.ndarray
    eps_x: np.ndarray
    r: np.ndarray


def _check_residuals(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] < 2 or r.shape[1] < 2:
        raise ValueError("residuals must be (vehicles incl. head, T+1) with at least 2 of each")
    if np.any(r[:, 0] != 0):
        raise ValueError("residuals at step 0 must be zero")
    return r


def _coupling(k: LinearParams, convention: str) -> float:
    if convention == "simulation":
        return 1.0
    if convention == "literal":
        return -1.0
    raise ValueError("convention must be 'simulation' or 'literal'")


def multi_vehicle_error(r, k: LinearParams, dt: float = 1, convention: str = "simulation") -> np.ndarray:
    """Acceleration errors of a linear-law platoon caused by residuals ``r``.

    ``r[n, t]`` is an extra acceleration injected into vehicle ``n`` at
    step ``t``. Row 0 is the replayed head: its errors equal ``r[0]``
    (usually zero, nonzero for a perturbed lead trajectory). Errors are
    "perturbed run minus clean run" and satisfy

        e[n,t] = r[n,t] + sum_{i<t} (k1 (t-i) - k2) (e[n,i] - e[n-1,i])

    which is what the semi-implicit simulator produces. ``convention =
    'literal'`` flips the coupling sign to the printed form
    ``(e[n-1,i] - e[n,i])``; it does not describe the simulator.
    """
    _require_unit_dt(dt)
    r = _check_residuals(r)
    sign = _coupling(k, convention)
    N, T1 = r.shape
    e = np.zeros_like(r)
    e[0] = r[0]
    for n in range(1, N):
        # state errors of vehicle n and its leader, updated incrementally
        dv = 0.0  # e_v[n] - e_v[n-1] at t-1
        dx = 0.0  # e_x[n] - e_x[n-1] at t-1
        for t in range(1, T1):
            e[n, t] = r[n, t] + sign * (k.k1 * dx - k.k2 * dv)
            dv += e[n, t] - e[n - 1, t]
            dx += dv
    return e


def recursion_residual(e, r, k: LinearParams, convention: str = "simulation") -> float:
    """Max abs violation of the propagation recursion by ``e`` (direct double sum)."""
    sign = _coupling(k, convention)
    e = np.asarray(e, float)
    r = np.asarray(r, float)
    worst = 0.0
    for n in range(1, e.shape[0]):
        for t in range(1, e.shape[1]):
            i = np.arange(1, t)
            rhs = r[n, t] + sign * np.sum((k.k1 * (t - i) - k.k2) * (e[n, i] - e[n - 1, i]))
            worst = max(worst, abs(e[n, t] - rhs))
    return worst


def first_order_expansion(r, k: LinearParams, convention: str = "simulation") -> np.ndarray:
    """Explicit two-level expansion of the recursion in terms of residuals only.

    e[n,t] ~ r[n,t] + sum_{s<t} c(t-s) (d[n,s] + sum_{u<s} c(t-u) d[n-1,u])
    with c(m) = m k1 - k2 and d[n,s] = sign * (r[n-1,s] - r[n,s]) where
    the sign follows ``convention``. Exact to first order in (k1, k2);
    used only as a cross-check of :func:`multi_vehicle_error`.
    """
    r = _check_residuals(r)
    sign = -_coupling(k, convention)
    N, T1 = r.shape
    out = np.zeros_like(r)
    out[0] = r[0]
    for n in range(1, N):
        prev2 = r[n - 2] if n >= 2 else None
        for t in range(1, T1):
            acc = r[n, t]
            for s in range(1, t):
                inner = 0.0
                for u in range(1, s if prev2 is not None else 1):  # the head has no coupling term
                    inner += ((t - u) * k.k1 - k.k2) * sign * (prev2[u] - r[n - 1, u])
                acc += ((t - s) * k.k1 - k.k2) * (sign * (r[n - 1, s] - r[n, s]) + inner)
            out[n, t] = acc
    return out


def propagate(r, k: LinearParams, dt: float = 1) -> ErrorSeries:
    e = multi_vehicle_error(r, k, dt)
    return ErrorSeries(e, np.cumsum(e, axis=1), np.cumsum(np.cumsum(e, axis=1), axis=1), np.asarray(r, float))


# -- reference cases ---------------------------------------------------------------

FIG4_PARAMS = LinearParams(-0.053, 0.284, 0.918)


def single_impulse_case(T: int = 20, t_err: int = 5, size: float = 0.2) -> ErrorSeries:
    """One vehicle, one acceleration error of ``size`` at step ``t_err``."""
    e = np.zeros(T + 1)
    e[t_err] = size
    return ErrorSeries(e[None], speed_error_closed_form(e)[None], position_error_closed_form(e)[None],
                       np.zeros((1, T + 1)))


def platoon_impulse_case(n_vehicles: int = 3, T: int = 20, size: float = 5.0,
                         k: LinearParams = FIG4_PARAMS) -> ErrorSeries:
    """Residual ``size`` on the first follower at step 1, propagated down the platoon."""
    r = np.zeros((n_vehicles + 1, T + 1))
    r[1, 1] = size
    return propagate(r, k)


def figure_case(case: str, **kw) -> ErrorSeries:
    if case == "fig2":
        return single_impulse_case(**kw)
    if case == "fig4":
        return platoon_impulse_case(**kw)
    raise ValueError(f"unknown case {case!r}; expected 'fig2' or 'fig4'")


def write_error_csv(path, es: ErrorSeries, first_vehicle: int = 0):
    """Columns n, t, eps_a, eps_v, eps_x; one row per vehicle and step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "t", "eps_a", "eps_v", "eps_x"])
        for n in range(es.eps_a.shape[0]):
            for t in range(es.eps_a.shape[1]):
                w.writerow([n + first_vehicle, t, repr(float(es.eps_a[n, t])),
                            repr(float(es.eps_v[n, t])), repr(float(es.eps_x[n, t]))])
