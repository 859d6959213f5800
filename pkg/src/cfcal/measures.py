"""Microscopic error metrics and macroscopic corridor measures.

Macroscopic measures are per time interval: the mean segment traversal time
and the mean per-vehicle fuel consumption (L/100km) of the vehicles whose
segment entry falls in that interval.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

VT_MICRO_FILE = Path(__file__).with_name("data") / "vt_micro_fuel.csv"


def mse(series_obs, series_sim) -> float:
    """Mean squared difference. Pass the t = 1..T part of a series."""
    o = np.asarray(series_obs, dtype=float)
    s = np.asarray(series_sim, dtype=float)
    if o.shape != s.shape:
        raise ValueError(f"length mismatch: {o.shape} vs {s.shape}")
    if o.size == 0:
        raise ValueError("mse of an empty series")
    return float(np.mean((o - s) ** 2))


class NotTraversed(ValueError):
    pass


def crossing_time(t, x, pos: float) -> float:
    """First time the position reaches ``pos`` (linear interpolation between samples)."""
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    hit = np.flatnonzero(x >= pos)
    if len(hit) == 0:
        raise NotTraversed(f"position {pos:g} never reached")
    k = hit[0]
    if k == 0:
        if x[0] == pos:
            return float(t[0])
        raise NotTraversed(f"trajectory starts beyond {pos:g}")
    return float(t[k - 1] + (pos - x[k - 1]) / (x[k] - x[k - 1]) * (t[k] - t[k - 1]))


def traversal_time(traj, entry_x: float, exit_x: float) -> float:
    if not entry_x < exit_x:
        raise ValueError("entry_x must be < exit_x")
    return crossing_time(traj.t, traj.x, exit_x) - crossing_time(traj.t, traj.x, entry_x)


def eq16_mean_rate(traj, t1: float, t2: float) -> float:
    """(x(t2) - x(t1)) / (t2 - t1): a mean speed over the window, positions interpolated."""
    if not t1 < t2:
        raise ValueError("t1 must be < t2")
    if t1 < traj.t[0] - 1e-9 or t2 > traj.t[-1] + 1e-9:
        raise ValueError("window outside trajectory span")
    x1, x2 = np.interp([t1, t2], traj.t, traj.x)
    return float((x2 - x1) / (t2 - t1))


# -- fuel ------------------------------------------------------------------------

@dataclass(frozen=True)
class FuelCoefficients:
    """Exponent-polynomial coefficients ``L`` (a >= 0) and ``M`` (a < 0).

    ``L[m, p]`` multiplies ``v**m * a**p``. Speeds and accelerations in SI
    are multiplied by ``speed_scale`` / ``accel_scale`` before evaluation
    (3.6 for coefficient sets fitted in km/h and km/h/s). Scaled inputs are
    clamped to ``speed_range`` / ``accel_range`` when given.
    """

    L: np.ndarray
    M: np.ndarray
    speed_scale: float = 1.0
    accel_scale: float = 1.0
    source: str = ""
    sha256: str = ""
    speed_range: tuple[float, float] | None = None
    accel_range: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("L", "M"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (4, 4):
                raise ValueError(f"{name} must be 4x4, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls) -> FuelCoefficients:
        return cls(np.zeros((4, 4)), np.zeros((4, 4)))


def load_fuel_coefficients(path=VT_MICRO_FILE) -> FuelCoefficients:
    """Read an 8x4 CSV (4 rows of L then 4 rows of M; row = speed power, column = accel power).

    Lines starting with ``#`` are comments; ``# speed_scale: 3.6`` style
    comment lines set the unit scales.
    """
    raw = Path(path).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    rows, meta = [], {}
    for line in io.StringIO(raw.decode("utf-8")):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if ":" in body:
                key, val = body.split(":", 1)
                meta[key.strip()] = val.strip()
            continue
        rows.append([float(c) for c in next(csv.reader([s]))])
    arr = np.array(rows, dtype=float)
    if arr.shape != (8, 4):
        raise ValueError(f"{path}: expected 8 rows x 4 columns of coefficients, got {arr.shape}")
    return FuelCoefficients(arr[:4], arr[4:], float(meta.get("speed_scale", 1.0)),
                            float(meta.get("accel_scale", 1.0)), meta.get("source", str(path)), digest,
                            _range(meta.get("speed_range")), _range(meta.get("accel_range")))


def _range(text):
    if text is None:
        return None
    lo, hi = (float(p) for p in text.split(","))
    if not lo < hi:
        raise ValueError(f"bad range {text!r}")
    return lo, hi


def fuel_rate(v, a, c: FuelCoefficients):
    """Instantaneous fuel rate (L/s): exp(sum_{m,p} K[m,p] v^m a^p), K = L or M by sign of a."""
    v = np.asarray(v, dtype=float) * c.speed_scale
    a = np.asarray(a, dtype=float) * c.accel_scale
    if c.speed_range is not None:
        v = np.clip(v, *c.speed_range)
    if c.accel_range is not None:
        a = np.clip(a, *c.accel_range)
    vp = np.stack([np.ones_like(v), v, v**2, v**3], axis=-1)
    ap = np.stack([np.ones_like(a), a, a**2, a**3], axis=-1)
    pos = np.einsum("...m,mp,...p->...", vp, c.L, ap)
    neg = np.einsum("...m,mp,...p->...", vp, c.M, ap)
    out = np.exp(np.where(a >= 0, pos, neg))
    return float(out) if out.ndim == 0 else out


def fuel_per_distance(total_liters, distance_m):
    """L/100km; NaN where the distance is zero."""
    d = np.asarray(distance_m, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(d > 0, np.asarray(total_liters) / d * 1e5, np.nan)
    return float(out) if out.ndim == 0 else out


def vehicle_fuel(traj, c: FuelCoefficients, dt: float | None = None):
    """Total litres and L/100km (None if the vehicle did not move).

    Every sample stands for one step of length ``dt``, so the total is
    ``sum_t fuel_rate(v_t, a_t) * dt`` over all samples and is additive
    under concatenation of trajectories.
    """
    if dt is None:
        dt = float(traj.t[1] - traj.t[0])
    total = float(np.sum(fuel_rate(np.atleast_1d(traj.v), np.atleast_1d(traj.a), c)) * dt)
    x = np.atleast_1d(np.asarray(traj.x, float))
    per = fuel_per_distance(total, float(x[-1] - x[0]))
    return total, (None if np.isnan(per) else per)


# -- aggregation --------------------------------------------------------------------

@dataclass(frozen=True)
class IntervalSpec:
    """Time-interval partition and the segment whose traversal is measured.

    ``boundaries`` has one more entry than there are intervals. A vehicle
    belongs to the interval containing its segment-entry time.
    """

    boundaries: tuple[float, ...]
    entry_x: float
    exit_x: float
    edge: str | None = None

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        if len(b) < 2 or any(q <= p for p, q in zip(b[:-1], b[1:])):
            raise ValueError("interval boundaries must be strictly increasing, at least 2 values")
        if not self.entry_x < self.exit_x:
            raise ValueError("entry_x must be < exit_x")
        object.__setattr__(self, "boundaries", b)

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    def interval_of(self, t: float) -> int | None:
        b = self.boundaries
        if t < b[0] or t > b[-1]:
            return None
        k = int(np.searchsorted(b, t, side="right")) - 1
        return min(k, len(b) - 2)

    @classmethod
    def from_dict(cls, d: dict) -> IntervalSpec:
        if "boundaries" in d:
            bounds = d["boundaries"]
        else:
            bounds = np.arange(float(d["start"]), float(d["end"]) + 1e-9, float(d["width"])).tolist()
        return cls(tuple(bounds), float(d["entry_x"]), float(d["exit_x"]), d.get("edge"))

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "entry_x": self.entry_x,
                "exit_x": self.exit_x, "edge": self.edge}


@dataclass(frozen=True)
class IntervalMeasure:
    index: int
    start: float
    end: float
    count: int
    travel_time: float | None
    fuel: float | None


@dataclass
class MacroMeasures:
    intervals: list[IntervalMeasure]
    excluded: list[tuple[str, str]] = field(default_factory=list)  # (vehicle, reason)

    @property
    def empty(self) -> list[int]:
        return [m.index for m in self.intervals if m.count == 0]

    def travel_times(self) -> np.ndarray:
        return np.array([np.nan if m.travel_time is None else m.travel_time for m in self.intervals])

    def fuels(self) -> np.ndarray:
        return np.array([np.nan if m.fuel is None else m.fuel for m in self.intervals])


def vehicle_macro(traj, spec: IntervalSpec, c: FuelCoefficients):
    """(interval index, traversal time, L/100km) for one vehicle; raises NotTraversed."""
    t_in = crossing_time(traj.t, traj.x, spec.entry_x)
    t_out = crossing_time(traj.t, traj.x, spec.exit_x)
    k = spec.interval_of(t_in)
    if k is None:
        raise NotTraversed(f"entry time {t_in:g} outside the interval range")
    _, per = vehicle_fuel(traj, c)
    return k, t_out - t_in, per


def aggregate_macro(trajs, spec: IntervalSpec, c: FuelCoefficients) -> MacroMeasures:
    items = trajs.values() if isinstance(trajs, dict) else trajs
    tt: dict[int, list[float]] = {k: [] for k in range(spec.n_intervals)}
    fu: dict[int, list[float]] = {k: [] for k in range(spec.n_intervals)}
    excluded = []
    for tr in items:
        if spec.edge is not None and tr.edge is not None and spec.edge not in tr.edge:
            continue
        try:
            k, T, per = vehicle_macro(tr, spec, c)
        except NotTraversed as exc:
            excluded.append((tr.vehicle_id, str(exc)))
            continue
        tt[k].append(T)
        if per is not None:
            fu[k].append(per)
    out = []
    b = spec.boundaries
    for k in range(spec.n_intervals):
        n = len(tt[k])
        if n == 0:
            log.info("interval %d [%g, %g) has no vehicles", k, b[k], b[k + 1])
        out.append(IntervalMeasure(k, b[k], b[k + 1], n,
                                   float(np.mean(tt[k])) if n else None,
                                   float(np.mean(fu[k])) if fu[k] else None))
    return MacroMeasures(out, excluded)
