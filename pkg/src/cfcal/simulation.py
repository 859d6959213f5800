"""Discrete-time platoon simulation.

The platoon head replays an observed trajectory; every follower takes its
acceleration from a car-following law evaluated on the state at ``t - 1``
and integrates semi-implicitly::

    v[t] = max(min_speed, v[t-1] + a[t] * dt)
    x[t] = x[t-1] + v[t] * dt

``simulate_platoon`` is the plain sequential implementation. ``batch_rollout``
evaluates many parameter candidates and many platoons at once and is what
calibration uses; the test suite checks the two against each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .cf_models import CFState, ModelSpec, load_param_file, model_kind
from .trajectory_data import DT_TOL, Trajectory, load_trajectories

log = logging.getLogger(__name__)

COLLISION_POLICIES = ("error", "clamp", "ignore")
_GAP_FLOOR = 1e-6


class CollisionError(RuntimeError):
    def __init__(self, leader: str, follower: str, step: int, gap: float):
        super().__init__(f"collision: {follower} reached {leader} at step {step} (gap {gap:.3f} m)")
        self.leader, self.follower, self.step, self.gap = leader, follower, step, gap


class HorizonError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float | None = None
    horizon: int | None = None
    min_speed: float = 0.0
    min_gap_stop: float = 0.1
    collision_policy: str = "error"

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.collision_policy not in COLLISION_POLICIES:
            raise ValueError(f"collision_policy must be one of {COLLISION_POLICIES}")


@dataclass(frozen=True)
class FollowerInit:
    vehicle_id: str
    vclass: str
    length: float
    x0: float
    v0: float
    a0: float = 0.0


@dataclass
class PlatoonScenario:
    lead: Trajectory
    followers: list[FollowerInit]
    model: ModelSpec

    def __post_init__(self):
        xs = [self.lead.x[0]] + [f.x0 for f in self.followers]
        if any(b >= a for a, b in zip(xs[:-1], xs[1:])):
            raise ValueError("initial positions must strictly decrease along the platoon")
        if any(f.v0 < 0 for f in self.followers):
            raise ValueError("initial speeds must be non-negative")


@dataclass
class SimResult:
    t: np.ndarray
    vehicle_ids: list[str]
    x: np.ndarray  # (followers, T+1)
    v: np.ndarray
    a: np.ndarray
    lead: Trajectory
    followers: list[FollowerInit] = field(default_factory=list)
    clamp_events: list[tuple[str, int]] = field(default_factory=list)
    collision_events: list[tuple[str, str, int]] = field(default_factory=list)

    def trajectory(self, j: int) -> Trajectory:
        f = self.followers[j]
        lead_id = self.lead.vehicle_id if j == 0 else self.followers[j - 1].vehicle_id
        return Trajectory(f.vehicle_id, self.t.copy(), self.x[j].copy(), self.v[j].copy(),
                          self.a[j].copy(), vclass=f.vclass, length=f.length,
                          leader_id=[lead_id] * len(self.t))

    def to_trajectories(self, include_lead: bool = True) -> list[Trajectory]:
        out = [self.lead] if include_lead else []
        out += [self.trajectory(j) for j in range(len(self.followers))]
        return out


def replay_observed(traj: Trajectory, dt: float | None = None, horizon: int | None = None):
    """Observed (t, x, v, a) resampled on the simulation grid ``t0 + k*dt``.

    Exact sample copies when the grid lands on recorded timestamps, linear
    interpolation otherwise.
    """
    dt = traj.dt if dt is None else dt
    span = traj.t[-1] - traj.t[0]
    if horizon is None:
        horizon = int(math.floor(span / dt + DT_TOL))
    if horizon * dt > span + DT_TOL:
        raise HorizonError(
            f"horizon {horizon} x {dt:g} s exceeds the {span:g} s recorded for vehicle {traj.vehicle_id}")
    ratio = dt / traj.dt
    if abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1:
        step = int(round(ratio))
        idx = np.arange(horizon + 1) * step
        return traj.t[idx].copy(), traj.x[idx].copy(), traj.v[idx].copy(), traj.a[idx].copy()
    t = traj.t[0] + np.arange(horizon + 1) * dt
    return t, np.interp(t, traj.t, traj.x), np.interp(t, traj.t, traj.v), np.interp(t, traj.t, traj.a)


def simulate_platoon(sc: PlatoonScenario, cfg: SimConfig = SimConfig(), residuals=None,
                     order=None) -> SimResult:
    """Roll the platoon forward.

    Args:
        residuals: optional (followers, T+1) array added to the model
            acceleration of follower j at step t.
        order: optional permutation giving the update order of followers
            within a step. Every follower reads the t-1 snapshot, so the
            result does not depend on it.
    """
    dt = sc.lead.dt if cfg.dt is None else cfg.dt
    t, lx, lv, la = replay_observed(sc.lead, dt, cfg.horizon)
    T = len(t) - 1
    n = len(sc.followers)
    kind = model_kind(sc.model.kind)
    bumper = sc.model.gap_semantics == "bumper"
    lengths = [sc.lead.length] + [f.length for f in sc.followers]

    x = np.empty((n, T + 1))
    v = np.empty((n, T + 1))
    a = np.empty((n, T + 1))
    for j, f in enumerate(sc.followers):
        x[j, 0], v[j, 0], a[j, 0] = f.x0, f.v0, f.a0
    if residuals is not None:
        residuals = np.asarray(residuals, dtype=float)
        if residuals.shape != (n, T + 1):
            raise ValueError(f"residuals must have shape {(n, T + 1)}")
    order = range(n) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of follower indices")

    res = SimResult(t, [f.vehicle_id for f in sc.followers], x, v, a,
                    _replayed(sc.lead, t, lx, lv, la), list(sc.followers))

    for step in range(1, T + 1):
        for j in order:
            if j == 0:
                xl, vl = lx[step - 1], lv[step - 1]
            else:
                xl, vl = x[j - 1, step - 1], v[j - 1, step - 1]
            spacing = xl - x[j, step - 1]
            L = lengths[j]
            gap = spacing - L if bumper else spacing
            state = CFState(v[j, step - 1], max(gap, _GAP_FLOOR) if kind.name == "IDM" else gap,
                            vl - v[j, step - 1], 0.0 if bumper else L)
            p = sc.model.for_class(sc.followers[j].vclass)
            acc = float(kind.accel(state, p))
            if residuals is not None:
                acc += residuals[j, step]
            vn = v[j, step - 1] + acc * dt
            if vn < cfg.min_speed:
                vn = cfg.min_speed
                res.clamp_events.append((sc.followers[j].vehicle_id, step))
            a[j, step] = acc
            v[j, step] = vn
            x[j, step] = x[j, step - 1] + vn * dt

        if cfg.collision_policy == "ignore":
            continue
        for j in range(n):
            xl = lx[step] if j == 0 else x[j - 1, step]
            net = xl - lengths[j] - x[j, step]
            if net <= cfg.min_gap_stop:
                lead_id = sc.lead.vehicle_id if j == 0 else sc.followers[j - 1].vehicle_id
                if cfg.collision_policy == "error":
                    raise CollisionError(lead_id, sc.followers[j].vehicle_id, step, net)
                x[j, step] = xl - lengths[j] - cfg.min_gap_stop
                v[j, step] = 0.0
                res.collision_events.append((lead_id, sc.followers[j].vehicle_id, step))
    if res.clamp_events:
        log.debug("%d speed clamp events", len(res.clamp_events))
    return res


def _replayed(lead: Trajectory, t, x, v, a) -> Trajectory:
    return Trajectory(lead.vehicle_id, t, x, v, a, vclass=lead.vclass, length=lead.length)


# -- batched rollout -------------------------------------------------------------

@dataclass
class RolloutLayout:
    """Flattened description of one or more platoons for :func:`batch_rollout`.

    Followers of all platoons are stacked along one axis. ``leader[j] >= 0``
    points at another follower, ``leader[j] = -(h + 1)`` at head ``h``.
    Heads are padded past their own horizon by holding the last sample;
    followers are frozen once ``step > horizon[j]``.
    """

    head_x: np.ndarray  # (H, T+1)
    head_v: np.ndarray
    leader: np.ndarray  # (V,)
    leader_length: np.ndarray  # (V,)
    x0: np.ndarray
    v0: np.ndarray
    horizon: np.ndarray  # (V,) int
    vclass: list[str]
    dt: float

    @property
    def steps(self) -> int:
        return self.head_x.shape[1] - 1

    @property
    def n(self) -> int:
        return len(self.leader)


def batch_rollout(kind: str, params: dict, layout: RolloutLayout, gap_semantics: str = "bumper",
                  min_speed: float = 0.0, min_gap_stop: float = 0.1, offsets=None):
    """Simulate every follower for a batch of B parameter candidates.

    Args:
        params: ``{name: array (B, V)}`` per-follower parameter values.
        offsets: optional array broadcastable to (B, V, T+1) added to the
            model acceleration.

    Returns:
        x, v, a of shape (B, V, T+1) and ``first_collision`` (B, V), the
        first step at which the bumper gap dropped to ``min_gap_stop`` or
        -1. Colliding followers are held at the stop gap so the batch stays
        finite.
    """
    mk = model_kind(kind)
    B = next(iter(params.values())).shape[0]
    V, T, dt = layout.n, layout.steps, layout.dt
    p = mk.params(**params)
    bumper = gap_semantics == "bumper"

    x = np.empty((B, V, T + 1))
    v = np.empty((B, V, T + 1))
    a = np.zeros((B, V, T + 1))
    x[:, :, 0] = layout.x0
    v[:, :, 0] = layout.v0
    is_head = layout.leader < 0
    hidx = np.where(is_head, -layout.leader - 1, 0)
    fidx = np.where(is_head, 0, layout.leader)
    L = layout.leader_length
    ll = 0.0 if bumper else L
    first = np.full((B, V), -1, dtype=int)
    order = np.argsort(_depth(layout.leader), kind="stable")

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, T + 1):
            xp, vp = x[:, :, t - 1], v[:, :, t - 1]
            lxp = np.where(is_head, layout.head_x[hidx, t - 1], xp[:, fidx])
            lvp = np.where(is_head, layout.head_v[hidx, t - 1], vp[:, fidx])
            spacing = lxp - xp
            gap = spacing - L if bumper else spacing
            if mk.name == "IDM":
                gap = np.maximum(gap, _GAP_FLOOR)
            acc = mk.accel(CFState(vp, gap, lvp - vp, ll), p)
            if offsets is not None:
                acc = acc + offsets[..., t]
            active = t <= layout.horizon
            acc = np.where(active, acc, 0.0)
            vn = np.maximum(vp + acc * dt, min_speed)
            vn = np.where(active, vn, vp)
            xn = np.where(active, xp + vn * dt, xp)

            lx = np.where(is_head, layout.head_x[hidx, t], xn[:, fidx])
            hit = active & (lx - L - xn <= min_gap_stop)
            if hit.any():
                newly = hit & (first < 0)
                first[newly] = t
                for j in order:  # front to back so a clamped leader propagates
                    lxj = layout.head_x[hidx[j], t] if is_head[j] else xn[:, fidx[j]]
                    lim = lxj - L[j] - min_gap_stop
                    over = active[j] & (xn[:, j] > lim)
                    if np.any(over):
                        xn[over, j] = np.broadcast_to(lim, (B,))[over]
                        vn[over, j] = 0.0
            a[:, :, t] = acc
            v[:, :, t] = vn
            x[:, :, t] = xn
    return x, v, a, first


def _depth(leader: np.ndarray) -> np.ndarray:
    d = np.zeros(len(leader), dtype=int)
    for j in range(len(leader)):
        k, n = j, 0
        while leader[k] >= 0:
            k = leader[k]
            n += 1
            if n > len(leader):
                raise ValueError("cyclic leader layout")
        d[j] = n
    return d


def layout_from_scenario(sc: PlatoonScenario, cfg: SimConfig = SimConfig()) -> RolloutLayout:
    dt = sc.lead.dt if cfg.dt is None else cfg.dt
    _, lx, lv, _ = replay_observed(sc.lead, dt, cfg.horizon)
    n = len(sc.followers)
    lengths = [sc.lead.length] + [f.length for f in sc.followers]
    return RolloutLayout(
        head_x=lx[None], head_v=lv[None],
        leader=np.array([-1] + list(range(n - 1)), dtype=int),
        leader_length=np.array(lengths[:n], dtype=float),
        x0=np.array([f.x0 for f in sc.followers]), v0=np.array([f.v0 for f in sc.followers]),
        horizon=np.full(n, len(lx) - 1), vclass=[f.vclass for f in sc.followers], dt=dt,
    )


def per_follower_params(spec: ModelSpec, vclass: list[str]) -> dict:
    """Parameter arrays of shape (1, V) for a single ModelSpec."""
    names = model_kind(spec.kind).params.names
    return {nm: np.array([[getattr(spec.for_class(c), nm) for c in vclass]]) for nm in names}


# -- scenario files ---------------------------------------------------------------

def load_scenario(path):
    """Read a YAML scenario file; returns ``(PlatoonScenario, SimConfig)``.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    base = path.parent
    lead_doc = doc["lead"]
    data = load_trajectories(base / lead_doc["file"])
    lead_id = str(lead_doc.get("vehicle", next(iter(data))))
    if lead_id not in data:
        raise ValueError(f"lead vehicle {lead_id!r} not found in {lead_doc['file']}")
    lead = data[lead_id]
    if "t_start" in lead_doc or "t_end" in lead_doc:
        lead = lead.window(float(lead_doc.get("t_start", -np.inf)), float(lead_doc.get("t_end", np.inf)))

    followers = [FollowerInit(str(f["id"]), f.get("class", "small"), float(f.get("length", 4.5)),
                              float(f["x0"]), float(f["v0"]), float(f.get("a0", 0.0)))
                 for f in doc["followers"]]
    m = doc["model"]
    if "params" in m:
        params = dict(m["params"])
    else:
        table = load_param_file(base / m["param_file"]) if "param_file" in m else load_param_file()
        params = dict(table[m["param_label"]][model_kind(m["kind"]).name])
    if len(params) == 1:
        only = next(iter(params.values()))
        params = {"small": only, "large": only}
    model = ModelSpec(m["kind"], params, m.get("gap_semantics", "bumper"))
    s = doc.get("sim", {})
    cfg = SimConfig(dt=s.get("dt"), horizon=s.get("horizon"), min_speed=float(s.get("min_speed", 0.0)),
                    min_gap_stop=float(s.get("min_gap_stop", 0.1)),
                    collision_policy=s.get("collision_policy", "clamp"))
    return PlatoonScenario(lead, followers, model), cfg
