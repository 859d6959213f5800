"""Trajectory loading, cleaning, differentiation and platoon assembly."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger(__name__)

DT_TOL = 1e-6
DEFAULT_LENGTH = {"small": 4.5, "large": 12.0}
LARGE_LENGTH_THRESHOLD = 7.5

# canonical column -> default header name (Table-2 style)
DEFAULT_SCHEMA = {
    "id": "id",
    "t_sec": "t_sec",
    "position": "position",
    "x_utm": "x_utm",
    "y_utm": "y_utm",
    "v": "v",
    "a": "a",
    "lane": "lane",
    "edge": "edge",
    "pre_id": "pre_id",
    "class": "class",
    "length": "length",
}


class TrajectoryFormatError(ValueError):
    """Malformed trajectory input; ``line`` is the 1-based file line when known."""

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class TrajectoryPoint:
    vehicle_id: str
    t: float
    x: float
    y: float | None
    v: float
    a: float
    lane: str | None = None
    edge: str | None = None
    leader_id: str | None = None


@dataclass
class Trajectory:
    """Kinematic record of one vehicle on a uniform time grid.

    Arrays share one length. ``y``, ``lane``, ``edge`` and ``leader_id`` may
    be ``None`` when the source did not provide them; ``leader_id`` entries
    are ``None`` where no leader was recorded.
    """

    vehicle_id: str
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    vclass: str = "small"
    length: float = DEFAULT_LENGTH["small"]
    y: np.ndarray | None = None
    lane: list | None = None
    edge: list | None = None
    leader_id: list | None = None
    cleaned: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
        n = len(self.t)
        if n < 2:
            raise ValueError(f"vehicle {self.vehicle_id}: trajectory needs at least 2 points")
        for name in ("x", "v", "a", "y", "lane", "edge", "leader_id", "cleaned"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"vehicle {self.vehicle_id}: field {name} has length {len(arr)} != {n}")

    def __len__(self):
        return len(self.t)

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def points(self) -> list[TrajectoryPoint]:
        def opt(seq, i):
            return None if seq is None else seq[i]

        return [
            TrajectoryPoint(self.vehicle_id, float(self.t[i]), float(self.x[i]),
                            None if self.y is None else float(self.y[i]),
                            float(self.v[i]), float(self.a[i]), opt(self.lane, i),
                            opt(self.edge, i), opt(self.leader_id, i))
            for i in range(len(self))
        ]

    def window(self, t_start: float, t_end: float) -> Trajectory:
        """Sub-trajectory with t_start <= t <= t_end (tolerant to float noise)."""
        m = (self.t >= t_start - DT_TOL) & (self.t <= t_end + DT_TOL)
        idx = np.flatnonzero(m)
        return self._take(idx)

    def _take(self, idx) -> Trajectory:
        def pick(seq):
            if seq is None:
                return None
            if isinstance(seq, np.ndarray):
                return seq[idx]
            return [seq[i] for i in idx]

        return replace(self, t=self.t[idx], x=self.x[idx], v=self.v[idx], a=self.a[idx],
                       y=pick(self.y), lane=pick(self.lane), edge=pick(self.edge),
                       leader_id=pick(self.leader_id), cleaned=pick(self.cleaned))


@dataclass(frozen=True)
class CleaningConfig:
    angle_threshold: float = 30.0
    window: int = 5

    def __post_init__(self):
        if not 0 < self.angle_threshold < 180:
            raise ValueError("angle_threshold must lie in (0, 180) degrees")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd integer >= 3")


# -- corridor reference lines --------------------------------------------------

@dataclass
class Corridor:
    """Per-edge reference polylines used to turn (x_utm, y_utm) into arc length."""

    edges: dict[str, np.ndarray]
    offsets: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> Corridor:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        edges, offsets = {}, {}
        for eid, spec in raw["edges"].items():
            line = np.asarray(spec["polyline"], dtype=float)
            if line.ndim != 2 or line.shape[1] != 2 or len(line) < 2:
                raise ValueError(f"edge {eid}: polyline needs >= 2 (x, y) vertices")
            edges[str(eid)] = line
            offsets[str(eid)] = float(spec.get("offset", 0.0))
        return cls(edges, offsets)

    def edge_length(self, edge: str) -> float:
        line = self.edges[edge]
        return float(np.sum(np.hypot(*np.diff(line, axis=0).T)))

    def arc_length(self, edge: str, x, y) -> np.ndarray:
        """Project points onto the edge polyline; return offset + arc length."""
        line = self.edges[str(edge)]
        p = np.column_stack([np.atleast_1d(x), np.atleast_1d(y)]).astype(float)
        seg0, seg1 = line[:-1], line[1:]
        d = seg1 - seg0
        seg_len = np.hypot(d[:, 0], d[:, 1])
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        rel = p[:, None, :] - seg0[None, :, :]
        u = np.clip(np.einsum("psk,sk->ps", rel, d) / np.maximum(seg_len**2, 1e-300), 0.0, 1.0)
        proj = seg0[None] + u[..., None] * d[None]
        dist = np.linalg.norm(p[:, None, :] - proj, axis=2)
        best = np.argmin(dist, axis=1)
        s = cum[best] + u[np.arange(len(p)), best] * seg_len[best]
        return self.offsets.get(str(edge), 0.0) + s


# -- loading -------------------------------------------------------------------

def _opt_float(val: str | None, line: int, col: str) -> float | None:
    if val is None or val.strip() == "":
        return None
    try:
        return float(val)
    except ValueError:
        raise TrajectoryFormatError(f"column {col!r}: cannot parse {val!r} as a number", line) from None


def _opt_str(val: str | None) -> str | None:
    if val is None:
        return None
    val = val.strip()
    return None if val in ("", "nan", "None", "-1") else val


def load_trajectories(path, schema: dict | None = None,
                      corridor: Corridor | None = None) -> dict[str, Trajectory]:
    """Read a trajectory CSV into ``{vehicle_id: Trajectory}`` sorted by id then time.

    ``schema`` maps canonical names (see ``DEFAULT_SCHEMA``) to header names.
    Position comes from ``position`` when present, else from ``x_utm``/``y_utm``
    projected on ``corridor`` (or ``x_utm`` itself without a corridor).
    Missing speed/acceleration columns are filled by :func:`differentiate`.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrajectoryFormatError("empty file (no header)", 1) from None
        pos = {h: i for i, h in enumerate(header)}

        def has(name):
            return cols[name] in pos

        required = ["id", "t_sec"]
        missing = [cols[c] for c in required if not has(c)]
        if not has("position") and not has("x_utm"):
            missing.append(f"{cols['position']} (or {cols['x_utm']}+{cols['y_utm']})")
        if missing:
            raise TrajectoryFormatError(f"missing required column(s): {', '.join(missing)}", 1)

        rows: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TrajectoryFormatError(f"expected {len(header)} fields, got {len(row)}", line_no)

            def get(name):
                return row[pos[cols[name]]] if has(name) else None

            vid = _opt_str(get("id"))
            if vid is None:
                raise TrajectoryFormatError("empty vehicle id", line_no)
            t = _opt_float(get("t_sec"), line_no, cols["t_sec"])
            if t is None:
                raise TrajectoryFormatError("empty timestamp", line_no)
            rec = {
                "t": t,
                "position": _opt_float(get("position"), line_no, cols["position"]),
                "x_utm": _opt_float(get("x_utm"), line_no, cols["x_utm"]),
                "y_utm": _opt_float(get("y_utm"), line_no, cols["y_utm"]),
                "v": _opt_float(get("v"), line_no, cols["v"]),
                "a": _opt_float(get("a"), line_no, cols["a"]),
                "lane": _opt_str(get("lane")),
                "edge": _opt_str(get("edge")),
                "pre_id": _opt_str(get("pre_id")),
                "class": _opt_str(get("class")),
                "length": _opt_float(get("length"), line_no, cols["length"]),
                "line": line_no,
            }
            if rec["position"] is None and rec["x_utm"] is None:
                raise TrajectoryFormatError("no position value", line_no)
            rows.setdefault(vid, []).append(rec)

    out = {}
    for vid in sorted(rows, key=_id_key):
        recs = sorted(rows[vid], key=lambda r: r["t"])
        out[vid] = _build(vid, recs, has, corridor)
    return out


def _id_key(vid: str):
    try:
        return (0, float(vid), vid)
    except ValueError:
        return (1, 0.0, vid)


def _build(vid, recs, has, corridor) -> Trajectory:
    t = np.array([r["t"] for r in recs])
    if len(t) < 2:
        raise TrajectoryFormatError(f"vehicle {vid}: needs at least 2 samples", recs[0]["line"])
    steps = np.diff(t)
    dt = steps[0]
    if dt <= 0:
        raise TrajectoryFormatError(f"vehicle {vid}: duplicate timestamp t={t[1]:g}", recs[1]["line"])
    bad = np.flatnonzero(np.abs(steps - dt) > DT_TOL)
    if len(bad):
        i = bad[0] + 1
        raise TrajectoryFormatError(f"vehicle {vid}: non-uniform time step at t={t[i]:g}", recs[i]["line"])

    edge = [r["edge"] for r in recs] if has("edge") else None
    lane = [r["lane"] for r in recs] if has("lane") else None
    y = None
    if has("position") and all(r["position"] is not None for r in recs):
        x = np.array([r["position"] for r in recs])
        if has("y_utm") and all(r["y_utm"] is not None for r in recs):
            y = np.array([r["y_utm"] for r in recs])
    else:
        xu = np.array([np.nan if r["x_utm"] is None else r["x_utm"] for r in recs])
        yu = np.array([0.0 if r["y_utm"] is None else r["y_utm"] for r in recs])
        y = yu
        if corridor is not None:
            if edge is None or any(e is None for e in edge):
                raise TrajectoryFormatError(f"vehicle {vid}: corridor projection needs an edge per row",
                                            recs[0]["line"])
            x = np.concatenate([corridor.arc_length(e, xu[i:i + 1], yu[i:i + 1]) for i, e in enumerate(edge)])
        else:
            x = xu

    vclass = next((r["class"] for r in recs if r["class"]), None)
    length = next((r["length"] for r in recs if r["length"] is not None), None)
    if vclass is None:
        vclass = "large" if (length is not None and length >= LARGE_LENGTH_THRESHOLD) else "small"
    if vclass not in DEFAULT_LENGTH:
        raise TrajectoryFormatError(f"vehicle {vid}: unknown class {vclass!r}", recs[0]["line"])
    if length is None:
        length = DEFAULT_LENGTH[vclass]

    have_v = has("v") and all(r["v"] is not None for r in recs)
    have_a = has("a") and all(r["a"] is not None for r in recs)
    traj = Trajectory(
        vehicle_id=vid, t=t, x=x,
        v=np.array([r["v"] for r in recs]) if have_v else np.zeros_like(t),
        a=np.array([r["a"] for r in recs]) if have_a else np.zeros_like(t),
        vclass=vclass, length=float(length), y=y, lane=lane, edge=edge,
        leader_id=[r["pre_id"] for r in recs] if has("pre_id") else None,
    )
    if not (have_v and have_a):
        d = differentiate(traj)
        traj = replace(traj, v=traj.v if have_v else d.v, a=traj.a if have_a else d.a)
    return traj


def write_trajectories(path, trajs, extra_cleaned: bool = False):
    """Write trajectories in the canonical CSV schema.

    With ``extra_cleaned`` a ``cleaned`` 0/1 flag column is appended.
    """
    header = ["id", "t_sec", "position", "y_utm", "v", "a", "lane", "edge", "pre_id", "class", "length"]
    if extra_cleaned:
        header.append("cleaned")
    items = trajs.values() if isinstance(trajs, dict) else trajs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for tr in items:
            for i in range(len(tr)):
                row = [tr.vehicle_id, _fmt(tr.t[i]), _fmt(tr.x[i]),
                       "" if tr.y is None else _fmt(tr.y[i]), _fmt(tr.v[i]), _fmt(tr.a[i]),
                       "" if tr.lane is None or tr.lane[i] is None else tr.lane[i],
                       "" if tr.edge is None or tr.edge[i] is None else tr.edge[i],
                       "" if tr.leader_id is None or tr.leader_id[i] is None else tr.leader_id[i],
                       tr.vclass, _fmt(tr.length)]
                if extra_cleaned:
                    row.append(int(tr.cleaned[i]) if tr.cleaned is not None else 0)
                w.writerow(row)


def _fmt(x) -> str:
    return repr(float(x))


# -- cleaning ------------------------------------------------------------------

def _xy(traj: Trajectory):
    y = traj.y if traj.y is not None else np.zeros_like(traj.x)
    return traj.x, y


def turning_angles(x, y) -> np.ndarray:
    """Angle (degrees) between consecutive direction vectors at each interior vertex.

    Entry ``i`` belongs to vertex ``i + 1``. NaN where a vector has zero length.
    """
    g = np.column_stack([np.diff(x), np.diff(y)])
    a, b = g[:-1], g[1:]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ang[(na == 0) | (nb == 0)] = np.nan
    return ang


def detect_drift_points(traj: Trajectory, cfg: CleaningConfig = CleaningConfig()) -> set[int]:
    """Indices of vertices forming a sharp spike (interior angle below the threshold).

    A turning angle near 180 degrees means the path folds back on itself;
    the vertex is flagged when ``180 - angle < cfg.angle_threshold``.
    """
    if len(traj) < 3:
        return set()
    ang = turning_angles(*_xy(traj))
    with np.errstate(invalid="ignore"):
        hit = (180.0 - ang) < cfg.angle_threshold
    return {int(i) + 1 for i in np.flatnonzero(hit)}


def _fill(values: np.ndarray, removed: np.ndarray, half: int) -> np.ndarray:
    out = values.copy()
    keep = ~removed
    idx_keep = np.flatnonzero(keep)
    n = len(values)
    for i in np.flatnonzero(removed):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        nb = [j for j in range(lo, hi) if keep[j]]
        if nb:
            out[i] = values[nb].mean()
        else:
            out[i] = np.interp(i, idx_keep, values[idx_keep])
    return out


def reconstruct_points(traj: Trajectory, removed, window: int = 5) -> Trajectory:
    """Replace removed samples by the mean of surviving samples in the window around them.

    Falls back to linear interpolation between the nearest survivors when
    the whole window was removed.
    """
    n = len(traj)
    removed = sorted(set(int(i) for i in removed))
    if any(i < 0 or i >= n for i in removed):
        raise IndexError(f"removed index out of range for {n} points")
    if not removed:
        return traj
    if n - len(removed) < 2:
        raise ValueError("reconstruction would leave fewer than 2 points")
    mask = np.zeros(n, dtype=bool)
    mask[removed] = True
    half = window // 2
    cleaned = mask.copy() if traj.cleaned is None else (np.asarray(traj.cleaned, bool) | mask)
    return replace(
        traj,
        x=_fill(traj.x, mask, half),
        y=None if traj.y is None else _fill(traj.y, mask, half),
        v=_fill(traj.v, mask, half),
        a=_fill(traj.a, mask, half),
        cleaned=cleaned,
    )


def moving_average(values, window: int = 5) -> np.ndarray:
    """Centred moving average; near the ends the window shrinks symmetrically."""
    x = np.asarray(values, dtype=float)
    n = len(x)
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n)
    h = np.minimum(np.minimum(i, n - 1 - i), half)
    return (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)


def smooth_moving_average(traj: Trajectory, cfg: CleaningConfig = CleaningConfig()) -> Trajectory:
    if len(traj) < cfg.window:
        raise ValueError(f"vehicle {traj.vehicle_id}: {len(traj)} points, smoothing window is {cfg.window}")
    return replace(traj, x=moving_average(traj.x, cfg.window),
                   y=None if traj.y is None else moving_average(traj.y, cfg.window))


def differentiate(traj: Trajectory) -> Trajectory:
    """Backward-difference speed and acceleration from position.

    v[t] = (x[t] - x[t-1]) / dt and a[t] = (v[t] - v[t-1]) / dt, the exact
    inverse of the semi-implicit update used in simulation. Leading entries
    without a defined difference copy the first defined value.
    """
    dt = traj.dt
    v = np.empty_like(traj.x)
    v[1:] = np.diff(traj.x) / dt
    v[0] = v[1]
    a = np.empty_like(v)
    if len(v) >= 3:
        a[2:] = np.diff(v[1:]) / dt
        a[:2] = a[2]
    else:
        a[:] = 0.0
    return replace(traj, v=v, a=a)


def clean_trajectory(traj: Trajectory, cfg: CleaningConfig = CleaningConfig()):
    """Full cleaning pass: drift removal, smoothing, differentiation.

    Returns the cleaned trajectory and the sorted drift indices that were replaced.
    """
    drift = sorted(detect_drift_points(traj, cfg))
    out = reconstruct_points(traj, drift, cfg.window) if drift else traj
    if out.cleaned is None:
        out = replace(out, cleaned=np.zeros(len(out), dtype=bool))
    if len(out) >= cfg.window:
        out = smooth_moving_average(out, cfg)
    out = differentiate(out)
    return replace(out, v=np.maximum(out.v, 0.0)), drift


# -- platoons ------------------------------------------------------------------

@dataclass(frozen=True)
class Chain:
    vehicles: tuple[str, ...]
    t_start: float
    t_end: float


@dataclass
class PlatoonIndex:
    chains: list[Chain]
    excluded: list[tuple[str, str, str]] = field(default_factory=list)  # (leader, follower, reason)


class CyclicLeaderError(ValueError):
    pass


def _infer_leaders(dataset: dict[str, Trajectory]) -> dict[str, list]:
    """Leader per sample from position ordering within (edge, lane) at each timestamp."""
    buckets: dict[tuple, list] = {}
    for vid, tr in dataset.items():
        for i, t in enumerate(tr.t):
            key = (round(float(t), 6),
                   None if tr.edge is None else tr.edge[i],
                   None if tr.lane is None else tr.lane[i])
            buckets.setdefault(key, []).append((tr.x[i], vid, i))
    leaders = {vid: [None] * len(tr) for vid, tr in dataset.items()}
    for members in buckets.values():
        members.sort()
        for (_, vid, i), (_, lead, _) in zip(members[:-1], members[1:]):
            leaders[vid][i] = lead
    return leaders


def _shared(lead: Trajectory, fol: Trajectory, fol_rows):
    """Timestamps where the follower row links to ``lead`` and both are on the same edge/lane."""
    lt = {round(float(t), 6): j for j, t in enumerate(lead.t)}
    out = []
    for i in fol_rows:
        j = lt.get(round(float(fol.t[i]), 6))
        if j is None:
            continue
        if fol.edge is not None and lead.edge is not None and fol.edge[i] != lead.edge[j]:
            continue
        if fol.lane is not None and lead.lane is not None and fol.lane[i] != lead.lane[j]:
            continue
        out.append((i, j))
    return out


def _longest_run(pairs, fol: Trajectory):
    best, cur = [], []
    dt = fol.dt
    for p in pairs:
        if cur and abs(fol.t[p[0]] - fol.t[cur[-1][0]] - dt) > DT_TOL:
            cur = []
        cur.append(p)
        if len(cur) > len(best):
            best = list(cur)
    return best


def build_platoons(dataset: dict[str, Trajectory], min_steps: int = 2) -> PlatoonIndex:
    """Group leader -> follower links into maximal chains with a common time window.

    Each follower is attached to the leader it follows longest (contiguous
    run on the same edge/lane). Pairs where the follower is ever at or ahead
    of its leader are excluded and reported.
    """
    if any(tr.leader_id is None for tr in dataset.values()):
        links = _infer_leaders(dataset)
    else:
        links = {vid: tr.leader_id for vid, tr in dataset.items()}

    excluded = []
    leader_of: dict[str, tuple[str, float, float]] = {}
    for vid, fol in dataset.items():
        counts: dict[str, list[int]] = {}
        for i, lead in enumerate(links[vid]):
            if lead is not None and lead != vid:
                counts.setdefault(lead, []).append(i)
        best = None
        for lead, rows in sorted(counts.items()):
            if lead not in dataset:
                continue
            run = _longest_run(_shared(dataset[lead], fol, rows), fol)
            if len(run) < min_steps:
                continue
            if best is None or len(run) > len(best[1]):
                best = (lead, run)
        if best is None:
            continue
        lead, run = best
        li = np.array([j for _, j in run])
        fi = np.array([i for i, _ in run])
        if np.any(dataset[lead].x[li] <= fol.x[fi]):
            bad_t = fol.t[fi][dataset[lead].x[li] <= fol.x[fi]][0]
            reason = f"follower not behind leader at t={bad_t:g}"
            excluded.append((lead, vid, reason))
            log.warning("excluding pair %s -> %s: %s", lead, vid, reason)
            continue
        leader_of[vid] = (lead, float(fol.t[fi[0]]), float(fol.t[fi[-1]]))

    # cycle check
    for start in leader_of:
        seen = [start]
        cur = start
        while cur in leader_of:
            cur = leader_of[cur][0]
            if cur in seen:
                cyc = seen[seen.index(cur):] + [cur]
                raise CyclicLeaderError("cyclic leader links: " + " -> ".join(reversed(cyc)))
            seen.append(cur)

    followers_of: dict[str, list[str]] = {}
    for fol, (lead, _, _) in leader_of.items():
        followers_of.setdefault(lead, []).append(fol)
    roots = sorted({lead for lead, _, _ in leader_of.values() if lead not in leader_of}, key=_id_key)

    chains: list[Chain] = []

    def walk(path, t0, t1):
        tail = path[-1]
        kids = sorted(followers_of.get(tail, []), key=_id_key)
        extended = False
        for k in kids:
            _, a, b = leader_of[k]
            n0, n1 = max(t0, a), min(t1, b)
            if (n1 - n0) / dataset[k].dt + 1 >= min_steps - DT_TOL:
                walk(path + [k], n0, n1)
                extended = True
            else:
                # window too short to continue: start a fresh chain at the old tail
                walk([tail, k], a, b)
        if not extended and len(path) >= 2:
            chains.append(Chain(tuple(path), t0, t1))

    for r in roots:
        walk([r], -np.inf, np.inf)
    return PlatoonIndex(chains, excluded)
