"""Calibration of car-following parameters under MiC, MaC and BiC objectives.

MiC fits simulated to observed accelerations, MaC fits per-interval mean
travel time and fuel, BiC combines both::

    BiC = w0 * micro + mean_over_intervals(w1 * dT^2 + w2 * de^2)

Every term is divided by a normalisation scale (by default the variance of
the observed quantity), so the weights are unit-free.

Simulated accelerations come from a whole-trajectory rollout: the platoon
head replays observed data and each follower reacts to the simulated state
of the vehicle ahead ("cascade"). "pairwise" lets every follower react to
its observed leader; "teacher" evaluates the law one step ahead on observed
states only.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import differential_evolution

from .cf_models import VEHICLE_CLASSES, CFState, ModelSpec, model_kind
from .measures import (FuelCoefficients, IntervalSpec, NotTraversed, crossing_time, fuel_rate,
                       load_fuel_coefficients)
from .simulation import RolloutLayout, SimResult, batch_rollout
from .trajectory_data import DT_TOL, PlatoonIndex, Trajectory

log = logging.getLogger(__name__)

PENALTY = 1e6
OBJECTIVE_KINDS = ("MiC", "MaC", "BiC")
TOPOLOGIES = ("cascade", "pairwise", "teacher")
_V_FLOOR = 0.1

DEFAULT_BOUNDS = {
    "Linear": {"k1": (-1.0, 0.0), "k2": (0.0, 3.0), "k3": (-2.0, 8.0)},
    "FVD": {"k": (0.0, 1.0), "lam": (0.0, 0.5), "V0": (10.0, 40.0), "b": (1.0, 20.0), "beta": (0.0, 12.0)},
    "IDM": {"v_f": (5.0, 35.0), "a_max": (0.1, 3.0), "b_comf": (0.5, 5.0), "S0": (0.5, 10.0), "t0": (0.1, 3.0)},
}


class InfeasibleError(RuntimeError):
    pass


# -- data --------------------------------------------------------------------------

@dataclass
class PlatoonData:
    """Observed platoon on a common time grid: replayed head plus followers in order."""

    head: Trajectory
    followers: list[Trajectory]

    def __post_init__(self):
        n = len(self.head)
        for f in self.followers:
            if len(f) != n or np.max(np.abs(f.t - self.head.t)) > DT_TOL:
                raise ValueError(f"follower {f.vehicle_id} is not on the head's time grid")
        if not self.followers:
            raise ValueError("platoon needs at least one follower")

    @property
    def dt(self) -> float:
        return self.head.dt

    @property
    def steps(self) -> int:
        return len(self.head) - 1

    def leader_of(self, j: int) -> Trajectory:
        return self.head if j == 0 else self.followers[j - 1]

    @classmethod
    def from_sim(cls, res: SimResult) -> PlatoonData:
        return cls(res.lead, [res.trajectory(j) for j in range(len(res.followers))])


def platoons_from_index(dataset: dict[str, Trajectory], index: PlatoonIndex,
                        min_steps: int = 3) -> list[PlatoonData]:
    out = []
    for ch in index.chains:
        trajs = [dataset[v].window(ch.t_start, ch.t_end) for v in ch.vehicles]
        if len(trajs[0]) < min_steps or any(len(t) != len(trajs[0]) for t in trajs):
            log.warning("skipping chain %s: ragged or short window", ch.vehicles)
            continue
        out.append(PlatoonData(trajs[0], trajs[1:]))
    return out


# -- specs ------------------------------------------------------------------------------

@dataclass
class ObjectiveSpec:
    kind: str = "BiC"
    w0_sys: float = 1.0
    w1_mac: float = 1.0
    w2_mac: float = 1.0
    interval_spec: IntervalSpec | None = None
    normalization: str | dict = "variance"
    fuel: FuelCoefficients | None = None
    topology: str = "cascade"
    gap_semantics: str = "bumper"
    min_speed: float = 0.0
    min_gap_stop: float = 0.1

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"objective kind must be one of {OBJECTIVE_KINDS}")
        if min(self.w0_sys, self.w1_mac, self.w2_mac) < 0:
            raise ValueError("weights must be non-negative")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.kind != "MiC" and self.interval_spec is None:
            raise ValueError(f"{self.kind} needs an interval_spec")
        if isinstance(self.normalization, str) and self.normalization not in ("variance", "none"):
            raise ValueError("normalization must be 'variance', 'none' or a dict of scales")
        if self.fuel is None:
            self.fuel = load_fuel_coefficients()

    @property
    def uses_macro(self) -> bool:
        return self.kind != "MiC"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "w0_sys": self.w0_sys, "w1_mac": self.w1_mac, "w2_mac": self.w2_mac,
            "interval_spec": None if self.interval_spec is None else self.interval_spec.to_dict(),
            "normalization": self.normalization, "topology": self.topology,
            "gap_semantics": self.gap_semantics, "min_speed": self.min_speed,
            "min_gap_stop": self.min_gap_stop,
        }


@dataclass
class ParamBounds:
    kind: str
    bounds: dict[str, tuple[float, float]]

    def __post_init__(self):
        names = model_kind(self.kind).params.names
        self.kind = model_kind(self.kind).name
        missing = [n for n in names if n not in self.bounds]
        if missing:
            raise ValueError(f"bounds missing for {missing}")
        for n, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"bound for {n}: lower {lo} must be < upper {hi}")

    @classmethod
    def default(cls, kind: str) -> ParamBounds:
        return cls(kind, dict(DEFAULT_BOUNDS[model_kind(kind).name]))

    def as_list(self) -> list[tuple[float, float]]:
        return [tuple(map(float, self.bounds[n])) for n in model_kind(self.kind).params.names]


# -- evaluator ----------------------------------------------------------------------------

def _scale(values, mode) -> float:
    vals = np.asarray(values, float)
    vals = vals[np.isfinite(vals)]
    if mode == "none" or len(vals) == 0:
        return 1.0
    var = float(np.var(vals))
    if var > 1e-12:
        return var
    m2 = float(np.mean(vals) ** 2)
    return m2 if m2 > 1e-12 else 1.0


class Evaluator:
    """Scores batches of parameter vectors against a fixed observed dataset.

    A parameter vector concatenates one block per entry of ``classes`` in
    the model's parameter order.
    """

    def __init__(self, platoons: list[PlatoonData], kind: str, spec: ObjectiveSpec,
                 classes: list[str] | None = None):
        self.kind = model_kind(kind).name
        self.names = model_kind(kind).params.names
        self.spec = spec
        self.platoons = platoons
        present = [c for c in VEHICLE_CLASSES if any(f.vclass == c for p in platoons for f in p.followers)]
        self.classes = list(classes) if classes is not None else present
        dts = {round(p.dt, 9) for p in platoons}
        if len(dts) != 1:
            raise ValueError("all platoons must share one time step")
        self.dt = platoons[0].dt
        self._build_layout()
        self._build_observed()

    # layout: followers stacked, heads padded to the longest horizon
    def _build_layout(self):
        pairwise = self.spec.topology == "pairwise"
        heads, leader, lead_len, x0, v0, hor, vcls, t0 = [], [], [], [], [], [], [], []
        obs = []
        T = max(p.steps for p in self.platoons)
        for p in self.platoons:
            slot = {}  # follower index in platoon -> stacked index
            for j, f in enumerate(p.followers):
                if f.vclass not in self.classes:
                    continue
                ld = p.leader_of(j)
                if pairwise or (j - 1) not in slot:
                    # head, pairwise mode, or a leader outside this search: replay observed
                    heads.append(_pad(ld, T))
                    leader.append(-len(heads))
                else:
                    leader.append(slot[j - 1])
                slot[j] = len(obs)
                lead_len.append(ld.length)
                x0.append(f.x[0])
                v0.append(f.v[0])
                hor.append(p.steps)
                vcls.append(f.vclass)
                t0.append(p.head.t[0])
                obs.append(f)
        if not obs:
            raise ValueError("no followers of the requested classes")
        hx = np.array([h[0] for h in heads])
        hv = np.array([h[1] for h in heads])
        self.layout = RolloutLayout(hx, hv, np.array(leader), np.array(lead_len, float),
                                    np.array(x0, float), np.array(v0, float), np.array(hor), vcls, self.dt)
        self.obs = obs
        self.t0 = np.array(t0)
        self.T = T
        col = np.empty((len(self.names), len(obs)), dtype=int)
        for j, c in enumerate(vcls):
            ci = self.classes.index(c)
            col[:, j] = ci * len(self.names) + np.arange(len(self.names))
        self.col = col

    def _build_observed(self):
        V, T = len(self.obs), self.T
        self.a_obs = np.zeros((V, T + 1))
        self.mask = np.zeros((V, T + 1), dtype=bool)
        for j, f in enumerate(self.obs):
            n = len(f)
            self.a_obs[j, :n] = f.a
            self.mask[j, 1:n] = True
        self.n_micro = int(self.mask.sum())
        self._first = np.zeros_like(self.mask)
        self._first[:, 0] = True
        spec = self.spec
        norm = spec.normalization
        if isinstance(norm, dict):
            self.scale_a = float(norm.get("micro", 1.0))
        else:
            self.scale_a = _scale(self.a_obs[self.mask], norm)

        self.member = np.full(V, -1)
        self.tt_obs = np.full(V, np.nan)
        self.fuel_obs = np.full(V, np.nan)
        self.excluded = []
        if spec.interval_spec is None:
            self.scale_T = self.scale_e = 1.0
            self.intervals = np.array([], dtype=int)
            return
        iv = spec.interval_spec
        # observed measures go through the same vectorised code as simulated ones
        xo = np.stack([_pad(f, T)[0] for f in self.obs])[None]
        vo = np.stack([_pad(f, T)[1] for f in self.obs])[None]
        tt_all = self._travel_times(xo, vo)[0]
        fuel_all = self._fuel(xo, vo, self.a_obs[None])[0]
        for j, f in enumerate(self.obs):
            try:
                t_in = crossing_time(f.t, f.x, iv.entry_x)
                crossing_time(f.t, f.x, iv.exit_x)
            except NotTraversed as exc:
                self.excluded.append((f.vehicle_id, str(exc)))
                continue
            k = iv.interval_of(t_in)
            if k is None:
                self.excluded.append((f.vehicle_id, "entry outside interval range"))
                continue
            self.member[j] = k
            self.tt_obs[j] = tt_all[j]
            self.fuel_obs[j] = fuel_all[j]
        K = iv.n_intervals
        self.M = np.zeros((K, V))
        for j, k in enumerate(self.member):
            if k >= 0:
                self.M[k, j] = 1.0
        counts = self.M.sum(axis=1)
        self.intervals = np.flatnonzero(counts > 0)
        if len(self.intervals) < K:
            log.info("%d of %d intervals have no vehicles and are skipped", K - len(self.intervals), K)
        self.M = self.M[self.intervals] / counts[self.intervals, None]
        members = self.member >= 0
        fuel_ok = members & np.isfinite(self.fuel_obs)
        self.Mf = np.zeros_like(self.M)
        for r, k in enumerate(self.intervals):
            sel = (self.member == k) & fuel_ok
            if sel.any():
                self.Mf[r, sel] = 1.0 / sel.sum()
        self.T_obs_int = _rowdot(np.nan_to_num(self.tt_obs)[None], self.M)[0]
        self.e_obs_int = _rowdot(np.nan_to_num(self.fuel_obs)[None], self.Mf)[0]
        if isinstance(norm, dict):
            self.scale_T = float(norm.get("travel_time", 1.0))
            self.scale_e = float(norm.get("fuel", 1.0))
        else:
            self.scale_T = _scale(self.tt_obs[members], norm)
            self.scale_e = _scale(self.fuel_obs[fuel_ok], norm)

    @property
    def scales(self) -> dict:
        return {"micro": self.scale_a, "travel_time": self.scale_T, "fuel": self.scale_e}

    @property
    def dim(self) -> int:
        return len(self.classes) * len(self.names)

    def param_arrays(self, theta) -> dict:
        theta = np.atleast_2d(np.asarray(theta, float))
        return {nm: theta[:, self.col[i]] for i, nm in enumerate(self.names)}

    def vector(self, model: ModelSpec) -> np.ndarray:
        return np.concatenate([model.for_class(c).to_vector() for c in self.classes])

    def simulate(self, theta):
        """Rollout for a (B, D) batch; returns x, v, a, first_collision."""
        params = self.param_arrays(theta)
        if self.spec.topology == "teacher":
            return self._teacher(params)
        return batch_rollout(self.kind, params, self.layout, self.spec.gap_semantics,
                             self.spec.min_speed, self.spec.min_gap_stop)

    def _teacher(self, params):
        V, T = len(self.obs), self.T
        xo, vo = np.zeros((V, T + 1)), np.zeros((V, T + 1))
        lx, lv = np.zeros((V, T + 1)), np.zeros((V, T + 1))
        hx, hv = self.layout.head_x, self.layout.head_v
        for j, f in enumerate(self.obs):
            xo[j], vo[j] = _pad(f, T)
            ld = self.layout.leader[j]
            if ld < 0:
                lx[j], lv[j] = hx[-ld - 1], hv[-ld - 1]
            else:
                lx[j], lv[j] = _pad(self.obs[ld], T)
        L = self.layout.leader_length[:, None]
        bumper = self.spec.gap_semantics == "bumper"
        gap = (lx - xo - L) if bumper else (lx - xo)
        mk = model_kind(self.kind)
        if mk.name == "IDM":
            gap = np.maximum(gap, 1e-6)
        p = mk.params(**{k: v[:, :, None] for k, v in params.items()})
        B = next(iter(params.values())).shape[0]
        a = np.zeros((B, V, T + 1))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            a[:, :, 1:] = mk.accel(CFState(vo[:, :-1], gap[:, :-1], (lv - vo)[:, :-1],
                                           0.0 if bumper else L), p)
        x = np.broadcast_to(xo, a.shape)
        v = np.broadcast_to(vo, a.shape)
        return x, v, a, np.full((B, V), -1)

    def evaluate(self, theta) -> dict:
        """Per-candidate terms: ``mse_a``, ``micro``, ``tt``, ``fuel``, ``collision_frac``, objectives."""
        spec = self.spec
        x, v, a, first = self.simulate(theta)
        B = a.shape[0]
        err = np.where(self.mask, a - self.a_obs, 0.0)
        mse_a = np.sum(err**2, axis=(1, 2)) / self.n_micro
        out = {"mse_a": mse_a, "micro": mse_a / self.scale_a}

        tt_term = np.zeros(B)
        fuel_term = np.zeros(B)
        mse_T = np.zeros(B)
        mse_e = np.zeros(B)
        if spec.uses_macro and len(self.intervals):
            tt_sim = self._travel_times(x, v)
            mse_T = np.mean((_rowdot(tt_sim, self.M) - self.T_obs_int) ** 2, axis=1)
            if spec.w2_mac > 0:
                fu_sim = self._fuel(x, v, a)
                e_sim_int = _rowdot(np.nan_to_num(fu_sim, nan=0.0), self.Mf)
                has_e = self.Mf.sum(axis=1) > 0
                with np.errstate(over="ignore", invalid="ignore"):
                    mse_e = np.mean(np.where(has_e, (e_sim_int - self.e_obs_int) ** 2, 0.0), axis=1)
            if spec.w1_mac > 0:
                tt_term = spec.w1_mac * mse_T / self.scale_T
            if spec.w2_mac > 0:
                fuel_term = spec.w2_mac * mse_e / self.scale_e
        out.update(mse_T=mse_T, mse_e=mse_e, macro=tt_term + fuel_term)

        # collided or non-finite candidates get PENALTY * (1 + share of horizon left),
        # scaled by each objective's weights so the BiC/MiC/MaC identities survive
        frac = np.zeros(B)
        collided = (first >= 0).any(axis=1)
        if collided.any():
            hor = self.layout.horizon
            rem = np.where(first >= 0, (hor - first) / hor, -np.inf)
            frac = np.where(collided, rem.max(axis=1), 0.0)
        bad_mic = ~np.isfinite(out["micro"])
        bad_mac = ~np.isfinite(out["macro"])
        frac = np.where((bad_mic | bad_mac) & ~collided, 1.0, frac)
        pen = PENALTY * (1.0 + frac)
        out["infeasible"] = collided | bad_mic | bad_mac
        out["collision_frac"] = np.where(out["infeasible"], frac, np.nan)
        out["MiC"] = np.where(collided | bad_mic, pen, out["micro"])
        out["MaC"] = np.where(collided | bad_mac, (spec.w1_mac + spec.w2_mac) * pen, out["macro"])
        out["BiC"] = spec.w0_sys * out["MiC"] + out["MaC"]
        return out

    def objective(self, theta) -> np.ndarray:
        return self.evaluate(theta)[self.spec.kind]

    def _crossings(self, x, v, pos):
        """Time each simulated follower reaches ``pos``; extrapolated at the final speed if never."""
        dt = self.dt
        hor = self.layout.horizon
        reached = x >= pos
        k = np.argmax(reached, axis=-1)
        got = np.take_along_axis(reached, k[..., None], -1)[..., 0]
        km = np.maximum(k, 1)
        x1 = np.take_along_axis(x, km[..., None], -1)[..., 0]
        x0 = np.take_along_axis(x, (km - 1)[..., None], -1)[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(x1 > x0, (pos - x0) / (x1 - x0), 0.0)
        t_hit = (km - 1 + frac) * dt
        t_hit = np.where(k == 0, 0.0, t_hit)
        x_end = np.take_along_axis(x, hor[None, :, None].repeat(x.shape[0], 0), -1)[..., 0]
        v_end = np.take_along_axis(v, hor[None, :, None].repeat(x.shape[0], 0), -1)[..., 0]
        t_ext = hor * dt + (pos - x_end) / np.maximum(v_end, _V_FLOOR)
        return self.t0 + np.where(got, t_hit, t_ext)

    def _travel_times(self, x, v):
        iv = self.spec.interval_spec
        return self._crossings(x, v, iv.exit_x) - self._crossings(x, v, iv.entry_x)

    def _fuel(self, x, v, a):
        a = a.copy()
        a[..., 0] = self.a_obs[:, 0]  # step 0 is observed, not simulated
        with np.errstate(over="ignore", invalid="ignore"):
            rate = fuel_rate(v, a, self.spec.fuel)
        rate = np.where(self.mask | self._first, rate, 0.0)
        total = rate.sum(axis=-1) * self.dt
        hor = self.layout.horizon
        x_end = np.take_along_axis(x, hor[None, :, None].repeat(x.shape[0], 0), -1)[..., 0]
        dist = x_end - x[..., 0]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.where(dist > 0, total / np.maximum(dist, 1e-3) * 1e5, np.nan)


def _rowdot(X, M):
    # X (B, V) against weights M (K, V); elementwise so results do not depend on batch shape
    return np.sum(X[:, None, :] * M[None, :, :], axis=-1)


def _pad(tr: Trajectory, T: int):
    n = len(tr)
    if n - 1 >= T:
        return tr.x[:T + 1].copy(), tr.v[:T + 1].copy()
    x = np.concatenate([tr.x, np.full(T + 1 - n, tr.x[-1])])
    v = np.concatenate([tr.v, np.zeros(T + 1 - n)])
    return x, v


# -- public objective functions ---------------------------------------------------------

def _as_vector(ev: Evaluator, params):
    """Accept a ModelSpec, ``{class: params}``, one params object for all classes, or a raw vector."""
    if isinstance(params, ModelSpec):
        return ev.vector(params)
    if isinstance(params, dict):
        return np.concatenate([np.asarray(params[c].to_vector() if hasattr(params[c], "to_vector")
                                          else params[c], float) for c in ev.classes])
    if hasattr(params, "to_vector"):
        return np.tile(params.to_vector(), len(ev.classes))
    vec = np.asarray(params, float)
    if vec.ndim == 1 and len(vec) == len(ev.names) and ev.dim != len(vec):
        vec = np.tile(vec, len(ev.classes))
    return vec


def objective_mic(params, dataset, model_kind_name: str, spec: ObjectiveSpec | None = None) -> float:
    """Pooled acceleration MSE over all followers and steps (normalised when ``spec`` is given)."""
    if spec is None:
        spec = ObjectiveSpec(kind="MiC", normalization="none")
    spec = _with_kind(spec, "MiC")
    ev = Evaluator(dataset, model_kind_name, spec)
    return float(ev.evaluate(_as_vector(ev, params))["MiC"][0])


def objective_mac(params, dataset, model_kind_name: str, spec: ObjectiveSpec) -> float:
    spec = _with_kind(spec, "MaC")
    ev = Evaluator(dataset, model_kind_name, spec)
    return float(ev.evaluate(_as_vector(ev, params))["MaC"][0])


def objective_bic(params, dataset, model_kind_name: str, spec: ObjectiveSpec) -> float:
    spec = _with_kind(spec, "BiC")
    ev = Evaluator(dataset, model_kind_name, spec)
    return float(ev.evaluate(_as_vector(ev, params))["BiC"][0])


def _with_kind(spec: ObjectiveSpec, kind: str) -> ObjectiveSpec:
    if spec.kind == kind:
        return spec
    return ObjectiveSpec(**{**spec.__dict__, "kind": kind})


# -- optimiser ---------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    model_kind: str
    objective_kind: str
    params: dict  # class -> params dataclass
    objective: float
    breakdown: dict
    evaluations: int
    seed: int
    trace: list[float]
    normalization: dict
    spec: dict = field(default_factory=dict)
    fuel_sha256: str = ""

    def model_spec(self, fallback=None) -> ModelSpec:
        params = dict(self.params)
        for c in VEHICLE_CLASSES:
            if c not in params:
                params[c] = fallback.for_class(c) if fallback is not None else next(iter(self.params.values()))
        return ModelSpec(self.model_kind, params, self.spec.get("gap_semantics", "bumper"))

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "objective_kind": self.objective_kind,
            "params": {c: p.as_dict() for c, p in self.params.items()},
            "objective": self.objective,
            "breakdown": self.breakdown,
            "evaluations": self.evaluations,
            "seed": self.seed,
            "normalization": self.normalization,
            "weights_note": "weights and variance normalisation are tool defaults, not published values",
            "spec": self.spec,
            "fuel_coefficients_sha256": self.fuel_sha256,
            "trace": self.trace,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_de(func, bounds, budget: int, seed: int, popsize: int = 15, strategy: str = "best1bin",
           mutation=(0.5, 1.0), recombination: float = 0.9, threads: int = 1):
    """Seeded differential evolution with a hard budget of objective evaluations.

    ``func`` maps a (B, D) array of candidates to B objective values.
    Returns (best_x, best_f, evaluations, trace) where ``trace`` holds the
    best-so-far value after every generation.
    """
    D = len(bounds)
    pop = popsize * D
    if budget < pop:
        raise ValueError(f"budget below population minimum ({budget} < {pop})")
    maxiter = budget // pop - 1
    state = {"n": 0, "best_f": math.inf, "best_x": None}
    trace: list[float] = []
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def batch(xT):
        X = np.atleast_2d(np.asarray(xT).T)
        if pool is not None and len(X) >= 2 * threads:
            parts = np.array_split(X, threads)
            f = np.concatenate(list(pool.map(func, parts)))
        else:
            f = np.asarray(func(X), float)
        f = np.where(np.isfinite(f), f, 2 * PENALTY)
        state["n"] += len(X)
        i = int(np.argmin(f))
        if f[i] < state["best_f"]:
            state["best_f"], state["best_x"] = float(f[i]), X[i].copy()
        return f

    def callback(intermediate_result):
        trace.append(state["best_f"])

    try:
        differential_evolution(batch, bounds, strategy=strategy, maxiter=maxiter, popsize=popsize,
                               tol=0.0, atol=0.0, mutation=mutation, recombination=recombination,
                               seed=seed, polish=False, init="latinhypercube", updating="deferred",
                               vectorized=True, callback=callback)
    finally:
        if pool is not None:
            pool.shutdown()
    if not trace or trace[-1] != state["best_f"]:
        trace.append(state["best_f"])
    return state["best_x"], state["best_f"], state["n"], trace


def calibrate(dataset: list[PlatoonData], model_kind_name: str, spec: ObjectiveSpec,
              bounds: ParamBounds | None = None, budget: int = 20000, seed: int = 0,
              class_mode: str = "joint", popsize: int = 15, threads: int = 1,
              **de_options) -> CalibrationResult:
    """Fit parameters for every vehicle class present among the followers.

    ``class_mode='joint'`` searches all classes in one concatenated vector
    with the configured rollout topology. ``'independent'`` runs one search
    per class on that class's followers only, each following its observed
    leader; the evaluation count is the sum over searches.
    """
    kind = model_kind(model_kind_name).name
    bounds = ParamBounds.default(kind) if bounds is None else bounds
    per = bounds.as_list()
    if class_mode == "joint":
        ev = Evaluator(dataset, kind, spec)
        groups = [(ev, ev.classes)]
    elif class_mode == "independent":
        groups = []
        pair_spec = ObjectiveSpec(**{**spec.__dict__, "topology": "pairwise"}) \
            if spec.topology == "cascade" else spec
        for c in VEHICLE_CLASSES:
            if any(f.vclass == c for p in dataset for f in p.followers):
                groups.append((Evaluator(dataset, kind, pair_spec, [c]), [c]))
    else:
        raise ValueError("class_mode must be 'joint' or 'independent'")

    params, evals, trace = {}, 0, []
    best_f = 0.0
    breakdown = {}
    names = model_kind(kind).params.names
    for ev, classes in groups:
        x, f, n, tr = run_de(ev.objective, per * len(classes), budget, seed, popsize=popsize,
                             threads=threads, **de_options)
        evals += n
        trace.extend(tr)
        if f >= PENALTY:
            raise InfeasibleError(
                f"every probed parameter vector for classes {classes} collided or diverged; revise the bounds")
        for ci, c in enumerate(classes):
            params[c] = model_kind(kind).params(*x[ci * len(names):(ci + 1) * len(names)])
        terms = ev.evaluate(x)
        best_f += f
        label = "+".join(classes)
        breakdown[label] = {
            "objective": f,
            "mse_acceleration": float(terms["mse_a"][0]),
            "micro_term": float(terms["micro"][0]),
            "mse_travel_time": float(terms["mse_T"][0]),
            "mse_fuel": float(terms["mse_e"][0]),
            "macro_term": float(terms["macro"][0]),
        }
    norm = {"+".join(cl): ev.scales for ev, cl in groups}
    return CalibrationResult(kind, spec.kind, params, best_f, breakdown, evals, seed, trace, norm,
                             {**spec.to_dict(), "budget": budget, "class_mode": class_mode,
                              "popsize": popsize, "bounds": {k: list(v) for k, v in bounds.bounds.items()}},
                             spec.fuel.sha256 if spec.fuel is not None else "")


# -- spec files ------------------------------------------------------------------------------

def load_calibration_spec(path):
    """YAML calibration spec -> (model kind, ObjectiveSpec, ParamBounds, options dict)."""
    path = Path(path)
    with open(path) as fh:
        d = yaml.safe_load(fh)
    base = path.parent
    kind = model_kind(d["model"]).name
    obj = d.get("objective", {})
    iv = obj.get("intervals")
    if isinstance(iv, str):
        with open(base / iv) as fh:
            iv = yaml.safe_load(fh)
    fuel = load_fuel_coefficients(base / obj["fuel_file"]) if obj.get("fuel_file") else None
    spec = ObjectiveSpec(
        kind=obj.get("kind", "BiC"), w0_sys=float(obj.get("w0_sys", 1.0)),
        w1_mac=float(obj.get("w1_mac", 1.0)), w2_mac=float(obj.get("w2_mac", 1.0)),
        interval_spec=None if iv is None else IntervalSpec.from_dict(iv),
        normalization=obj.get("normalization", "variance"), fuel=fuel,
        topology=obj.get("topology", "cascade"), gap_semantics=obj.get("gap_semantics", "bumper"),
    )
    b = dict(DEFAULT_BOUNDS[kind])
    for k, v in (d.get("bounds") or {}).items():
        b[k] = tuple(v)
    opts = {"budget": int(d.get("budget", 20000)), "seed": int(d.get("seed", 0)),
            "class_mode": d.get("class_mode", "joint"), "popsize": int(d.get("popsize", 15))}
    return kind, spec, ParamBounds(kind, b), opts
