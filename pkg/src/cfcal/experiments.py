"""Reusable experiment protocols behind the acceptance suite and the scripts/ runners."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .calibration import Evaluator, ObjectiveSpec, calibrate
from .cf_models import LinearParams, ModelSpec, table4_spec
from .error_propagation import multi_vehicle_error, platoon_impulse_case
from .measures import IntervalSpec
from .simulation import FollowerInit, PlatoonScenario, SimConfig, simulate_platoon
from .synthetic import recovery_dataset, staggered_noisy_platoons, trajectory_from_accel

OPEN_LOOP = SimConfig(dt=1.0, min_speed=-np.inf, collision_policy="ignore")

# held-out comparison: entries spread over five 15 s release slots, 200 m segment
HOLDOUT_INTERVALS = IntervalSpec(tuple(np.arange(0.0, 76.0, 15.0)), 0.0, 200.0)


# -- closed form vs simulation -------------------------------------------------------------

def twin_errors(k: LinearParams, r: np.ndarray, lead_accel: np.ndarray, gaps, v0: float = 10.0):
    """Acceleration differences (perturbed minus clean run), head row included.

    ``r[0]`` perturbs the replayed lead's acceleration; ``r[1:]`` is added to
    the followers' model accelerations. Returns (differences, perturbed SimResult).
    """
    N, T1 = r.shape

    def run(head_extra, fol_res):
        lead = trajectory_from_accel("lead", lead_accel + head_extra, dt=1.0, v0=v0, min_speed=-np.inf)
        x, fol = lead.x[0], []
        for j, g in enumerate(gaps):
            x = x - lead.length - g
            fol.append(FollowerInit(f"f{j + 1}", "small", lead.length, x, v0))
        sc = PlatoonScenario(lead, fol, ModelSpec.uniform("Linear", k))
        res = simulate_platoon(sc, OPEN_LOOP, residuals=fol_res)
        return np.vstack([lead.a[None], res.a]), res

    clean, _ = run(np.zeros(T1), np.zeros((N - 1, T1)))
    pert, res = run(r[0], r[1:])
    d = pert - clean
    d[:, 0] = 0.0
    return d, res


def random_linear_case(rng, max_vehicles: int = 5, max_steps: int = 200, head: bool = False):
    """Random (params, residuals, lead acceleration, gaps) with 2..max_vehicles rows incl. the head."""
    n = int(rng.integers(2, max_vehicles + 1))
    T = int(rng.integers(2, max_steps + 1))
    k = LinearParams(rng.uniform(-0.6, 0.0), rng.uniform(0.0, 2.5), rng.uniform(-1, 6))
    r = rng.normal(0, 1, (n, T + 1))
    r[:, 0] = 0.0
    if not head:
        r[0] = 0.0
    lead_accel = rng.normal(0, 0.5, T + 1)
    lead_accel[0] = 0.0
    return k, r, lead_accel, rng.uniform(5, 30, n - 1)


def twin_equivalence(trials: int = 100, seed: int = 0, max_vehicles: int = 5, max_steps: int = 200):
    """Worst relative deviation between recursion and twin simulation over random trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        k, r, lead_accel, gaps = random_linear_case(rng, max_vehicles, max_steps)
        d, _ = twin_errors(k, r, lead_accel, gaps)
        e = multi_vehicle_error(r, k)
        worst = max(worst, float(np.max(np.abs(d - e)) / max(1.0, np.max(np.abs(e)))))
    return worst


# -- platoon impulse -------------------------------------------------------------------------

def impulse_peaks(k: LinearParams, n_vehicles: int, steps: int = 50, size: float = 5.0) -> np.ndarray:
    """Per-follower max |position error| after an impulse on the first follower at step 1."""
    es = platoon_impulse_case(n_vehicles, steps, size, k)
    return np.max(np.abs(es.eps_x[1:]), axis=1)


# -- calibration experiments -------------------------------------------------------------------

@dataclass
class RecoveryOutcome:
    kind: str
    truth: np.ndarray
    estimate: np.ndarray
    objective: float
    evaluations: int
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return float(np.max(np.abs(self.estimate / self.truth - 1)))


def recovery(kind: str, method: str = "BiC", budget: int = 20000, seed: int = 0, data_seed: int = 1,
             threads: int = 1) -> RecoveryOutcome:
    """MiC calibration on noiseless platoons generated from a reference parameter set."""
    truth = table4_spec(method, kind)
    data = recovery_dataset(kind, truth, seed=data_seed)
    t = time.perf_counter()
    res = calibrate(data, kind, ObjectiveSpec(kind="MiC"), budget=budget, seed=seed, threads=threads)
    return RecoveryOutcome(kind, truth.for_class("small").to_vector(), res.params["small"].to_vector(),
                           res.objective, res.evaluations, time.perf_counter() - t)


@dataclass
class HoldoutOutcome:
    seed: int
    mse_truth: float
    mse_mic: float
    mse_bic: float

    @property
    def bic_wins(self) -> bool:
        return self.mse_bic <= self.mse_mic


def bic_vs_mic(seed: int, weights=(1.0, 100.0, 0.0), budget: int = 3000, noise_sigma: float = 0.3,
               noise: str = "measurement", data_offset: int = 100, threads: int = 1) -> HoldoutOutcome:
    """Calibrate IDM with MiC and BiC on noisy training platoons; score on held-out platoons.

    The score is the interval-averaged travel-time MSE on a second set of
    platoons drawn from the same generator.
    """
    truth = table4_spec("BiC", "IDM")
    rng = np.random.default_rng(data_offset + seed)
    train = staggered_noisy_platoons(truth, rng, noise_sigma=noise_sigma, noise=noise)
    test = staggered_noisy_platoons(truth, rng, noise_sigma=noise_sigma, noise=noise)
    score = Evaluator(test, "IDM", ObjectiveSpec(kind="MaC", w2_mac=0.0, normalization="none",
                                                 interval_spec=HOLDOUT_INTERVALS))

    def mse_T(vec):
        return float(score.evaluate(vec[None])["mse_T"][0])

    w0, w1, w2 = weights
    out = {}
    for kind in ("MiC", "BiC"):
        spec = ObjectiveSpec(kind=kind, w0_sys=w0, w1_mac=w1, w2_mac=w2, interval_spec=HOLDOUT_INTERVALS)
        res = calibrate(train, "IDM", spec, budget=budget, seed=seed, threads=threads)
        out[kind] = mse_T(res.params["small"].to_vector())
    return HoldoutOutcome(seed, mse_T(truth.for_class("small").to_vector()), out["MiC"], out["BiC"])
