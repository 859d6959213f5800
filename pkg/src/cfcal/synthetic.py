"""Synthetic lead profiles and platoons for recovery experiments and tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .calibration import PlatoonData
from .cf_models import ModelSpec
from .simulation import FollowerInit, PlatoonScenario, SimConfig, simulate_platoon
from .trajectory_data import DEFAULT_LENGTH, Trajectory


def trajectory_from_accel(vehicle_id: str, accel, dt: float = 0.1, x0: float = 0.0, v0: float = 0.0,
                          t0: float = 0.0, vclass: str = "small", min_speed: float = 0.0) -> Trajectory:
    """Integrate an acceleration series with the simulator's update rule.

    ``accel[0]`` is stored as-is; steps 1..T drive the motion. Where the
    speed floor binds the stored acceleration is the realised one.
    """
    a = np.asarray(accel, dtype=float).copy()
    n = len(a)
    x, v = np.empty(n), np.empty(n)
    x[0], v[0] = x0, v0
    for t in range(1, n):
        v[t] = max(min_speed, v[t - 1] + a[t] * dt)
        a[t] = (v[t] - v[t - 1]) / dt
        x[t] = x[t - 1] + v[t] * dt
    return Trajectory(vehicle_id, t0 + dt * np.arange(n), x, v, a, vclass=vclass,
                      length=DEFAULT_LENGTH[vclass])


def stop_and_go_accel(steps: int, dt: float, rng: np.random.Generator, v0: float = 8.0,
                      v_max: float = 16.0) -> np.ndarray:
    """Piecewise-constant acceleration: random accelerate / cruise / brake phases.

    Speeds implied by the profile stay in [0, v_max].
    """
    a = np.zeros(steps + 1)
    v = v0
    t = 1
    while t <= steps:
        dur = int(rng.integers(max(1, int(2 / dt)), max(2, int(8 / dt))))
        phase = rng.choice(["acc", "cruise", "brake"], p=[0.4, 0.2, 0.4])
        level = {"acc": rng.uniform(0.5, 1.5), "cruise": 0.0, "brake": -rng.uniform(0.8, 2.0)}[phase]
        for _ in range(dur):
            if t > steps:
                break
            lev = level
            if v + lev * dt > v_max or v + lev * dt < 0:
                lev = 0.0
            a[t] = lev
            v += lev * dt
            t += 1
    return a


def discharge_accel(steps: int, dt: float, level: float = 1.5, cruise_speed: float = 15.0,
                    v0: float = 0.0) -> np.ndarray:
    """Leader pulling away from a queue: constant acceleration up to a cruise speed."""
    a = np.zeros(steps + 1)
    v = v0
    for t in range(1, steps + 1):
        step = min(level, (cruise_speed - v) / dt)
        a[t] = step
        v += step * dt
    return a


def sinusoid_accel(steps: int, dt: float, amplitude: float = 3.0, period: float = 40.0,
                   phase: float = 0.0) -> np.ndarray:
    """Acceleration whose integral is a sinusoidal speed swing of +-``amplitude`` m/s."""
    t = np.arange(steps + 1) * dt
    w = 2 * np.pi / period
    a = amplitude * w * np.cos(w * t + phase)
    a[0] = 0.0
    return a


@dataclass
class SyntheticPlatoon:
    data: PlatoonData
    scenario: PlatoonScenario
    residuals: np.ndarray | None


def make_platoon(lead: Trajectory, model: ModelSpec, classes: list[str], gaps, v0=None,
                 noise_sigma: float = 0.0, rng: np.random.Generator | None = None,
                 prefix: str = "f", collision_policy: str = "error") -> SyntheticPlatoon:
    """Simulate followers behind ``lead`` and package them as observed data.

    ``gaps[j]`` is follower j's initial bumper gap to the vehicle ahead.
    With ``noise_sigma > 0`` an i.i.d. Gaussian acceleration disturbance
    is added to every follower at every step, so the "observed" data is no
    longer an exact model output.
    """
    followers = []
    x = lead.x[0]
    lead_len = lead.length
    v_init = lead.v[0] if v0 is None else v0
    for j, (c, g) in enumerate(zip(classes, gaps)):
        x = x - lead_len - g
        length = DEFAULT_LENGTH[c]
        followers.append(FollowerInit(f"{prefix}{j + 1}", c, length, x,
                                      float(v_init[j] if np.ndim(v_init) else v_init)))
        lead_len = length
    sc = PlatoonScenario(lead, followers, model)
    res_arr = None
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        res_arr = rng.normal(0.0, noise_sigma, (len(followers), len(lead)))
        res_arr[:, 0] = 0.0
    res = simulate_platoon(sc, SimConfig(collision_policy=collision_policy), residuals=res_arr)
    return SyntheticPlatoon(PlatoonData.from_sim(res), sc, res_arr)


def recovery_dataset(kind: str, model: ModelSpec, seed: int = 0, n_platoons: int = 4,
                     vclass: str = "small", dt: float = 0.1) -> list[PlatoonData]:
    """Noise-free platoons suited to each model's Table-style parameter regime.

    IDM follows a stop-and-go leader. The FVD sets have long equilibrium
    gaps and are string-unstable, so FVD platoons start at equilibrium
    behind a gently oscillating leader over a short horizon. The linear
    sets have no positive equilibrium gap; their platoons discharge from a
    queue behind a strongly accelerating leader.
    """
    from .cf_models import model_kind

    kind = model_kind(kind).name
    rng = np.random.default_rng(seed)
    p = model.for_class(vclass)
    out = []
    for i in range(n_platoons):
        pre = f"p{i}_"
        if kind == "IDM":
            lead = trajectory_from_accel(pre + "lead", stop_and_go_accel(600, dt, rng, v0=8.0), dt, v0=8.0)
            sp = make_platoon(lead, model, [vclass] * 4, rng.uniform(8, 20, 4), v0=8.0, prefix=pre + "f")
        elif kind == "FVD":
            v0 = rng.uniform(7, 11)
            g = p.b * (np.arctanh(2 * v0 / p.V0 - 1) + p.beta)
            acc = sinusoid_accel(300, dt, rng.uniform(1, 2), rng.uniform(15, 30), rng.uniform(0, 6))
            lead = trajectory_from_accel(pre + "lead", acc, dt, v0=v0)
            sp = make_platoon(lead, model, [vclass] * 3, g + rng.uniform(-3, 3, 3), v0=v0, prefix=pre + "f")
        else:
            acc = discharge_accel(150, dt, level=1.6 + 0.3 * i, cruise_speed=40.0)
            lead = trajectory_from_accel(pre + "lead", acc, dt, v0=0.0)
            sp = make_platoon(lead, model, [vclass] * 4, rng.uniform(4, 12, 4), v0=0.0, prefix=pre + "f")
        out.append(sp.data)
    return out


def add_accel_noise(platoon: PlatoonData, sigma: float, rng: np.random.Generator) -> PlatoonData:
    """Copy with zero-mean Gaussian noise on the followers' recorded accelerations only.

    Positions and speeds are untouched, mimicking accelerations obtained by
    differentiating accurately tracked positions.
    """
    fol = []
    for f in platoon.followers:
        a = f.a + rng.normal(0.0, sigma, len(f.a))
        fol.append(replace(f, a=a))
    return PlatoonData(platoon.head, fol)


def staggered_noisy_platoons(model: ModelSpec, rng: np.random.Generator, n_platoons: int = 5,
                             n_followers: int = 4, stagger: float = 15.0, duration: float = 60.0,
                             noise_sigma: float = 0.3, noise: str = "measurement", dt: float = 0.1,
                             vclass: str = "small") -> list[PlatoonData]:
    """Platoons released every ``stagger`` seconds, with acceleration noise.

    ``noise='measurement'`` perturbs the recorded accelerations after an
    exact model rollout. ``noise='process'`` adds the disturbance inside
    the rollout, so positions and speeds carry it too.

    Each leader starts at x = 0, so followers enter a segment beginning at
    0 shortly after their platoon's release time and interval membership
    spreads across the release schedule.
    """
    if noise not in ("measurement", "process"):
        raise ValueError("noise must be 'measurement' or 'process'")
    steps = int(round(duration / dt))
    out = []
    for i in range(n_platoons):
        pre = f"p{i}_"
        v0 = 8.0
        acc = stop_and_go_accel(steps, dt, rng, v0=v0)
        lead = trajectory_from_accel(pre + "lead", acc, dt, v0=v0, t0=i * stagger)
        gaps = rng.uniform(8, 20, n_followers)
        proc = noise_sigma if noise == "process" else 0.0
        sp = make_platoon(lead, model, [vclass] * n_followers, gaps, v0=v0, noise_sigma=proc, rng=rng,
                          prefix=pre + "f", collision_policy="clamp")
        data = sp.data
        if noise == "measurement" and noise_sigma > 0:
            data = add_accel_noise(data, noise_sigma, rng)
        out.append(data)
    return out
