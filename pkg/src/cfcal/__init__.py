"""Car-following simulation, error propagation and calibration toolkit."""

from .cf_models import (CFState, FVDParams, IDMParams, LinearParams, ModelSpec, fvd_accel, idm_accel,
                        linear_accel, load_param_file, table4_spec)
from .simulation import (CollisionError, FollowerInit, PlatoonScenario, SimConfig, SimResult,
                         batch_rollout, simulate_platoon)
from .trajectory_data import (CleaningConfig, Trajectory, build_platoons, clean_trajectory,
                              load_trajectories, write_trajectories)

__version__ = "0.1.0"

__all__ = [
    "CFState", "FVDParams", "IDMParams", "LinearParams", "ModelSpec", "fvd_accel", "idm_accel",
    "linear_accel", "load_param_file", "table4_spec", "CollisionError", "FollowerInit",
    "PlatoonScenario", "SimConfig", "SimResult", "batch_rollout", "simulate_platoon",
    "CleaningConfig", "Trajectory", "build_platoons", "clean_trajectory", "load_trajectories",
    "write_trajectories",
]
